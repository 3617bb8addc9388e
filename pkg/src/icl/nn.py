"""A small dense-network stack with hand-written reverse-mode gradients.

Everything is float64 numpy. Networks are plain lists of layers; ``forward``
returns an :class:`Activations` record that ``backward`` consumes. Records
carry the parameter version they were computed with, so a backward pass on
activations from before an optimiser step is rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import ContractViolation

ACTIVATIONS = ("relu", "tanh", "identity", "softmax-logits")
CHECKPOINT_FORMAT = "icl-checkpoint"
CHECKPOINT_VERSION = 1


def _activate(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _activation_grad(name, a, out, grad):
    if name == "relu":
        return grad * (a > 0)
    if name == "tanh":
        return grad * (1.0 - out * out)
    return grad


@dataclass
class Dense:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray
    activation: str = "identity"
    batch_norm: bool = False
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def parameters(self):
        ps = [self.weight, self.bias]
        if self.batch_norm:
            ps += [self.gamma, self.beta]
        return ps


@dataclass
class Activations:
    inputs: list
    pre: list
    outputs: list
    bn_cache: list
    version: int
    training: bool

    @property
    def output(self):
        return self.outputs[-1]


class DenseNet:
    """Fully connected network.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output, e.g. ``(d_in, 64, 64, d_z)``.
    activation : str
        Activation applied after every hidden layer.
    output_activation : str
        Activation of the last layer.
    batch_norm : bool
        Insert batch normalisation before the activation of hidden layers.
    rng : numpy Generator or int, optional
        Source for He-uniform initialisation.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activation: str = "relu",
        output_activation: str = "identity",
        batch_norm: bool = False,
        rng=None,
    ):
        if len(sizes) < 2:
            raise ContractViolation("need at least input and output sizes")
        for act in (activation, output_activation):
            if act not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {act!r}")
        rng = np.random.default_rng(rng)
        self.layers: List[Dense] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            limit = np.sqrt(6.0 / fan_in)
            layer = Dense(
                weight=rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                bias=np.zeros(fan_out),
                activation=output_activation if last else activation,
            )
            if batch_norm and not last:
                layer.batch_norm = True
                layer.gamma = np.ones(fan_out)
                layer.beta = np.zeros(fan_out)
                layer.running_mean = np.zeros(fan_out)
                layer.running_var = np.ones(fan_out)
            self.layers.append(layer)
        self._version = 0

    @classmethod
    def from_layers(cls, layers: List[Dense]) -> "DenseNet":
        net = cls.__new__(cls)
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise ContractViolation("consecutive layer dimensions do not chain")
        net.layers = list(layers)
        net._version = 0
        return net

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def mark_updated(self):
        self._version += 1

    def forward(self, x, training: bool = False) -> Activations:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ContractViolation(f"expected {self.in_dim} input features, got {x.shape[1]}")
        inputs, pre, outputs, bn_cache = [], [], [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            a = h @ layer.weight + layer.bias
            cache = None
            if layer.batch_norm:
                a, cache = _bn_forward(layer, a, training)
            out = _activate(layer.activation, a)
            pre.append(a)
            outputs.append(out)
            bn_cache.append(cache)
            h = out
        return Activations(inputs, pre, outputs, bn_cache, self._version, training)

    def __call__(self, x):
        return self.forward(x).output

    def backward(self, record: Activations, grad_out):
        """Return ``(param_grads, grad_input)`` for upstream gradient ``grad_out``."""
        if record.version != self._version:
            raise ContractViolation("activations are stale: parameters changed since forward")
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.shape != record.output.shape:
            raise ContractViolation("upstream gradient shape does not match output")
        grads = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            grad = _activation_grad(layer.activation, record.pre[i], record.outputs[i], grad)
            layer_grads = []
            if layer.batch_norm:
                grad, dgamma, dbeta = _bn_backward(layer, record.bn_cache[i], grad)
                layer_grads = [dgamma, dbeta]
            gw = record.inputs[i].T @ grad
            gb = grad.sum(axis=0)
            grads = [gw, gb] + layer_grads + grads
            grad = grad @ layer.weight.T
        return grads, grad

    def nets(self) -> dict:
        return {"": self}


def _bn_forward(layer: Dense, a, training):
    if training:
        mean = a.mean(axis=0)
        var = a.var(axis=0)
        m = layer.momentum
        layer.running_mean *= 1.0 - m
        layer.running_mean += m * mean
        layer.running_var *= 1.0 - m
        layer.running_var += m * var
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = 1.0 / np.sqrt(var + layer.bn_eps)
    xhat = (a - mean) * inv_std
    return layer.gamma * xhat + layer.beta, (xhat, inv_std, training)


def _bn_backward(layer: Dense, cache, grad):
    xhat, inv_std, training = cache
    dgamma = np.sum(grad * xhat, axis=0)
    dbeta = grad.sum(axis=0)
    dxhat = grad * layer.gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = grad.shape[0]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dx, dgamma, dbeta


class GaussianHead:
    """Encoder producing the mean and log-variance of a diagonal Gaussian."""

    def __init__(self, sizes: Sequence[int], latent_dim: int, rng=None):
        rng = np.random.default_rng(rng)
        self.trunk = DenseNet(sizes, activation="relu", output_activation="relu", rng=rng)
        self.mu = DenseNet((sizes[-1], latent_dim), rng=rng)
        self.logvar = DenseNet((sizes[-1], latent_dim), rng=rng)
        # start near unit variance
        self.logvar.layers[0].weight *= 0.1

    @classmethod
    def from_nets(cls, trunk, mu, logvar) -> "GaussianHead":
        head = cls.__new__(cls)
        if mu.out_dim != logvar.out_dim:
            raise ContractViolation("mean and log-variance dims differ")
        head.trunk, head.mu, head.logvar = trunk, mu, logvar
        return head

    @property
    def in_dim(self):
        return self.trunk.in_dim

    @property
    def out_dim(self):
        return self.mu.out_dim

    def parameters(self):
        return self.trunk.parameters() + self.mu.parameters() + self.logvar.parameters()

    def mark_updated(self):
        for net in (self.trunk, self.mu, self.logvar):
            net.mark_updated()

    def forward(self, x, training: bool = False):
        rt = self.trunk.forward(x, training)
        rm = self.mu.forward(rt.output, training)
        rl = self.logvar.forward(rt.output, training)
        return rm.output, rl.output, (rt, rm, rl)

    def backward(self, record, grad_mu, grad_logvar):
        rt, rm, rl = record
        gm, hm = self.mu.backward(rm, grad_mu)
        gl, hl = self.logvar.backward(rl, grad_logvar)
        gt, gx = self.trunk.backward(rt, hm + hl)
        return gt + gm + gl, gx

    def nets(self) -> dict:
        return {"trunk": self.trunk, "mu": self.mu, "logvar": self.logvar}


def reparameterize(mu, logvar, noise):
    """``z = mu + exp(logvar/2) * noise``; returns ``(z, backward)``.

    ``backward(grad_z)`` gives ``(grad_mu, grad_logvar)``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.shape or logvar.shape != mu.shape:
        raise ContractViolation("noise, mu and logvar shapes must match")
    std = np.exp(0.5 * logvar)
    z = mu + std * noise

    def backward(grad_z):
        return grad_z, grad_z * noise * 0.5 * std

    return z, backward


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list, grads: list) -> list:
    """Bias-corrected Adam update applied in place; returns ``params``."""
    if len(params) != len(grads):
        raise ContractViolation("parameter and gradient lists differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ContractViolation("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam over the parameters of several modules (DenseNet or GaussianHead)."""

    def __init__(self, modules, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.modules = list(modules)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads_per_module):
        params, grads = [], []
        for module, g in zip(self.modules, grads_per_module, strict=True):
            params += module.parameters()
            grads += list(g)
        adam_step(self.state, params, grads)
        for module in self.modules:
            module.mark_updated()


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels``; returns ``(loss, grad_logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(int).ravel()
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def squared_error(pred, target):
    """Mean over rows of ``0.5 * ||pred - target||**2``; returns ``(loss, grad)``."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = diff.shape[0]
    return 0.5 * float(np.sum(diff * diff)) / n, diff / n


def parameter_checksum(module) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in module.parameters():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def _layer_meta(layer: Dense) -> dict:
    return {
        "in_dim": layer.in_dim,
        "out_dim": layer.out_dim,
        "activation": layer.activation,
        "batch_norm": layer.batch_norm,
        "momentum": layer.momentum,
        "bn_eps": layer.bn_eps,
    }


def save_checkpoint(path, modules: dict) -> None:
    """Write named modules to an ``.npz`` archive (exact float64 round trip)."""
    arrays = {}
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "modules": {}}
    for name, module in modules.items():
        entry = {"kind": type(module).__name__, "nets": {}}
        for sub, net in module.nets().items():
            entry["nets"][sub] = [_layer_meta(layer) for layer in net.layers]
            for i, layer in enumerate(net.layers):
                key = f"{name}/{sub}/{i}"
                arrays[key + "/weight"] = layer.weight
                arrays[key + "/bias"] = layer.bias
                if layer.batch_norm:
                    for attr in ("gamma", "beta", "running_mean", "running_var"):
                        arrays[f"{key}/{attr}"] = getattr(layer, attr)
        meta["modules"][name] = entry
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractViolation("not an icl checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {meta.get('version')}")
        out = {}
        for name, entry in meta["modules"].items():
            nets = {}
            for sub, layers_meta in entry["nets"].items():
                layers = []
                for i, lm in enumerate(layers_meta):
                    key = f"{name}/{sub}/{i}"
                    layer = Dense(
                        weight=data[key + "/weight"].copy(),
                        bias=data[key + "/bias"].copy(),
                        activation=lm["activation"],
                        batch_norm=lm["batch_norm"],
                        momentum=lm["momentum"],
                        bn_eps=lm["bn_eps"],
                    )
                    if layer.batch_norm:
                        for attr in ("gamma", "beta", "running_mean", "running_var"):
                            setattr(layer, attr, data[f"{key}/{attr}"].copy())
                    layers.append(layer)
                nets[sub] = DenseNet.from_layers(layers)
            if entry["kind"] == "GaussianHead":
                out[name] = GaussianHead.from_nets(nets["trunk"], nets["mu"], nets["logvar"])
            else:
                out[name] = nets[""]
    return out
