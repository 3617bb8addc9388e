"""Invariant representation learners, adversarial probes and selection rules.

The estimators follow the scikit-learn API. ``fit`` takes the extraneous
variable as an extra argument ``c``:

>>> clf = InvariantClassifier(regularizer="icl", reg_weight=1.0)   # doctest: +SKIP
>>> clf.fit(X, y, c=c).transform(X_test)                           # doctest: +SKIP
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import ContractViolation, ExtraneousSpec, IclParams, PreconditionError
from .losses import icl_balanced, icl_empirical, kl_compression, mmd_baseline_losses
from .nn import (
    Adam,
    DenseNet,
    GaussianHead,
    parameter_checksum,
    reparameterize,
    softmax_cross_entropy,
    squared_error,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("unsupervised_vae", "supervised_vib", "discriminative")
REGULARIZERS = ("none", "icl", "mmd_minus_s", "mmd_f", "kl")

WARMUP_START = 0.01
WARMUP_FACTOR = 1.5


class ConfigError(ValueError):
    pass


def lambda_schedule(lam: float, epoch: int, warmup: bool = True,
                    start: float = WARMUP_START, factor: float = WARMUP_FACTOR) -> float:
    """Effective regulariser weight at ``epoch``: ``min(lam, lam * start * factor**epoch)``."""
    if epoch < 0:
        raise ContractViolation("epoch must be >= 0")
    if not warmup:
        return lam
    return min(lam, lam * start * factor**epoch)


def _check_c(c, c_kind: str, n: int):
    if c is None:
        raise ConfigError("the extraneous variable c is required")
    c = np.asarray(c, dtype=np.float64).ravel()
    if c.shape[0] != n:
        raise ContractViolation("c length does not match X rows")
    if c_kind == "discrete":
        if np.any(c != np.round(c)) or np.any(c < 0):
            raise ContractViolation("discrete c must be non-negative integer codes")
    elif c_kind != "continuous":
        raise ConfigError(f"c_kind must be 'discrete' or 'continuous', got {c_kind!r}")
    return c


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


class _InvariantBase(BaseEstimator):
    """Shared training machinery: regulariser dispatch and the epoch loop."""

    def _validate_config(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for pairwise losses")
        if self.regularizer == "kl" and self.objective == "discriminative":
            raise ConfigError("the kl regulariser needs a Gaussian encoder")
        if self.regularizer in ("mmd_minus_s", "mmd_f") and self.c_kind != "discrete":
            raise ConfigError("MMD baselines need a discrete extraneous variable")

    def _setup_c(self, c):
        if self.c_kind == "discrete":
            self.n_c_classes_ = max(2, int(c.max()) + 1)
            self.c_spec_ = ExtraneousSpec.discrete(self.n_c_classes_)
        else:
            self.n_c_classes_ = None
            self.c_spec_ = ExtraneousSpec.continuous(self.icl_delta)
        self.icl_params_ = IclParams(self.icl_alpha, self.icl_beta, self.icl_delta)

    def _c_features(self, c):
        c = np.asarray(c, dtype=np.float64).ravel()
        if self.c_kind == "discrete":
            out = np.zeros((c.shape[0], self.n_c_classes_))
            codes = c.astype(int)
            valid = codes < self.n_c_classes_
            out[np.arange(c.shape[0])[valid], codes[valid]] = 1.0
            return out
        return c[:, None]

    def _regularize(self, z, c, mu=None, logvar=None):
        """Return ``(value, grad_z, grad_mu, grad_logvar)`` of the regulariser."""
        reg = self.regularizer
        zero = np.zeros_like(z)
        if reg == "none":
            return 0.0, zero, None, None
        if reg == "icl":
            if self.balance_classes and self.c_spec_.is_discrete:
                rep = icl_balanced(z, c, self.c_spec_, self.icl_params_, with_grad=True)
            else:
                rep = icl_empirical(z, c, self.c_spec_, self.icl_params_, with_grad=True)
            return rep.value, rep.grad_z, None, None
        if reg in ("mmd_minus_s", "mmd_f"):
            out = mmd_baseline_losses(z, c, self.c_spec_, self.icl_params_, with_grad=True)
            return out[reg], out["grad_" + reg], None, None
        value, g_mu, g_lv = kl_compression(mu, logvar, with_grad=True)
        return value, zero, g_mu, g_lv

    def _record(self, epoch, lam, task, reg, metric):
        self.history_.append({
            "epoch": epoch,
            "effective_lambda": lam,
            "task_loss": task,
            "reg_loss": reg,
            "task_metric": metric,
        })

    def _rngs(self):
        seq = np.random.SeedSequence(self.random_state)
        return [np.random.default_rng(s) for s in seq.spawn(3)]


class InvariantClassifier(ClassifierMixin, TransformerMixin, _InvariantBase):
    """Encoder plus predictor trained with an invariance regulariser.

    Parameters
    ----------
    objective : {"discriminative", "supervised_vib"}
        ``discriminative`` trains a deterministic encoder ``z = h(x)`` with
        cross-entropy. ``supervised_vib`` uses a Gaussian encoder, samples
        ``z`` by reparameterisation and adds ``beta_vae`` times the
        reconstruction error of a decoder fed ``[z, c]``.
    regularizer : {"none", "icl", "mmd_minus_s", "mmd_f", "kl"}
    reg_weight : float
        Target regulariser weight; warm-up starts at 1% of it.
    icl_alpha, icl_beta, icl_delta : float
        Pair-energy parameters; ``icl_delta`` is the neighbourhood radius for
        continuous ``c`` (expected already scaled to [0, 1]).
    c_kind : {"discrete", "continuous"}
    balance_classes : bool
        For discrete ``c``, weight the ICL pairs so every class counts
        equally regardless of its frequency in the batch.

    Attributes
    ----------
    encoder_, predictor_, decoder_ : networks (``decoder_`` only for VIB)
    history_ : list of dict
        One record per epoch.
    """

    def __init__(
        self,
        objective: str = "discriminative",
        regularizer: str = "icl",
        reg_weight: float = 1.0,
        beta_vae: float = 1.0,
        icl_alpha: float = 0.0,
        icl_beta: float = 1.0,
        icl_delta: float = 0.1,
        c_kind: str = "discrete",
        balance_classes: bool = True,
        hidden: Sequence[int] = (64, 64),
        latent_dim: int = 32,
        predictor_hidden: Sequence[int] = (32,),
        epochs: int = 20,
        batch_size: int = 256,
        lr: float = 1e-3,
        warmup: bool = True,
        random_state: int = 0,
    ):
        self.objective = objective
        self.regularizer = regularizer
        self.reg_weight = reg_weight
        self.beta_vae = beta_vae
        self.icl_alpha = icl_alpha
        self.icl_beta = icl_beta
        self.icl_delta = icl_delta
        self.c_kind = c_kind
        self.balance_classes = balance_classes
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.predictor_hidden = predictor_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.random_state = random_state

    def fit(self, X, y, c=None):
        self._validate_config()
        if self.objective == "unsupervised_vae":
            raise ConfigError("use InvariantVAE for the unsupervised objective")
        if y is None:
            raise ConfigError("targets y are required")
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y).ravel()
        if y.shape[0] != X.shape[0]:
            raise ContractViolation("y length does not match X rows")
        c = _check_c(c, self.c_kind, X.shape[0])
        self._setup_c(c)
        self.classes_, y_codes = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        init_rng, shuffle_rng, noise_rng = self._rngs()
        vib = self.objective == "supervised_vib"
        sizes = (X.shape[1], *self.hidden)
        if vib:
            self.encoder_ = GaussianHead(sizes, self.latent_dim, rng=init_rng)
            c_dim = self._c_features(c[:1]).shape[1]
            dec_sizes = (self.latent_dim + c_dim, *reversed(self.hidden), X.shape[1])
            self.decoder_ = DenseNet(dec_sizes, rng=init_rng)
        else:
            self.encoder_ = DenseNet((*sizes, self.latent_dim), rng=init_rng)
            self.decoder_ = None
        n_out = max(2, len(self.classes_))
        self.predictor_ = DenseNet((self.latent_dim, *self.predictor_hidden, n_out), rng=init_rng)
        modules = [self.encoder_, self.predictor_] + ([self.decoder_] if vib else [])
        opt = Adam(modules, lr=self.lr)
        self.history_ = []
        for epoch in range(self.epochs):
            lam = lambda_schedule(self.reg_weight, epoch, self.warmup)
            task_sum = reg_sum = 0.0
            correct = 0
            batches = _minibatches(X.shape[0], self.batch_size, shuffle_rng)
            for idx in batches:
                xb, yb, cb = X[idx], y_codes[idx], c[idx]
                if vib:
                    mu, logvar, rec_enc = self.encoder_.forward(xb, training=True)
                    z, rp_back = reparameterize(mu, logvar, noise_rng.standard_normal(mu.shape))
                else:
                    rec_enc = self.encoder_.forward(xb, training=True)
                    z = rec_enc.output
                    mu = logvar = None
                rec_pred = self.predictor_.forward(z, training=True)
                ce, g_logits = softmax_cross_entropy(rec_pred.output, yb)
                correct += int(np.sum(rec_pred.output.argmax(axis=1) == yb))
                g_pred, g_z = self.predictor_.backward(rec_pred, g_logits)
                task = ce
                grads = [None, g_pred]
                if vib:
                    dec_in = np.hstack([z, self._c_features(cb)])
                    rec_dec = self.decoder_.forward(dec_in, training=True)
                    recon, g_rec = squared_error(rec_dec.output, xb)
                    task += self.beta_vae * recon
                    g_dec, g_in = self.decoder_.backward(rec_dec, self.beta_vae * g_rec)
                    g_z = g_z + g_in[:, : self.latent_dim]
                    grads.append(g_dec)
                reg, g_reg, g_mu_reg, g_lv_reg = self._regularize(z, cb, mu, logvar)
                g_z = g_z + lam * g_reg
                if vib:
                    g_mu, g_lv = rp_back(g_z)
                    if g_mu_reg is not None:
                        g_mu = g_mu + lam * g_mu_reg
                        g_lv = g_lv + lam * g_lv_reg
                    grads[0], _ = self.encoder_.backward(rec_enc, g_mu, g_lv)
                else:
                    grads[0], _ = self.encoder_.backward(rec_enc, g_z)
                opt.step(grads)
                task_sum += task * len(idx)
                reg_sum += reg * len(idx)
            n = X.shape[0]
            self._record(epoch, lam, task_sum / n, reg_sum / n, correct / n)
            log.debug("epoch %d lambda %.4g task %.4f reg %.4f", epoch, lam, task_sum / n, reg_sum / n)
        return self

    def transform(self, X):
        """Deterministic representation (the Gaussian mean for VIB)."""
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        if self.objective == "supervised_vib":
            return self.encoder_.forward(X)[0]
        return self.encoder_.forward(X).output

    def predict_proba(self, X):
        logits = self.predictor_.forward(self.transform(X)).output
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class InvariantVAE(TransformerMixin, _InvariantBase):
    """Conditional VAE: minimise reconstruction + beta_vae * KL + lambda * regulariser.

    The decoder sees ``[z, c]`` (one-hot ``c`` when discrete); the
    representation returned by :meth:`transform` is the encoder mean.
    Reconstruction is an isotropic unit-variance Gaussian likelihood, i.e.
    ``0.5 * ||x - x_hat||**2`` up to a constant.
    """

    def __init__(
        self,
        regularizer: str = "icl",
        reg_weight: float = 1.0,
        beta_vae: float = 1.0,
        icl_alpha: float = 0.0,
        icl_beta: float = 1.0,
        icl_delta: float = 0.1,
        c_kind: str = "discrete",
        balance_classes: bool = True,
        hidden: Sequence[int] = (64, 64),
        latent_dim: int = 32,
        epochs: int = 20,
        batch_size: int = 256,
        lr: float = 1e-3,
        warmup: bool = True,
        random_state: int = 0,
    ):
        self.regularizer = regularizer
        self.reg_weight = reg_weight
        self.beta_vae = beta_vae
        self.icl_alpha = icl_alpha
        self.icl_beta = icl_beta
        self.icl_delta = icl_delta
        self.c_kind = c_kind
        self.balance_classes = balance_classes
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.random_state = random_state

    objective = "unsupervised_vae"

    def fit(self, X, y=None, c=None):
        self._validate_config()
        X = check_array(X, dtype=np.float64)
        c = _check_c(c, self.c_kind, X.shape[0])
        self._setup_c(c)
        self.n_features_in_ = X.shape[1]
        init_rng, shuffle_rng, noise_rng = self._rngs()
        self.encoder_ = GaussianHead((X.shape[1], *self.hidden), self.latent_dim, rng=init_rng)
        c_dim = self._c_features(c[:1]).shape[1]
        dec_sizes = (self.latent_dim + c_dim, *reversed(self.hidden), X.shape[1])
        self.decoder_ = DenseNet(dec_sizes, rng=init_rng)
        opt = Adam([self.encoder_, self.decoder_], lr=self.lr)
        self.history_ = []
        for epoch in range(self.epochs):
            lam = lambda_schedule(self.reg_weight, epoch, self.warmup)
            task_sum = reg_sum = sq_sum = kl_sum = 0.0
            for idx in _minibatches(X.shape[0], self.batch_size, shuffle_rng):
                xb, cb = X[idx], c[idx]
                mu, logvar, rec_enc = self.encoder_.forward(xb, training=True)
                z, rp_back = reparameterize(mu, logvar, noise_rng.standard_normal(mu.shape))
                rec_dec = self.decoder_.forward(np.hstack([z, self._c_features(cb)]), training=True)
                recon, g_rec = squared_error(rec_dec.output, xb)
                kl, g_mu_kl, g_lv_kl = kl_compression(mu, logvar, with_grad=True)
                g_dec, g_in = self.decoder_.backward(rec_dec, g_rec)
                reg, g_reg, g_mu_reg, g_lv_reg = self._regularize(z, cb, mu, logvar)
                g_mu, g_lv = rp_back(g_in[:, : self.latent_dim] + lam * g_reg)
                g_mu = g_mu + self.beta_vae * g_mu_kl
                g_lv = g_lv + self.beta_vae * g_lv_kl
                if g_mu_reg is not None:
                    g_mu = g_mu + lam * g_mu_reg
                    g_lv = g_lv + lam * g_lv_reg
                g_enc, _ = self.encoder_.backward(rec_enc, g_mu, g_lv)
                opt.step([g_enc, g_dec])
                m = len(idx)
                task_sum += (recon + self.beta_vae * kl) * m
                reg_sum += reg * m
                sq_sum += 2.0 * recon * m
                kl_sum += kl * m
            n = X.shape[0]
            self._record(epoch, lam, task_sum / n, reg_sum / n, sq_sum / n)
            self.history_[-1]["kl"] = kl_sum / n
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return self.encoder_.forward(check_array(X, dtype=np.float64))[0]

    def reconstruct(self, X, c):
        z = self.transform(X)
        c = _check_c(c, self.c_kind, z.shape[0])
        return self.decoder_.forward(np.hstack([z, self._c_features(c)])).output

    def reconstruction_error(self, X, c) -> float:
        """Mean over rows of the squared reconstruction error summed over features."""
        X = check_array(X, dtype=np.float64)
        diff = self.reconstruct(X, c) - X
        return float(np.mean(np.sum(diff * diff, axis=1)))

    def score(self, X, c):
        return -self.reconstruction_error(X, c)


class AdversaryProbe(BaseEstimator):
    """Three hidden layers with batch normalisation, trained to recover ``c`` from ``z``.

    Inputs are standardised with training statistics. Training stops when
    the validation loss has not improved for ``patience`` epochs, and the
    best weights seen are kept.
    """

    def __init__(self, task: str = "classification", hidden: Sequence[int] = (64, 64, 64),
                 batch_norm: bool = True, epochs: int = 200, lr: float = 1e-3,
                 batch_size: int = 256, patience: int = 20, random_state: int = 0):
        self.task = task
        self.hidden = hidden
        self.batch_norm = batch_norm
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.random_state = random_state

    def _loss(self, out, target):
        if self.task == "classification":
            return softmax_cross_entropy(out, target)
        return squared_error(out, target[:, None])

    def fit(self, Z, c, Z_val=None, c_val=None):
        Z = check_array(Z, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64).ravel()
        if self.task not in ("classification", "regression"):
            raise ConfigError("task must be 'classification' or 'regression'")
        rng = np.random.default_rng(self.random_state)
        if Z_val is None:
            perm = rng.permutation(Z.shape[0])
            n_val = max(2, Z.shape[0] // 10)
            Z_val, c_val = Z[perm[:n_val]], c[perm[:n_val]]
            Z, c = Z[perm[n_val:]], c[perm[n_val:]]
        Z_val = check_array(Z_val, dtype=np.float64)
        c_val = np.asarray(c_val, dtype=np.float64).ravel()
        self.mean_ = Z.mean(axis=0)
        std = Z.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        if self.task == "classification":
            self.classes_, target = np.unique(c, return_inverse=True)
            lookup = {v: i for i, v in enumerate(self.classes_)}
            target_val = np.array([lookup.get(v, -1) for v in c_val])
            n_out = max(2, len(self.classes_))
        else:
            target, target_val, n_out = c, c_val, 1
        Zs = (Z - self.mean_) / self.scale_
        Zv = (Z_val - self.mean_) / self.scale_
        self.net_ = DenseNet((Z.shape[1], *self.hidden, n_out), batch_norm=self.batch_norm, rng=rng)
        opt = Adam([self.net_], lr=self.lr)
        best, best_state, stale = np.inf, None, 0
        self.n_epochs_ = 0
        for epoch in range(self.epochs):
            for idx in _minibatches(Zs.shape[0], self.batch_size, rng):
                rec = self.net_.forward(Zs[idx], training=True)
                _, g = self._loss(rec.output, target[idx])
                grads, _ = self.net_.backward(rec, g)
                opt.step([grads])
            self.n_epochs_ = epoch + 1
            out = self.net_.forward(Zv).output
            if self.task == "classification":
                keep = target_val >= 0
                val_loss = self._loss(out[keep], target_val[keep])[0] if keep.any() else 0.0
            else:
                val_loss = self._loss(out, target_val)[0]
            if val_loss < best - 1e-12:
                best, stale = val_loss, 0
                best_state = [p.copy() for p in self._state()]
            else:
                stale += 1
                if stale >= self.patience:
                    break
        if best_state is not None:
            for p, saved in zip(self._state(), best_state):
                p[...] = saved
        return self

    def _state(self):
        out = list(self.net_.parameters())
        for layer in self.net_.layers:
            if layer.batch_norm:
                out += [layer.running_mean, layer.running_var]
        return out

    def predict(self, Z):
        check_is_fitted(self, "net_")
        Zs = (check_array(Z, dtype=np.float64) - self.mean_) / self.scale_
        out = self.net_.forward(Zs).output
        if self.task == "classification":
            return self.classes_[out.argmax(axis=1)]
        return out[:, 0]

    def metric(self, Z, c) -> float:
        """Accuracy for classification, mean squared error for regression."""
        c = np.asarray(c, dtype=np.float64).ravel()
        pred = self.predict(Z)
        if self.task == "classification":
            return float(np.mean(pred == c))
        return float(np.mean((pred - c) ** 2))


@dataclass
class InvarianceReport:
    task_metric: float
    adversary_metric: float
    per_seed: list = field(default_factory=list)
    task_metric_name: str = "accuracy"
    adversary_metric_name: str = "accuracy"

    def to_dict(self):
        return asdict(self)


def _task_metric(encoder, batch):
    if isinstance(encoder, InvariantVAE):
        return encoder.reconstruction_error(batch.x, batch.c), "reconstruction_error"
    return float(np.mean(encoder.predict(batch.x) == batch.y)), "accuracy"


def measure_invariance(encoder, data, adversary_params: Optional[dict] = None,
                       random_state: int = 0, eval_split: str = "test") -> InvarianceReport:
    """Train a fresh adversary on frozen training representations and score it.

    With ``eval_split="test"`` the validation split drives the adversary's
    early stopping and the test split is scored. With ``"validation"`` (used
    for model selection) early stopping uses a slice of the training rows and
    the validation split is scored, so the test split is never touched.
    The encoder weights are checked to be unchanged afterwards.
    """
    if eval_split not in ("test", "validation"):
        raise ConfigError("eval_split must be 'test' or 'validation'")
    before = parameter_checksum(encoder.encoder_)
    spec = data.spec
    task = "classification" if spec.is_discrete else "regression"
    params = dict(adversary_params or {})
    params.setdefault("random_state", random_state)
    scored = data.test if eval_split == "test" else data.validation
    z_train = encoder.transform(data.train.x)
    z_scored = encoder.transform(scored.x)
    if eval_split == "test":
        stop_z, stop_c = encoder.transform(data.validation.x), data.validation.c
    else:
        stop_z = stop_c = None
    task_metric, task_name = _task_metric(encoder, scored)
    if task == "classification" and len(np.unique(data.train.c)) < 2:
        warnings.warn("extraneous variable has a single class; reporting chance level")
        adv = float(np.mean(scored.c == data.train.c[0]))
    else:
        probe = AdversaryProbe(task=task, **params).fit(z_train, data.train.c, stop_z, stop_c)
        adv = probe.metric(z_scored, scored.c)
    if parameter_checksum(encoder.encoder_) != before:
        raise RuntimeError("encoder weights changed during invariance measurement")
    return InvarianceReport(
        task_metric=task_metric,
        adversary_metric=adv,
        task_metric_name=task_name,
        adversary_metric_name="accuracy" if task == "classification" else "mse",
    )


def select_hyperparameters(candidates: list, reference_task_metric: float,
                           supervised: bool = True, c_kind: str = "discrete",
                           relative_band: float = 0.05, absolute_band: float = 5.0):
    """Pick the most invariant candidate whose task metric stays near the reference.

    ``candidates`` are dicts with ``reg_weight``, ``task_metric`` and
    ``adversary_metric`` (validation numbers). Supervised candidates must
    keep accuracy >= (1 - relative_band) * reference; unsupervised ones must
    keep reconstruction error <= reference + absolute_band. Among the
    survivors the lowest adversary accuracy (discrete ``c``) or highest
    adversary MSE (continuous ``c``) wins; ties go to the smaller weight.

    Returns ``(chosen, fallback)``; ``chosen`` is ``None`` with
    ``fallback=True`` when no candidate passes, meaning the unregularised
    model should be used.
    """
    if not candidates:
        raise ConfigError("candidate grid is empty")

    def admissible(cand):
        if supervised:
            return cand["task_metric"] >= (1.0 - relative_band) * reference_task_metric
        return cand["task_metric"] <= reference_task_metric + absolute_band

    survivors = [cand for cand in candidates if admissible(cand)]
    for cand in candidates:
        cand["admissible"] = admissible(cand)
    if not survivors:
        warnings.warn("no candidate satisfied the task-metric band; falling back to unregularised")
        return None, True
    sign = 1.0 if c_kind == "discrete" else -1.0
    chosen = min(survivors, key=lambda cand: (sign * cand["adversary_metric"], cand["reg_weight"]))
    return chosen, False


def powers_of_ten(spec: str) -> list:
    """``"1e-2..1e2"`` -> ``[0.01, 0.1, 1.0, 10.0, 100.0]``."""
    lo, hi = (float(part) for part in spec.split(".."))
    if lo <= 0 or hi < lo:
        raise ConfigError(f"bad powers-of-ten range {spec!r}")
    e_lo, e_hi = int(round(np.log10(lo))), int(round(np.log10(hi)))
    return [float(10.0**e) if e >= 0 else float(f"1e{e}") for e in range(e_lo, e_hi + 1)]


class LipschitzLinearRegressor(RegressorMixin, BaseEstimator):
    """Linear model ``b(z) = w.z + b0`` with ``||w||_2 <= lipschitz`` after every step.

    The Lipschitz constant of the fitted map with respect to the Euclidean
    metric is therefore at most ``lipschitz``.
    """

    def __init__(self, lipschitz: float = 1.0, epochs: int = 200, lr: float = 1e-2,
                 batch_size: int = 256, random_state: int = 0):
        self.lipschitz = lipschitz
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, Z, c):
        Z = check_array(Z, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64).ravel()
        rng = np.random.default_rng(self.random_state)
        self.net_ = DenseNet((Z.shape[1], 1), rng=rng)
        self.net_.layers[0].bias[:] = c.mean()
        self._clip()
        opt = Adam([self.net_], lr=self.lr)
        for _ in range(self.epochs):
            for idx in _minibatches(Z.shape[0], self.batch_size, rng):
                rec = self.net_.forward(Z[idx], training=True)
                _, g = squared_error(rec.output, c[idx, None])
                grads, _ = self.net_.backward(rec, g)
                opt.step([grads])
                self._clip()
        self.coef_ = self.net_.layers[0].weight[:, 0].copy()
        self.intercept_ = float(self.net_.layers[0].bias[0])
        return self

    def _clip(self):
        w = self.net_.layers[0].weight
        norm = float(np.linalg.norm(w))
        if norm > self.lipschitz:
            w *= self.lipschitz / norm

    def predict(self, Z):
        check_is_fitted(self, "net_")
        return self.net_.forward(check_array(Z, dtype=np.float64)).output[:, 0]


def far_pair_fraction(c, delta: float) -> float:
    """Fraction of ordered pairs (self-pairs included) with ``|c - c'| > delta``."""
    c = np.sort(np.asarray(c, dtype=np.float64).ravel())
    n = c.shape[0]
    # for each value, count partners within delta via binary search
    lo = np.searchsorted(c, c - delta, side="left")
    hi = np.searchsorted(c, c + delta, side="right")
    near = int(np.sum(hi - lo))
    return (n * n - near) / (n * n)


def lemma2_bound(delta: float, rho: float, lipschitz: float, epsilon: float):
    """``(delta*rho - L*sqrt(epsilon))**2 / 4``, or ``None`` when ``epsilon >= (delta*rho/L)**2``."""
    if not epsilon < (delta * rho / lipschitz) ** 2:
        return None
    return (delta * rho - lipschitz * np.sqrt(epsilon)) ** 2 / 4.0


def lemma2_check(z, c, params: IclParams, lipschitz: float = 1.0, holdout: float = 0.5,
                 random_state: int = 0, adversary_epochs: int = 200) -> dict:
    """Compare a Lipschitz adversary's MSE with the ICL lower bound.

    The adversary is fit on one part of the rows and scored on the rest;
    ``epsilon`` (the ICL value) and ``rho`` are measured on the scored rows,
    which is the distribution the bound speaks about. The bound
    ``(delta*rho - L*sqrt(epsilon))**2 / 4`` is reported only when
    ``epsilon < delta**2 rho**2 / L**2``; otherwise it is vacuous and
    ``holds`` is trivially true.
    """
    if params.delta <= 0:
        raise PreconditionError("delta must be > 0")
    z = check_array(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64).ravel()
    if np.any(c < 0) or np.any(c > 1):
        raise PreconditionError("c must be normalised to [0, 1]")
    rng = np.random.default_rng(random_state)
    perm = rng.permutation(z.shape[0])
    n_fit = int(round((1.0 - holdout) * z.shape[0]))
    fit_idx, eval_idx = perm[:n_fit], perm[n_fit:]
    spec = ExtraneousSpec.continuous(params.delta)
    epsilon = icl_empirical(z[eval_idx], c[eval_idx], spec, params).value
    rho = far_pair_fraction(c[eval_idx], params.delta)
    adversary = LipschitzLinearRegressor(lipschitz, epochs=adversary_epochs,
                                         random_state=random_state).fit(z[fit_idx], c[fit_idx])
    mse = float(np.mean((adversary.predict(z[eval_idx]) - c[eval_idx]) ** 2))
    bound = lemma2_bound(params.delta, rho, lipschitz, epsilon)
    vacuous = bound is None
    return {
        "epsilon_measured": epsilon,
        "rho": rho,
        "bound": bound,
        "vacuous": vacuous,
        "adversary_mse": mse,
        "adversary_weight_norm": float(np.linalg.norm(adversary.coef_)),
        "holds": True if vacuous else mse >= bound,
    }
