"""Gradient-flow simulation of labelled particles under an invariance regulariser.

Each particle is pulled towards its anchor (a stand-in for reconstruction
pressure) while the regulariser acts on the whole configuration:

    E(z) = lam * Reg(z, labels) + mu * sum_i ||z_i - anchor_i||**2
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, ExtraneousSpec, IclParams, pairwise_distances
from .losses import icl_empirical, kl_proxy, mmd_baseline_losses

PARTICLE_REGULARIZERS = ("icl", "mmd_minus_s", "mmd_f", "kl_proxy")


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite positions at step {step}")
        self.step = step


@dataclass
class ParticleSystem:
    positions: np.ndarray
    labels: np.ndarray
    anchors: np.ndarray = None
    lam: float = 1.0
    mu: float = 0.0
    step_size: float = 0.1
    steps: int = 500

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(int).ravel()
        if self.anchors is None:
            self.anchors = self.positions.copy()
        self.anchors = np.array(self.anchors, dtype=np.float64)
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ContractViolation("positions must be N x 2")
        if n < 4:
            raise ContractViolation("need at least 4 particles")
        if self.labels.shape[0] != n or self.anchors.shape != self.positions.shape:
            raise ContractViolation("labels/anchors do not match positions")
        if len(np.unique(self.labels)) < 2:
            raise ContractViolation("labels must cover at least two classes")
        if self.mu < 0 or self.lam < 0:
            raise ContractViolation("lam and mu must be >= 0")
        if self.step_size <= 0 or self.steps < 0:
            raise ContractViolation("step_size must be > 0 and steps >= 0")
        if not np.all(np.isfinite(self.positions)):
            raise ContractViolation("positions must be finite")

    @classmethod
    def random(cls, n_per_class: int = 20, n_classes: int = 2, separation: float = 2.0,
               spread: float = 0.5, seed: int = 0, **kwargs) -> "ParticleSystem":
        """Classes start as Gaussian blobs on a circle of radius ``separation``."""
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(n_classes), n_per_class)
        angles = 2 * np.pi * labels / n_classes
        centres = separation * np.column_stack([np.cos(angles), np.sin(angles)])
        pos = centres + spread * rng.standard_normal((labels.shape[0], 2))
        return cls(positions=pos, labels=labels, **kwargs)


def regularizer_energy(z, labels, regularizer: str, params: IclParams):
    """Value and gradient of one regulariser on a configuration."""
    if regularizer == "icl":
        spec = ExtraneousSpec.discrete(max(2, int(labels.max()) + 1))
        rep = icl_empirical(z, labels, spec, params, with_grad=True)
        return rep.value, rep.grad_z
    if regularizer in ("mmd_minus_s", "mmd_f"):
        spec = ExtraneousSpec.discrete(2)
        out = mmd_baseline_losses(z, labels, spec, params, with_grad=True)
        return out[regularizer], out["grad_" + regularizer]
    if regularizer == "kl_proxy":
        return kl_proxy(z, with_grad=True)
    raise ContractViolation(f"regularizer must be one of {PARTICLE_REGULARIZERS}")


def total_energy(system: ParticleSystem, z, regularizer, params):
    reg, g_reg = regularizer_energy(z, system.labels, regularizer, params)
    diff = z - system.anchors
    value = system.lam * reg + system.mu * float(np.sum(diff * diff))
    return value, system.lam * g_reg + 2.0 * system.mu * diff


def collapse_metrics(positions, labels) -> dict:
    """Mean distance over unordered distinct pairs within and across classes."""
    z = np.asarray(positions, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    d = pairwise_distances(z)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < 2]
    if small.size:
        warnings.warn(f"classes {small.tolist()} have fewer than 2 members; excluded from intra")
    intra_mask = same & upper
    inter_mask = ~same & upper
    mean_intra = float(d[intra_mask].mean()) if intra_mask.any() else 0.0
    mean_inter = float(d[inter_mask].mean()) if inter_mask.any() else 0.0
    ratio = mean_intra / mean_inter if mean_inter > 0 else float("nan")
    return {"mean_intra": mean_intra, "mean_inter": mean_inter, "ratio": ratio}


def mean_pairwise_distance(positions) -> float:
    d = pairwise_distances(np.asarray(positions, dtype=np.float64))
    n = d.shape[0]
    return float(d[np.triu_indices(n, k=1)].mean())


@dataclass
class SimulationResult:
    trajectory: list = field(default_factory=list)  # positions per recorded step
    metrics: list = field(default_factory=list)  # dicts: step, mean_intra, mean_inter, energy
    final_positions: np.ndarray = None
    labels: np.ndarray = None
    halvings: int = 0


def simulate(system: ParticleSystem, regularizer: str = "icl", params: IclParams = IclParams(),
             record_every: int = 1, min_step: float = 1e-12) -> SimulationResult:
    """Gradient descent with step halving whenever a step would raise the energy."""
    if regularizer not in PARTICLE_REGULARIZERS:
        raise ContractViolation(f"regularizer must be one of {PARTICLE_REGULARIZERS}")
    z = system.positions.copy()
    energy, grad = total_energy(system, z, regularizer, params)
    step = system.step_size
    out = SimulationResult(labels=system.labels.copy())

    def record(k):
        m = collapse_metrics(z, system.labels)
        out.metrics.append({"step": k, "mean_intra": m["mean_intra"],
                            "mean_inter": m["mean_inter"], "energy": energy})
        out.trajectory.append(z.copy())

    record(0)
    for k in range(1, system.steps + 1):
        while True:
            with np.errstate(over="ignore", invalid="ignore"):
                trial = z - step * grad
            if not np.all(np.isfinite(trial)):
                raise DivergenceError(k)
            new_energy, new_grad = total_energy(system, trial, regularizer, params)
            if not np.isfinite(new_energy):
                raise DivergenceError(k)
            if new_energy <= energy or step < min_step:
                break
            step *= 0.5
            out.halvings += 1
        if new_energy > energy:
            # step underflow: the configuration is stationary to machine precision
            new_energy, new_grad, trial = energy, grad, z
        z, energy, grad = trial, new_energy, new_grad
        if k % record_every == 0 or k == system.steps:
            record(k)
    out.final_positions = z
    return out


def write_trajectory_csv(path, result: SimulationResult, record_every: int = 1) -> None:
    steps = [m["step"] for m in result.metrics]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "particle_id", "label", "x0", "x1"])
        for k, pos in zip(steps, result.trajectory):
            for i, (p, lab) in enumerate(zip(pos, result.labels)):
                writer.writerow([k, i, int(lab), repr(float(p[0])), repr(float(p[1]))])


def write_metrics_csv(path, result: SimulationResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mean_intra", "mean_inter", "energy"])
        for m in result.metrics:
            writer.writerow([m["step"], repr(m["mean_intra"]), repr(m["mean_inter"]), repr(m["energy"])])
