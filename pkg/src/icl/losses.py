"""Empirical estimators of ICL, MMD, the interaction energy R_w and KL compression.

Every pairwise estimator is a V-statistic over all ordered pairs, self-pairs
included, so the decomposition ICL = MMD_g + R_w holds exactly for finite
balanced batches. Loss values use exact distances; gradients use the
smoothed distance ``sqrt(d**2 + eps**2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    DEFAULT_SMOOTHING,
    ContractViolation,
    DegenerateBatchError,
    ExtraneousSpec,
    IclParams,
    Metric,
    PreconditionError,
    check_representations,
    neighborhood_matrix,
    pairwise_distances,
    smooth,
)
from .energy import f_repulse, g_kernel, grad_f, grad_s, s_attract, w_potential

_GRAD_METRIC = Metric(DEFAULT_SMOOTHING)


@dataclass
class LossReport:
    value: float
    breakdown: Optional[dict] = None
    grad_z: Optional[np.ndarray] = field(default=None, repr=False)


def _fsum(a) -> float:
    return math.fsum(np.ravel(a))


def _pair_gradient(z, dloss_dd, d, epsilon):
    """Gradient of ``sum_ij L_ij(d_ij)`` given ``dloss_dd[i, j] = dL_ij/dd``.

    Each pair contributes ``dL/dd * (z_i - z_j) / d_eps`` to row i and the
    negative to row j. Self-pairs contribute nothing.
    """
    d_eps = smooth(d, epsilon) if epsilon > 0 else d
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(d_eps > 0, dloss_dd / d_eps, 0.0)
    np.fill_diagonal(k, 0.0)
    k = k + k.T
    return z * k.sum(axis=1)[:, None] - k @ z


def _weighted_pair_energy(z, coef_f, coef_s, params: IclParams, epsilon, with_grad):
    """``sum_ij coef_f[i,j] f(d_ij) + coef_s[i,j] s(d_ij)`` and its z-gradient."""
    d = pairwise_distances(z)
    value = _fsum(coef_f * f_repulse(params, d)) + _fsum(coef_s * s_attract(d))
    grad = None
    if with_grad:
        d_eps = smooth(d, epsilon) if epsilon > 0 else d
        dloss = coef_f * grad_f(params, d_eps) + coef_s * grad_s(d_eps)
        grad = _pair_gradient(z, dloss, d, epsilon)
    return value, grad


def icl_empirical(
    z,
    c,
    spec: ExtraneousSpec,
    params: IclParams = IclParams(),
    metric: Metric = _GRAD_METRIC,
    with_grad: bool = False,
    self_pairs: bool = True,
) -> LossReport:
    """Inverse contrastive loss of representations ``z`` against values ``c``.

    ``value = 1/n**2 * sum_ij [same_ij f(d_ij) + (1 - same_ij) s(d_ij)]``.
    With ``self_pairs=False`` the diagonal is dropped but the ``1/n**2``
    normalisation is kept, which changes the value by ``exp(alpha)/n`` and
    leaves the gradient untouched.
    """
    z = check_representations(z)
    c = spec.validate(c)
    n = z.shape[0]
    if c.shape[0] != n:
        raise ContractViolation("c length does not match z rows")
    same = neighborhood_matrix(spec, c)
    if not self_pairs:
        mask = ~np.eye(n, dtype=bool)
    else:
        mask = np.ones((n, n), dtype=bool)
    d = pairwise_distances(z)
    intra = same & mask
    inter = ~same & mask
    intra_sum = _fsum(f_repulse(params, d[intra]))
    inter_sum = _fsum(s_attract(d[inter]))
    value = (intra_sum + inter_sum) / (n * n)
    breakdown = {
        "intra_sum": intra_sum,
        "inter_sum": inter_sum,
        "pair_counts": {"intra": int(intra.sum()), "inter": int(inter.sum())},
    }
    grad = None
    if with_grad:
        d_eps = smooth(d, metric.epsilon) if metric.epsilon > 0 else d
        dloss = np.where(same, grad_f(params, d_eps), grad_s(d_eps)) / (n * n)
        grad = _pair_gradient(z, dloss, d, metric.epsilon)
    return LossReport(value=value, breakdown=breakdown, grad_z=grad)


def icl_balanced(
    z, c, spec: ExtraneousSpec, params: IclParams = IclParams(), with_grad: bool = False
) -> LossReport:
    """ICL with every class given equal prior weight (discrete ``c`` only).

    Pair ``(i, j)`` is weighted ``1 / (m**2 n_ci n_cj)`` where ``m`` counts the
    classes present, instead of ``1/n**2``. For two classes this is
    ``E00[f]/4 + E11[f]/4 + E01[s]/2``, the form that splits exactly into
    ``MMD_g + R_w``; on a batch with equal class counts it coincides with
    :func:`icl_empirical`.

    With unequal counts the plain estimator is not minimised by matching
    class-conditional distributions: the larger class spreads further out,
    and that radius gap is easy for an adversary to read.
    """
    if not spec.is_discrete:
        raise PreconditionError("class balancing needs a discrete extraneous variable")
    z = check_representations(z)
    c = spec.validate(c)
    if c.shape[0] != z.shape[0]:
        raise ContractViolation("c length does not match z rows")
    classes, codes, counts = np.unique(c, return_inverse=True, return_counts=True)
    m = len(classes)
    per_row = 1.0 / (m * counts[codes])
    coef = np.outer(per_row, per_row)
    same = codes[:, None] == codes[None, :]
    value, grad = _weighted_pair_energy(
        z, np.where(same, coef, 0.0), np.where(same, 0.0, coef), params, DEFAULT_SMOOTHING, with_grad
    )
    return LossReport(value=value, breakdown={"class_counts": counts.tolist()}, grad_z=grad)


def _check_sample(a, min_rows=1):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < min_rows:
        raise DegenerateBatchError(f"sample needs at least {min_rows} rows")
    if not np.all(np.isfinite(a)):
        raise ContractViolation("samples must be finite")
    return a


def laplacian_kernel(d):
    return np.exp(-np.asarray(d, dtype=np.float64))


def mmd_empirical(
    sample_p, sample_q, kernel: Callable = laplacian_kernel, variant: str = "biased"
) -> float:
    """MMD between two samples for a kernel given as a function of distance.

    ``biased`` is the V-statistic over all ordered pairs; ``unbiased`` drops
    self-pairs from the two within-sample terms.
    """
    if variant not in ("biased", "unbiased"):
        raise ContractViolation(f"unknown variant {variant!r}")
    min_rows = 2 if variant == "unbiased" else 1
    p = _check_sample(sample_p, min_rows)
    q = _check_sample(sample_q, min_rows)
    if p.shape[1] != q.shape[1]:
        raise ContractViolation("samples must share dimension")
    kpp = kernel(pairwise_distances(p))
    kqq = kernel(pairwise_distances(q))
    kpq = kernel(pairwise_distances(p, q))
    n, m = p.shape[0], q.shape[0]
    if variant == "biased":
        tpp = _fsum(kpp) / (n * n)
        tqq = _fsum(kqq) / (m * m)
    else:
        tpp = (_fsum(kpp) - _fsum(np.diag(kpp))) / (n * (n - 1))
        tqq = (_fsum(kqq) - _fsum(np.diag(kqq))) / (m * (m - 1))
    return tpp + tqq - 2.0 * _fsum(kpq) / (n * m)


def rw_empirical(sample_p, sample_q, params: IclParams = IclParams(), n_classes=None) -> float:
    """Interaction energy ``E_pp w + E_qq w + 2 E_pq w`` (V-statistic)."""
    p = _check_sample(sample_p)
    q = _check_sample(sample_q)

    def w(d):
        return w_potential(params, d, n_classes)

    n, m = p.shape[0], q.shape[0]
    return (
        _fsum(w(pairwise_distances(p))) / (n * n)
        + _fsum(w(pairwise_distances(q))) / (m * m)
        + 2.0 * _fsum(w(pairwise_distances(p, q))) / (n * m)
    )


def _class_codes(c):
    c = np.asarray(c, dtype=np.float64).ravel()
    if np.any(c != np.round(c)):
        raise PreconditionError("decomposition needs discrete class codes")
    return c.astype(int)


def decompose_check(
    z, c, params: IclParams = IclParams(), forms: str = "auto", g_fn=None, w_fn=None
) -> dict:
    """Evaluate both sides of ICL = sum over class pairs of (MMD_g + R_w).

    ``forms`` selects the kernel normalisation:

    * ``"auto"``: the /8 binary forms for two classes, ``"consistent"`` otherwise.
    * ``"appendix"``: ``(f/(m-1) -/+ s)/m**2`` summed over class pairs ``i<j``.
      These sum to exactly twice the ICL value.
    * ``"consistent"``: the appendix forms halved, ``(f/(m-1) -/+ s)/(2 m**2)``;
      for ``m=2`` they coincide with the binary forms.

    ``g_fn``/``w_fn`` override the kernels (used by negative controls).
    """
    z = check_representations(z)
    codes = _class_codes(c)
    classes, counts = np.unique(codes, return_counts=True)
    m = len(classes)
    if m < 2:
        raise PreconditionError("need at least two classes")
    if np.any(counts != counts[0]):
        raise PreconditionError(f"classes must be balanced, got counts {counts.tolist()}")
    if forms == "auto":
        forms = "binary" if m == 2 else "consistent"
    if forms == "binary":
        if m != 2:
            raise PreconditionError("binary forms need exactly two classes")
        scale, n_cls = 1.0, None
    elif forms == "appendix":
        scale, n_cls = 1.0, m
    elif forms == "consistent":
        scale, n_cls = 0.5, m
    else:
        raise ContractViolation(f"unknown forms {forms!r}")

    def g(d):
        return scale * g_kernel(params, d, n_cls)

    def w(d):
        return scale * w_potential(params, d, n_cls)

    g = g_fn or g
    w = w_fn or w

    icl = icl_empirical(z, codes, ExtraneousSpec.discrete(classes.max() + 1), params).value
    samples = [z[codes == k] for k in classes]
    mmd_g = 0.0
    rw = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            mmd_g += mmd_empirical(samples[i], samples[j], g, "biased")
            dij = pairwise_distances(samples[i], samples[j])
            rw += (
                _fsum(w(pairwise_distances(samples[i]))) / len(samples[i]) ** 2
                + _fsum(w(pairwise_distances(samples[j]))) / len(samples[j]) ** 2
                + 2.0 * _fsum(w(dij)) / (len(samples[i]) * len(samples[j]))
            )
    return {"icl": icl, "mmd_g": mmd_g, "rw": rw, "residual": icl - mmd_g - rw, "forms": forms}


def kl_compression(mu, logvar, with_grad: bool = False):
    """Mean KL(N(mu, diag exp(logvar)) || N(0, I)) over rows.

    Returns the value, or ``(value, grad_mu, grad_logvar)`` when ``with_grad``.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    if mu.shape != logvar.shape:
        raise ContractViolation("mu and logvar shapes differ")
    n = mu.shape[0]
    ev = np.exp(logvar)
    value = 0.5 * float(np.sum(ev + mu * mu - 1.0 - logvar)) / n
    if not with_grad:
        return value
    return value, mu / n, 0.5 * (ev - 1.0) / n


def _binary_split(c, spec: ExtraneousSpec):
    if not spec.is_discrete:
        raise PreconditionError("MMD baselines need a discrete extraneous variable")
    codes = _class_codes(spec.validate(c))
    present = np.unique(codes)
    if len(present) > 2 or spec.n_classes > 2:
        raise PreconditionError("MMD baselines are defined for binary c only")
    return codes == present[0], len(present)


def _mmd_coefficients(first):
    n0 = int(first.sum())
    n1 = first.size - n0
    coef = np.where(
        first[:, None] & first[None, :],
        1.0 / max(n0, 1) ** 2,
        np.where(~first[:, None] & ~first[None, :], 1.0 / max(n1, 1) ** 2, 0.0),
    )
    if n0 and n1:
        cross = first[:, None] ^ first[None, :]
        coef = np.where(cross, -1.0 / (n0 * n1), coef)
    return coef


def mmd_baseline_losses(
    z, c, spec: ExtraneousSpec, params: IclParams = IclParams(), with_grad: bool = False
) -> dict:
    """MMD with kernel ``-s`` and with kernel ``f`` between the two classes.

    A batch holding a single class gives zero for both (nothing to compare).
    """
    z = check_representations(z)
    first, n_present = _binary_split(c, spec)
    out = {}
    if n_present < 2:
        out = {"mmd_minus_s": 0.0, "mmd_f": 0.0}
        if with_grad:
            out["grad_mmd_minus_s"] = np.zeros_like(z)
            out["grad_mmd_f"] = np.zeros_like(z)
        return out
    coef = _mmd_coefficients(first)
    zero = np.zeros_like(coef)
    eps = DEFAULT_SMOOTHING
    v_s, g_s = _weighted_pair_energy(z, zero, -coef, params, eps, with_grad)
    v_f, g_f = _weighted_pair_energy(z, coef, zero, params, eps, with_grad)
    out["mmd_minus_s"] = v_s
    out["mmd_f"] = v_f
    if with_grad:
        out["grad_mmd_minus_s"] = g_s
        out["grad_mmd_f"] = g_f
    return out


def kl_proxy(z, with_grad: bool = False):
    """Mean squared pairwise distance over all ordered pairs.

    A geometric stand-in for the compression term: it pulls every pair
    together regardless of the extraneous value.
    """
    z = check_representations(z)
    n = z.shape[0]
    centred = z - z.mean(axis=0)
    value = 2.0 * float(np.sum(centred * centred)) / n
    if not with_grad:
        return value
    return value, 4.0 * centred / n
