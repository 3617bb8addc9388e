"""Config files, training runs, sweeps, simulations and the self-verification report.

Configs are flat JSON objects with a ``schema_version`` key. Unknown keys
are rejected so that a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from pathlib import Path

import numpy as np

from .core import ExtraneousSpec, IclParams
from .data import load_dataset
from .energy import g_kernel
from .losses import decompose_check, icl_empirical, kl_compression
from .nn import DenseNet, save_checkpoint
from .particles import (
    ParticleSystem,
    simulate,
    write_metrics_csv,
    write_trajectory_csv,
)
from .training import (
    InvariantClassifier,
    InvariantVAE,
    lemma2_check,
    measure_invariance,
    powers_of_ten,
    select_hyperparameters,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUMMARY_COLUMNS = ("dataset", "objective", "regularizer", "lambda", "seed",
                   "task_metric", "adversary_metric", "wall_seconds")
CONTINUOUS_DATASETS = ("synthetic-continuous", "adult-age")


class ConfigError(ValueError):
    pass


TRAIN_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "dataset": "synthetic-discrete",
    "objective": "discriminative",
    "regularizer": "icl",
    "lam": 1.0,
    "beta_vae": 1.0,
    "alpha": 0.0,
    "beta": 1.0,
    "delta": 0.1,
    "balance_classes": True,
    "hidden": [64, 64],
    "latent_dim": 32,
    "predictor_hidden": [32],
    "epochs": 20,
    "batch_size": 256,
    "lr": 1e-3,
    "warmup": True,
    "seeds": [0],
    "n_samples": 2000,
    "adversary_epochs": 200,
    "adversary_patience": 20,
    "lambda_grid": "1e-2..1e2",
}

# Per-dataset overrides applied before the user's config.
DATASET_PRESETS = {
    "synthetic-discrete": {"hidden": [32, 32], "latent_dim": 3, "epochs": 60,
                           "batch_size": 128, "lam": 10.0},
    "synthetic-continuous": {"hidden": [32, 32], "latent_dim": 3, "epochs": 60,
                             "batch_size": 128, "lam": 10.0},
    "adult": {"epochs": 10, "lam": 10.0},
    "adult-age": {"epochs": 10, "lam": 10.0},
    "german": {"epochs": 30, "batch_size": 64, "lam": 1.0},
}

SIMULATE_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "regularizer": "icl",
    "n_per_class": 20,
    "n_classes": 2,
    "separation": 2.0,
    "spread": 0.5,
    "lam": 1.0,
    "mu": 0.1,
    "step_size": 0.5,
    "steps": 300,
    "alpha": 0.0,
    "beta": 1.0,
    "seed": 0,
    "record_every": 1,
}


def parse_config(text: str, defaults: dict, source: str = "<config>") -> dict:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{source}: field 'schema_version' must be {SCHEMA_VERSION}")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {', '.join(unknown)}")
    for key, value in raw.items():
        expected = defaults[key]
        if isinstance(expected, bool):
            ok = isinstance(value, bool)
        elif isinstance(expected, (int, float)):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(expected, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, type(expected)) or (key == "lambda_grid" and isinstance(value, list))
        if not ok:
            raise ConfigError(f"{source}: field '{key}' has the wrong type")
    return raw


def load_config(path, defaults: dict) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), defaults, str(path))


def resolve_train_config(user: dict | None = None, **overrides) -> dict:
    """Defaults, then dataset preset, then the user's config, then explicit overrides."""
    user = dict(user or {})
    dataset = overrides.get("dataset") or user.get("dataset") or TRAIN_DEFAULTS["dataset"]
    cfg = dict(TRAIN_DEFAULTS)
    cfg.update(DATASET_PRESETS.get(dataset, {}))
    cfg.update(user)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    cfg["dataset"] = dataset
    return cfg


def _build_estimator(cfg: dict, lam: float, regularizer: str, seed: int):
    c_kind = "continuous" if cfg["dataset"] in CONTINUOUS_DATASETS else "discrete"
    common = dict(
        regularizer=regularizer, reg_weight=lam, beta_vae=cfg["beta_vae"],
        icl_alpha=cfg["alpha"], icl_beta=cfg["beta"], icl_delta=cfg["delta"],
        c_kind=c_kind, balance_classes=cfg["balance_classes"], hidden=tuple(cfg["hidden"]),
        latent_dim=cfg["latent_dim"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        lr=cfg["lr"], warmup=cfg["warmup"], random_state=seed,
    )
    if cfg["objective"] == "unsupervised_vae":
        return InvariantVAE(**common)
    return InvariantClassifier(objective=cfg["objective"],
                               predictor_hidden=tuple(cfg["predictor_hidden"]), **common)


def _adversary_params(cfg):
    return {"epochs": cfg["adversary_epochs"], "patience": cfg["adversary_patience"]}


def train_one(cfg: dict, seed: int, data=None, lam=None, regularizer=None, eval_split="test"):
    """Fit one estimator and measure its invariance; returns ``(estimator, row, report)``."""
    lam = cfg["lam"] if lam is None else lam
    regularizer = cfg["regularizer"] if regularizer is None else regularizer
    if data is None:
        data = load_dataset(cfg["dataset"], seed=seed, delta=cfg["delta"], n=cfg["n_samples"])
    start = time.perf_counter()
    est = _build_estimator(cfg, lam, regularizer, seed)
    if isinstance(est, InvariantVAE):
        est.fit(data.train.x, c=data.train.c)
    else:
        est.fit(data.train.x, data.train.y, c=data.train.c)
    report = measure_invariance(est, data, _adversary_params(cfg), random_state=seed,
                                eval_split=eval_split)
    row = {
        "dataset": cfg["dataset"], "objective": cfg["objective"], "regularizer": regularizer,
        "lambda": lam, "seed": seed, "task_metric": report.task_metric,
        "adversary_metric": report.adversary_metric,
        "wall_seconds": round(time.perf_counter() - start, 3),
    }
    return est, row, report


def write_summary_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


def run_training(cfg: dict, out_dir) -> dict:
    """Train every seed in ``cfg['seeds']``; write checkpoints, histories and a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg["seeds"]:
        est, row, report = train_one(cfg, seed)
        modules = {"encoder": est.encoder_}
        for name in ("predictor_", "decoder_"):
            if getattr(est, name, None) is not None:
                modules[name.rstrip("_")] = getattr(est, name)
        save_checkpoint(out / f"checkpoint_seed{seed}.npz", modules)
        (out / f"history_seed{seed}.json").write_text(json.dumps(est.history_, indent=2) + "\n")
        rows.append(row)
    write_summary_csv(out / "summary.csv", rows)
    summary = {
        "config": cfg,
        "task_metric": _mean_std([r["task_metric"] for r in rows]),
        "adversary_metric": _mean_std([r["adversary_metric"] for r in rows]),
        "task_metric_name": report.task_metric_name,
        "adversary_metric_name": report.adversary_metric_name,
        "per_seed": [{k: r[k] for k in ("seed", "task_metric", "adversary_metric")} for r in rows],
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_sweep(cfg: dict, out_dir) -> dict:
    """Grid-search the regulariser weight on the validation split (first seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg["lambda_grid"]
    lams = powers_of_ten(grid) if isinstance(grid, str) else [float(v) for v in grid]
    if not lams:
        raise ConfigError("lambda_grid is empty")
    seed = cfg["seeds"][0]
    data = load_dataset(cfg["dataset"], seed=seed, delta=cfg["delta"], n=cfg["n_samples"])
    _, ref_row, _ = train_one(cfg, seed, data, lam=0.0, regularizer="none", eval_split="validation")
    candidates, rows = [], [ref_row]
    for lam in lams:
        _, row, _ = train_one(cfg, seed, data, lam=lam, eval_split="validation")
        rows.append(row)
        candidates.append({"reg_weight": lam, "task_metric": row["task_metric"],
                           "adversary_metric": row["adversary_metric"]})
    supervised = cfg["objective"] != "unsupervised_vae"
    c_kind = "continuous" if cfg["dataset"] in CONTINUOUS_DATASETS else "discrete"
    chosen, fallback = select_hyperparameters(candidates, ref_row["task_metric"], supervised, c_kind)
    write_summary_csv(out / "grid.csv", rows)
    selection = {
        "reference": {k: ref_row[k] for k in ("task_metric", "adversary_metric")},
        "candidates": candidates,
        "chosen_lambda": None if chosen is None else chosen["reg_weight"],
        "fallback_unregularized": fallback,
        "config": cfg,
    }
    (out / "selection.json").write_text(json.dumps(selection, indent=2, sort_keys=True) + "\n")
    return selection


def run_simulation(cfg: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = ParticleSystem.random(
        n_per_class=cfg["n_per_class"], n_classes=cfg["n_classes"], separation=cfg["separation"],
        spread=cfg["spread"], seed=cfg["seed"], lam=cfg["lam"], mu=cfg["mu"],
        step_size=cfg["step_size"], steps=cfg["steps"],
    )
    params = IclParams(cfg["alpha"], cfg["beta"])
    result = simulate(system, cfg["regularizer"], params, record_every=cfg["record_every"])
    write_trajectory_csv(out / "trajectory.csv", result)
    write_metrics_csv(out / "metrics.csv", result)
    return {"initial": result.metrics[0], "final": result.metrics[-1], "halvings": result.halvings}


# ---------------------------------------------------------------- verification

VERIFY_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-4


def relative_error(a, b, floor=1e-12):
    """``||a - b|| / max(||a||, ||b||)`` over a whole gradient array."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _fd_gradient(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = fn(x)
        x[idx] = orig - h
        down = fn(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def gradient_audits(seed: int, n_seeds: int = 20) -> list:
    """Finite-difference checks of the ICL, KL and network gradients."""
    results = []
    spec = ExtraneousSpec.discrete(2)
    for k in range(n_seeds):
        rng = np.random.default_rng([seed, k])
        z = rng.standard_normal((10, 3))
        c = rng.integers(0, 2, 10)
        params = IclParams(float(rng.uniform(-1, 1)), float(rng.uniform(0.5, 2)))
        analytic = icl_empirical(z, c, spec, params, with_grad=True).grad_z
        fd = _fd_gradient(lambda v: icl_empirical(v, c, spec, params).value, z.copy())
        results.append(("icl", k, relative_error(analytic, fd)))

        mu, lv = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        _, g_mu, g_lv = kl_compression(mu, lv, with_grad=True)
        fd_mu = _fd_gradient(lambda v: kl_compression(v, lv), mu.copy())
        fd_lv = _fd_gradient(lambda v: kl_compression(mu, v), lv.copy())
        results.append(("kl", k, max(relative_error(g_mu, fd_mu), relative_error(g_lv, fd_lv))))

        net = DenseNet((4, 5, 3), activation="tanh", rng=rng)
        x = rng.standard_normal((7, 4))
        upstream = rng.standard_normal((7, 3))
        grads, _ = net.backward(net.forward(x), upstream)
        worst = 0.0
        for p, g in zip(net.parameters(), grads):
            fd = _fd_gradient(lambda v, p=p: (p.__setitem__(Ellipsis, v),
                                              float(np.sum(net.forward(x).output * upstream)))[1],
                              p.copy())
            worst = max(worst, relative_error(g, fd))
        results.append(("dense", k, worst))
    return results


def lemma2_configurations(seed: int, n: int = 2000) -> list:
    """Synthetic continuous-``c`` configurations for the adversary MSE bound."""
    configs = []
    i = 0
    for gain in (0.02, 0.05, 0.1):
        for delta in (0.3, 0.5):
            for lipschitz in (0.5, 1.0, 2.0):
                for alpha in (-6.0, -4.0):
                    rng = np.random.default_rng([seed, i])
                    c = rng.random(n)
                    z = np.column_stack([gain * c, 0.01 * rng.standard_normal(n)])
                    configs.append({"z": z, "c": c, "params": IclParams(alpha, 1.0, delta),
                                    "lipschitz": lipschitz, "id": i})
                    i += 1
    return configs


def run_verify(seed: int = 0, n_batches: int = 100, n: int = 64, dim: int = 8,
               g_fn=None, lemma2: bool = True, gradient_seeds: int = 20):
    """Run identity, gradient and bound checks; return ``(ok, report_text)``.

    ``g_fn`` replaces the discrepancy kernel in the decomposition (a negative
    control: a wrong kernel must make the check fail).
    """
    buf = io.StringIO()
    failures = []

    def check(name, residual, tol):
        status = "ok" if residual <= tol else "FAIL"
        buf.write(f"{name:<40s} {residual:.3e}  tol {tol:.0e}  {status}\n")
        if status == "FAIL":
            failures.append(name)

    worst_binary = 0.0
    worst_multi = 0.0
    for b in range(n_batches):
        rng = np.random.default_rng([seed, 1, b])
        alpha = float(rng.choice([0.0, 1.0]))
        beta = float(rng.choice([1.0, 2.0]))
        params = IclParams(alpha, beta)
        z = rng.standard_normal((n, dim))
        c = rng.permutation(np.arange(n) % 2)
        kw = {}
        if g_fn is not None:
            kw["g_fn"] = lambda d, p=params: g_fn(p, d)
        res = decompose_check(z, c, params, forms="binary", **kw)
        worst_binary = max(worst_binary, abs(res["residual"]) / abs(res["icl"]))
        c4 = rng.permutation(np.arange(n) % 4)
        if g_fn is not None:
            kw["g_fn"] = lambda d, p=params: 0.5 * g_fn(p, d, 4)
        res4 = decompose_check(z, c4, params, forms="consistent", **kw)
        worst_multi = max(worst_multi, abs(res4["residual"]) / abs(res4["icl"]))
    check(f"decomposition binary ({n_batches} batches)", worst_binary, VERIFY_TOLERANCE)
    check(f"decomposition m=4 ({n_batches} batches)", worst_multi, VERIFY_TOLERANCE)

    by_kind = {}
    for kind, _, err in gradient_audits(seed, gradient_seeds):
        by_kind[kind] = max(by_kind.get(kind, 0.0), err)
    for kind, err in sorted(by_kind.items()):
        check(f"gradient {kind} ({gradient_seeds} seeds)", err, GRADIENT_TOLERANCE)

    if lemma2:
        held, active = 0, 0
        for cfg in lemma2_configurations(seed):
            res = lemma2_check(cfg["z"], cfg["c"], cfg["params"], cfg["lipschitz"],
                               random_state=seed, adversary_epochs=20)
            if res["vacuous"]:
                continue
            active += 1
            held += bool(res["holds"])
            if not res["holds"]:
                buf.write(f"  lemma2 violation config {cfg['id']}: mse {res['adversary_mse']:.6g}"
                          f" < bound {res['bound']:.6g}\n")
        buf.write(f"{'lemma2 non-vacuous configurations':<40s} {active}\n")
        check("lemma2 violations", float(active - held), 0.0)

    ok = not failures
    buf.write("PASS\n" if ok else f"FAIL: {', '.join(failures)}\n")
    return ok, buf.getvalue()


def broken_kernel(params, d, n_classes=None):
    """Deliberately wrong discrepancy kernel (sign of the attraction flipped)."""
    from .energy import f_repulse, s_attract

    if n_classes is None:
        return (f_repulse(params, d) + s_attract(d)) / 8.0
    return g_kernel(params, d, n_classes) + 2.0 * s_attract(d) / n_classes**2
