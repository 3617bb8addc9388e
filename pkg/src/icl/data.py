"""Synthetic datasets and loaders for UCI Adult, German Credit and MNIST (IDX).

Every loader returns a :class:`DatasetSplit` with a seeded 70/10/20
train/validation/test partition. Feature scaling and the min-max range of a
continuous extraneous variable are fit on the training rows only.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.preprocessing import OneHotEncoder, StandardScaler

from .core import ExtraneousSpec, LabeledBatch, minmax_normalize

SPLIT_RATIOS = (0.7, 0.1, 0.2)
DATA_DIR_ENV = "ICL_DATA_DIR"

DATA_SOURCES = {
    "adult": {
        "url": "https://archive.ics.uci.edu/ml/machine-learning-databases/adult/",
        "files": {"adult.data": 32561, "adult.test": 16281},
    },
    "german": {
        "url": "https://archive.ics.uci.edu/ml/machine-learning-databases/statlog/german/",
        "files": {"german.data": 1000},
    },
    "mnist": {
        "url": "http://yann.lecun.com/exdb/mnist/",
        "files": {
            "train-images-idx3-ubyte.gz": 60000,
            "train-labels-idx1-ubyte.gz": 60000,
            "t10k-images-idx3-ubyte.gz": 10000,
            "t10k-labels-idx1-ubyte.gz": 10000,
        },
    },
}

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]
ADULT_CATEGORICAL = [
    "workclass", "education", "marital-status", "occupation", "relationship",
    "race", "sex", "native-country",
]
ADULT_CONTINUOUS = ["age", "education-num", "capital-gain", "capital-loss", "hours-per-week"]

# column positions in german.data
GERMAN_CONTINUOUS = [1, 4, 7, 10, 12, 15, 17]
GERMAN_AGE = 12


class DatasetLoadError(FileNotFoundError):
    pass


@dataclass
class DatasetSplit:
    train: LabeledBatch
    validation: LabeledBatch
    test: LabeledBatch
    spec: ExtraneousSpec
    feature_names: list = field(default_factory=list)
    normalization: dict = field(default_factory=dict)
    name: str = ""
    skipped_rows: int = 0

    @property
    def n_features(self) -> int:
        return self.train.x.shape[1]


def data_root(root=None) -> Path:
    return Path(root or os.environ.get(DATA_DIR_ENV, "data"))


def split_indices(n: int, seed: int, ratios=SPLIT_RATIOS):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def _standardize(x, idx):
    scaler = StandardScaler().fit(x[idx[0]])
    # constant columns get unit scale from sklearn already
    return [scaler.transform(x[i]) for i in idx], scaler


def _assemble(name, x_parts, c, y, idx, spec, feature_names, normalization, skipped=0):
    batches = [
        LabeledBatch(x=xp, c=c[i], y=None if y is None else y[i])
        for xp, i in zip(x_parts, idx)
    ]
    return DatasetSplit(*batches, spec=spec, feature_names=list(feature_names),
                        normalization=normalization, name=name, skipped_rows=skipped)


def gen_gaussian_attribute(
    n: int = 2000,
    seed: int = 0,
    class_gap: float = 3.0,
    attr_leak: float = 0.0,
    attr_gap: float = 6.0,
    attr_dims: int = 3,
    n_noise: int = 2,
) -> DatasetSplit:
    """Binary target on feature 0, binary attribute on the next ``attr_dims`` features, then noise.

    ``attr_leak`` is the probability that ``c`` is copied from ``y`` instead of
    drawn independently, so 0 gives independent target and attribute.
    Spreading ``c`` over several features makes an unregularised encoder
    carry it reliably, whatever its initialisation.
    """
    if n < 40:
        raise ValueError("n must be at least 40")
    if attr_dims < 1:
        raise ValueError("attr_dims must be >= 1")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    copy = rng.random(n) < attr_leak
    c = np.where(copy, y, rng.integers(0, 2, size=n))
    x = np.column_stack([
        (y - 0.5) * class_gap + rng.standard_normal(n),
        (c[:, None] - 0.5) * attr_gap + rng.standard_normal((n, attr_dims)),
        rng.standard_normal((n, n_noise)),
    ])
    idx = split_indices(n, seed)
    parts, scaler = _standardize(x, idx)
    names = (["target_axis"] + [f"attribute_axis_{i}" for i in range(attr_dims)]
             + [f"noise_{i}" for i in range(n_noise)])
    norm = {"mean": scaler.mean_.tolist(), "scale": scaler.scale_.tolist()}
    return _assemble("synthetic-discrete", parts, c.astype(float), y, idx,
                     ExtraneousSpec.discrete(2), names, norm)


def gen_continuous_attribute(
    n: int = 2000, seed: int = 0, class_gap: float = 3.0, delta: float = 0.1, n_noise: int = 2
) -> DatasetSplit:
    """Binary target on feature 0; ``c ~ U[0, 1]`` added into features 1 and 2."""
    if n < 40:
        raise ValueError("n must be at least 40")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    c_raw = rng.random(n)
    x = np.column_stack([
        (y - 0.5) * class_gap + rng.standard_normal(n),
        2.0 * c_raw + 0.2 * rng.standard_normal(n),
        -1.0 * c_raw + 0.5 * rng.standard_normal(n),
        rng.standard_normal((n, n_noise)),
    ])
    idx = split_indices(n, seed)
    parts, scaler = _standardize(x, idx)
    c, lo, hi = minmax_normalize(c_raw, c_raw[idx[0]].min(), c_raw[idx[0]].max())
    names = ["target_axis", "attribute_a", "attribute_b"] + [f"noise_{i}" for i in range(n_noise)]
    norm = {"mean": scaler.mean_.tolist(), "scale": scaler.scale_.tolist(),
            "c_min": lo, "c_max": hi}
    return _assemble("synthetic-continuous", parts, c, y, idx,
                     ExtraneousSpec.continuous(delta), names, norm)


def _read_delimited(path: Path, n_cols: int, delimiter=",", skip_first=False):
    rows, skipped = [], 0
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if skip_first:
        lines = lines[1:]
    for line in lines:
        if not line.strip():
            continue
        if delimiter is None:
            fields = line.split()
        else:
            fields = [f.strip() for f in next(csv.reader([line], delimiter=delimiter))]
        if len(fields) != n_cols:
            skipped += 1
            continue
        rows.append(fields)
    return rows, skipped


def _require(path: Path, dataset: str):
    if not path.exists():
        src = DATA_SOURCES[dataset]
        files = ", ".join(src["files"])
        raise DatasetLoadError(
            f"{path} not found; download {files} from {src['url']} into {path.parent} "
            f"(or point {DATA_DIR_ENV} at the directory holding a '{dataset}' folder)"
        )


def build_tabular_split(categorical, continuous, seed, feature_names_prefix=None,
                        c_continuous_raw=None):
    """One-hot + standardise with train-only statistics and split 70/10/20.

    ``categorical`` is an (n, k) object array, ``continuous`` an (n, j) float
    array. If ``c_continuous_raw`` is given, its training-row min/max are
    stored in the returned statistics under ``c_min``/``c_max``.
    """
    n = len(continuous)
    idx = split_indices(n, seed)
    enc = OneHotEncoder(handle_unknown="ignore", sparse_output=False)
    enc.fit(categorical[idx[0]])
    scaler = StandardScaler().fit(continuous[idx[0]])
    parts = [
        np.hstack([scaler.transform(continuous[i]), enc.transform(categorical[i])])
        for i in idx
    ]
    cat_names = list(enc.get_feature_names_out(feature_names_prefix))
    norm = {"mean": scaler.mean_.tolist(), "scale": scaler.scale_.tolist()}
    if c_continuous_raw is not None:
        c_raw = np.asarray(c_continuous_raw, dtype=np.float64)
        norm.update(c_min=float(c_raw[idx[0]].min()), c_max=float(c_raw[idx[0]].max()))
    return parts, idx, cat_names, norm


def load_adult(path=None, attribute: str = "sex", seed: int = 0, delta: float = 0.1) -> DatasetSplit:
    """UCI Adult: predict income > 50K.

    ``attribute="sex"`` gives binary ``c`` (1 = Male) and drops sex from the
    features; ``attribute="age"`` gives continuous ``c`` (age scaled to [0, 1])
    and drops age from the features. ``fnlwgt`` (a census sampling weight) is
    dropped. Missing values ``?`` are kept as their own category.
    """
    root = Path(path) if path is not None else data_root() / "adult"
    rows, skipped = [], 0
    for fname, skip_first in (("adult.data", False), ("adult.test", True)):
        _require(root / fname, "adult")
        r, s = _read_delimited(root / fname, len(ADULT_COLUMNS), ",", skip_first)
        rows += r
        skipped += s
    if skipped:
        warnings.warn(f"adult: skipped {skipped} malformed rows")
    table = np.array(rows, dtype=object)
    col = {name: i for i, name in enumerate(ADULT_COLUMNS)}
    y = np.array([v.rstrip(".") == ">50K" for v in table[:, col["income"]]], dtype=int)
    if attribute == "sex":
        cat_cols = [c for c in ADULT_CATEGORICAL if c != "sex"]
        cont_cols = ADULT_CONTINUOUS
        c = (table[:, col["sex"]] == "Male").astype(float)
        spec, c_raw = ExtraneousSpec.discrete(2), None
        name = "adult"
    elif attribute == "age":
        cat_cols = ADULT_CATEGORICAL
        cont_cols = [c for c in ADULT_CONTINUOUS if c != "age"]
        c_raw = table[:, col["age"]].astype(float)
        c = c_raw
        spec = ExtraneousSpec.continuous(delta)
        name = "adult-age"
    else:
        raise ValueError(f"unknown Adult attribute {attribute!r}")
    categorical = table[:, [col[k] for k in cat_cols]].astype(str)
    continuous = table[:, [col[k] for k in cont_cols]].astype(float)
    parts, idx, cat_names, norm = build_tabular_split(categorical, continuous, seed, cat_cols, c_raw)
    if c_raw is not None:
        c, _, _ = minmax_normalize(c_raw, norm["c_min"], norm["c_max"])
    return _assemble(name, parts, c, y, idx, spec, list(cont_cols) + cat_names, norm, skipped)


def load_german(path=None, seed: int = 0, age_threshold: float = 25.0) -> DatasetSplit:
    """German Credit: predict good credit (label 1); ``c`` = 1 when age > threshold."""
    root = Path(path) if path is not None else data_root() / "german"
    fname = root / "german.data"
    _require(fname, "german")
    rows, skipped = _read_delimited(fname, 21, None)
    if skipped:
        warnings.warn(f"german: skipped {skipped} malformed rows")
    table = np.array(rows, dtype=object)
    y = (table[:, 20].astype(int) == 1).astype(int)
    c = (table[:, GERMAN_AGE].astype(float) > age_threshold).astype(float)
    cont = [i for i in GERMAN_CONTINUOUS if i != GERMAN_AGE]
    cat = [i for i in range(20) if i not in GERMAN_CONTINUOUS]
    categorical = table[:, cat].astype(str)
    continuous = table[:, cont].astype(float)
    prefix = [f"attr{i + 1}" for i in cat]
    parts, idx, cat_names, norm = build_tabular_split(categorical, continuous, seed, prefix)
    names = [f"attr{i + 1}" for i in cont] + cat_names
    return _assemble("german", parts, c, y, idx, ExtraneousSpec.discrete(2), names, norm, skipped)


IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    pass


def _open_maybe_gz(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX label (0x801) or image (0x803) file, gzipped or raw."""
    with _open_maybe_gz(Path(path)) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise IdxFormatError(f"{path}: truncated header")
        (magic,) = struct.unpack(">I", header)
        if magic == IDX_LABEL_MAGIC:
            (count,) = struct.unpack(">I", fh.read(4))
            shape = (count,)
        elif magic == IDX_IMAGE_MAGIC:
            count, rows, cols = struct.unpack(">III", fh.read(12))
            shape = (count, rows, cols)
        else:
            raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x}")
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(shape)):
        raise IdxFormatError(f"{path}: expected {int(np.prod(shape))} bytes, found {data.size}")
    return data.reshape(shape)


def _find(root: Path, stem: str) -> Path:
    for candidate in (root / f"{stem}.gz", root / stem):
        if candidate.exists():
            return candidate
    raise DatasetLoadError(
        f"{stem}(.gz) not found in {root}; download from {DATA_SOURCES['mnist']['url']}"
    )


def load_mnist_idx(path=None, seed: int = 0, include_test_files: bool = True) -> DatasetSplit:
    """MNIST images scaled to [0, 1] with the digit label as discrete ``c``."""
    root = Path(path) if path is not None else data_root() / "mnist"
    images = [read_idx(_find(root, "train-images-idx3-ubyte"))]
    labels = [read_idx(_find(root, "train-labels-idx1-ubyte"))]
    if include_test_files:
        try:
            images.append(read_idx(_find(root, "t10k-images-idx3-ubyte")))
            labels.append(read_idx(_find(root, "t10k-labels-idx1-ubyte")))
        except DatasetLoadError:
            pass
    x = np.concatenate(images).reshape(sum(len(a) for a in images), -1) / 255.0
    c = np.concatenate(labels).astype(float)
    if len(c) != len(x):
        raise IdxFormatError("image and label counts differ")
    idx = split_indices(len(x), seed)
    batches = [LabeledBatch(x=x[i], c=c[i]) for i in idx]
    side = images[0].shape[1:]
    names = [f"px_{r}_{q}" for r in range(side[0]) for q in range(side[1])]
    return DatasetSplit(*batches, spec=ExtraneousSpec.discrete(10), feature_names=names,
                        normalization={"scale": 255.0}, name="mnist")


DATASETS = ("synthetic-discrete", "synthetic-continuous", "adult", "adult-age", "german", "mnist")


def load_dataset(name: str, seed: int = 0, root=None, delta: float = 0.1, n: int = 2000) -> DatasetSplit:
    base = data_root(root)
    if name == "synthetic-discrete":
        return gen_gaussian_attribute(n=n, seed=seed)
    if name == "synthetic-continuous":
        return gen_continuous_attribute(n=n, seed=seed, delta=delta)
    if name == "adult":
        return load_adult(base / "adult", "sex", seed)
    if name == "adult-age":
        return load_adult(base / "adult", "age", seed, delta)
    if name == "german":
        return load_german(base / "german", seed)
    if name == "mnist":
        return load_mnist_idx(base / "mnist", seed)
    raise ValueError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")


def _count_rows(path: Path, dataset: str) -> int:
    if dataset == "mnist":
        return len(read_idx(path))
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if path.name == "adult.test" and lines and lines[0].startswith("|"):
        lines = lines[1:]
    return len(lines)


def fetch_hints(root=None) -> list:
    """Canonical files per dataset, whether present, and their row counts."""
    base = data_root(root)
    report = []
    for dataset, src in DATA_SOURCES.items():
        for fname, expected in src["files"].items():
            path = base / dataset / fname
            found = _count_rows(path, dataset) if path.exists() else None
            report.append({
                "dataset": dataset, "file": fname, "url": src["url"], "path": str(path),
                "expected_rows": expected, "found_rows": found,
                "ok": found == expected,
            })
    return report
