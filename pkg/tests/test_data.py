import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LinearRegression, LogisticRegression

from icl.data import (
    DATA_DIR_ENV,
    DatasetLoadError,
    IdxFormatError,
    build_tabular_split,
    fetch_hints,
    gen_continuous_attribute,
    gen_gaussian_attribute,
    load_adult,
    load_dataset,
    load_german,
    load_mnist_idx,
    read_idx,
    split_indices,
)

DATA_ROOT = Path(os.environ.get(DATA_DIR_ENV, "/root/data"))
needs_adult = pytest.mark.skipif(not (DATA_ROOT / "adult" / "adult.data").exists(),
                                 reason="Adult files not available")
needs_german = pytest.mark.skipif(not (DATA_ROOT / "german" / "german.data").exists(),
                                  reason="German Credit file not available")


def holdout_accuracy(x_train, c_train, x_test, c_test):
    return LogisticRegression().fit(x_train, c_train).score(x_test, c_test)


class TestSplits:
    @given(st.integers(10, 5000), st.integers(0, 2**32 - 1))
    def test_partition(self, n, seed):
        parts = split_indices(n, seed)
        joined = np.concatenate(parts)
        assert sum(len(p) for p in parts) == n
        assert np.array_equal(np.sort(joined), np.arange(n))

    def test_ratios(self):
        tr, va, te = split_indices(1000, 0)
        assert (len(tr), len(va), len(te)) == (700, 100, 200)

    @settings(max_examples=20)
    @given(st.integers(0, 10_000))
    def test_normalisation_ignores_held_out_rows(self, seed):
        rng = np.random.default_rng(seed)
        n = 50
        cat = rng.choice(["a", "b", "c"], size=(n, 2)).astype(str)
        cont = rng.standard_normal((n, 3))
        _, idx, _, norm = build_tabular_split(cat, cont, seed)
        perturbed = cont.copy()
        held_out = np.concatenate(idx[1:])
        perturbed[held_out] = rng.standard_normal((len(held_out), 3)) * 100 + 7
        _, _, _, norm2 = build_tabular_split(cat, perturbed, seed)
        assert norm == norm2


class TestGaussianAttribute:
    def test_regeneration_is_byte_identical(self):
        a, b = gen_gaussian_attribute(seed=3), gen_gaussian_attribute(seed=3)
        assert a.train.x.tobytes() == b.train.x.tobytes()
        assert a.test.c.tobytes() == b.test.c.tobytes()

    def test_attribute_and_target_independent(self):
        data = gen_gaussian_attribute(n=20000, seed=1)
        y, c = data.train.y, data.train.c
        assert abs(np.corrcoef(y, c)[0, 1]) < 0.03

    def test_attribute_axes_reveal_c_target_axis_does_not(self):
        d = gen_gaussian_attribute(n=4000, seed=2)
        attr = [i for i, name in enumerate(d.feature_names) if name.startswith("attribute")]
        acc_attr = holdout_accuracy(d.train.x[:, attr], d.train.c, d.test.x[:, attr], d.test.c)
        acc_target = holdout_accuracy(d.train.x[:, :1], d.train.c, d.test.x[:, :1], d.test.c)
        assert acc_attr >= 0.9
        assert abs(acc_target - 0.5) <= 0.05

    def test_zero_gap_makes_target_unlearnable(self):
        d = gen_gaussian_attribute(n=4000, seed=4, class_gap=0.0)
        acc = LogisticRegression().fit(d.train.x, d.train.y).score(d.test.x, d.test.y)
        assert abs(acc - 0.5) <= 0.05

    def test_full_leak_copies_target(self):
        d = gen_gaussian_attribute(n=200, seed=0, attr_leak=1.0)
        np.testing.assert_array_equal(d.train.c, d.train.y)

    def test_small_n_rejected(self):
        with pytest.raises(ValueError):
            gen_gaussian_attribute(n=39)

    def test_feature_names(self):
        d = gen_gaussian_attribute(n=100, attr_dims=2, n_noise=1)
        assert d.feature_names == ["target_axis", "attribute_axis_0", "attribute_axis_1", "noise_0"]


class TestContinuousAttribute:
    def test_c_recoverable_linearly(self):
        d = gen_continuous_attribute(n=3000, seed=0)
        model = LinearRegression().fit(d.train.x, d.train.c)
        assert model.score(d.test.x, d.test.c) >= 0.8

    def test_train_c_spans_unit_interval(self):
        d = gen_continuous_attribute(seed=1)
        assert d.train.c.min() == 0.0 and d.train.c.max() == 1.0
        for part in (d.validation, d.test):
            assert np.all((part.c >= 0) & (part.c <= 1))

    def test_reproducible(self):
        assert (gen_continuous_attribute(seed=5).test.x.tobytes()
                == gen_continuous_attribute(seed=5).test.x.tobytes())


def write_idx(path, array, magic, compress=False):
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    payload = header + array.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(payload)


class TestIdx:
    def test_label_file(self, tmp_path):
        labels = np.arange(10, dtype=np.uint8)
        write_idx(tmp_path / "l", labels, 0x801)
        np.testing.assert_array_equal(read_idx(tmp_path / "l"), labels)

    def test_gzipped_image_file(self, tmp_path):
        images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        write_idx(tmp_path / "i.gz", images, 0x803, compress=True)
        np.testing.assert_array_equal(read_idx(tmp_path / "i.gz"), images)

    def test_bad_magic(self, tmp_path):
        write_idx(tmp_path / "x", np.zeros(3, dtype=np.uint8), 0x802)
        with pytest.raises(IdxFormatError):
            read_idx(tmp_path / "x")

    def test_truncated_payload(self, tmp_path):
        (tmp_path / "t").write_bytes(struct.pack(">II", 0x801, 5) + b"\x00\x01")
        with pytest.raises(IdxFormatError):
            read_idx(tmp_path / "t")

    def test_mnist_loader_scales_pixels(self, tmp_path):
        rng = np.random.default_rng(0)
        write_idx(tmp_path / "train-images-idx3-ubyte.gz",
                  rng.integers(0, 256, (50, 28, 28)), 0x803, compress=True)
        write_idx(tmp_path / "train-labels-idx1-ubyte.gz", rng.integers(0, 10, 50), 0x801,
                  compress=True)
        d = load_mnist_idx(tmp_path)
        assert d.n_features == 784
        assert len(d.train) + len(d.validation) + len(d.test) == 50
        assert d.train.x.min() >= 0 and d.train.x.max() <= 1
        assert d.spec.n_classes == 10


class TestMissingFiles:
    def test_adult_hint(self, tmp_path):
        with pytest.raises(DatasetLoadError, match="adult.data"):
            load_adult(tmp_path)

    def test_german_hint(self, tmp_path):
        with pytest.raises(DatasetLoadError, match="german.data"):
            load_german(tmp_path)

    def test_unknown_dataset(self):
        with pytest.raises(ValueError):
            load_dataset("cifar")

    def test_fetch_hints_lists_missing(self, tmp_path):
        report = fetch_hints(tmp_path)
        assert {r["file"] for r in report} >= {"adult.data", "adult.test", "german.data"}
        assert not any(r["ok"] for r in report)


class TestTabularLoaders:
    def test_malformed_rows_skipped_with_count(self, tmp_path):
        good = "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K"
        lines = [good] * 30 + ["1, 2, 3"]
        (tmp_path / "adult.data").write_text("\n".join(lines) + "\n")
        (tmp_path / "adult.test").write_text("|1x3 Cross validator\n" + "\n".join([good.replace("<=50K", ">50K.")] * 20) + "\n")
        with pytest.warns(UserWarning, match="skipped 1"):
            d = load_adult(tmp_path)
        assert d.skipped_rows == 1
        assert len(d.train) + len(d.validation) + len(d.test) == 50

    @needs_adult
    def test_adult_counts(self):
        d = load_adult(DATA_ROOT / "adult")
        total = len(d.train) + len(d.validation) + len(d.test)
        assert total == 48842
        y = np.concatenate([d.train.y, d.validation.y, d.test.y])
        np.testing.assert_allclose(1 - y.mean(), 0.76, atol=0.01)
        assert "sex_Male" not in d.feature_names and "fnlwgt" not in d.feature_names

    @needs_adult
    def test_adult_age_mode(self):
        d = load_adult(DATA_ROOT / "adult", attribute="age")
        assert not d.spec.is_discrete
        assert d.train.c.min() == 0.0 and d.train.c.max() == 1.0
        assert "age" not in d.feature_names

    @needs_adult
    def test_adult_standardised_on_train(self):
        d = load_adult(DATA_ROOT / "adult")
        np.testing.assert_allclose(d.train.x[:, :4].mean(axis=0), 0.0, atol=1e-10)

    @needs_german
    def test_german_counts(self):
        d = load_german(DATA_ROOT / "german")
        assert len(d.train) + len(d.validation) + len(d.test) == 1000
        c = np.concatenate([d.train.c, d.validation.c, d.test.c])
        assert 0.7 < c.mean() < 0.9  # most applicants are older than 25
