import json
import math
import os
import struct

import numpy as np
import pytest

from gradflow.datasets import (
    ImageBatch,
    SyntheticSpec,
    concat_batches,
    empirical_entropy,
    export_raw,
    idx_handle,
    load_idx,
    make_splits,
    parse_data_spec,
    sample_eval_set,
    synth_generate,
    synthetic_handle,
    write_idx,
)
from gradflow.errors import ConfigurationError, FormatError, InsufficientDataError
from gradflow.numerics import SeededRng


def idx_bytes(pixels, magic=0x00000803):
    n, h, w = pixels.shape
    return struct.pack(">IIII", magic, n, h, w) + pixels.astype(np.uint8).tobytes()


# ---- IDX


def test_idx_two_images_round_trip(tmp_path):
    pixels = np.array([[[0, 255], [1, 254]], [[17, 0], [255, 128]]], dtype=np.uint8)
    f = tmp_path / "two.idx"
    f.write_bytes(idx_bytes(pixels))
    batch = load_idx(f)
    assert batch.pixels.shape == (2, 1, 2, 2)
    assert np.array_equal(batch.pixels[:, 0], pixels)
    write_idx(tmp_path / "copy.idx", batch)
    assert (tmp_path / "copy.idx").read_bytes() == f.read_bytes()


def test_idx_label_magic_rejected(tmp_path):
    f = tmp_path / "labels.idx"
    f.write_bytes(struct.pack(">II", 0x00000801, 3) + b"\x01\x02\x03")
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(f)


def test_idx_truncated_and_trailing(tmp_path):
    good = idx_bytes(np.zeros((3, 4, 4)))
    (tmp_path / "short.idx").write_bytes(good[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(tmp_path / "short.idx")
    (tmp_path / "head.idx").write_bytes(good[:9])
    with pytest.raises(FormatError, match="offset 9"):
        load_idx(tmp_path / "head.idx")
    (tmp_path / "long.idx").write_bytes(good + b"\x00")
    with pytest.raises(FormatError, match=f"offset {len(good)}"):
        load_idx(tmp_path / "long.idx")


@pytest.mark.skipif(not os.environ.get("GRADFLOW_MNIST_TEST"), reason="set GRADFLOW_MNIST_TEST to an MNIST test-images file")
def test_real_mnist_test_file():
    batch = load_idx(os.environ["GRADFLOW_MNIST_TEST"])
    assert batch.pixels.shape == (10000, 1, 28, 28)


def test_export_raw_sidecar(tmp_path):
    batch = synth_generate(SyntheticSpec("white-noise"), 3, seed=1)
    export_raw(tmp_path / "x.u8", batch)
    assert (tmp_path / "x.u8").read_bytes() == batch.pixels.astype("<u1").tobytes()
    meta = json.loads((tmp_path / "x.u8.json").read_text())
    assert meta["shape"] == [3, 1, 8, 8]


# ---- synthetic families


def test_generation_deterministic():
    for fam in ("flat-blob", "correlated-field", "white-noise"):
        a = synth_generate(SyntheticSpec(fam), 20, seed=9)
        b = synth_generate(SyntheticSpec(fam), 20, seed=9)
        assert np.array_equal(a.pixels, b.pixels)
        assert not np.array_equal(a.pixels, synth_generate(SyntheticSpec(fam), 20, seed=10).pixels)


def test_generation_is_per_index():
    full = synth_generate(SyntheticSpec("correlated-field"), 30, seed=2)
    some = synth_generate(SyntheticSpec("correlated-field"), 0, seed=2, indices=[29, 3])
    assert np.array_equal(some.pixels, full.pixels[[29, 3]])


def test_flat_blob_far_smoother_than_noise():
    flat = synth_generate(SyntheticSpec("flat-blob"), 100, seed=1).pixels.astype(float)
    noise = synth_generate(SyntheticSpec("white-noise"), 100, seed=1).pixels.astype(float)
    ratio = flat.reshape(100, -1).var(axis=1).mean() / noise.reshape(100, -1).var(axis=1).mean()
    assert ratio < 0.05


def lag1_autocorrelation(pixels):
    x = pixels.astype(float)
    x = x - x.mean(axis=(2, 3), keepdims=True)
    num = (x[..., :, 1:] * x[..., :, :-1]).mean()
    return num / (x**2).mean()


@pytest.mark.parametrize("ell", [0.0, 0.05])
def test_short_correlation_length_is_white(ell):
    batch = synth_generate(SyntheticSpec("correlated-field", length_scale=ell), 200, seed=3)
    assert abs(lag1_autocorrelation(batch.pixels)) < 0.05


def test_long_correlation_length_is_correlated():
    batch = synth_generate(SyntheticSpec("correlated-field", length_scale=2.0), 200, seed=3)
    assert lag1_autocorrelation(batch.pixels) > 0.5


def test_correlated_field_marginal_scale():
    batch = synth_generate(SyntheticSpec("correlated-field", amplitude=20.0), 400, seed=4)
    x = batch.pixels.astype(float)
    assert abs(x.mean() - 127.5) < 2.0
    assert abs(x.std() - 20.0) < 2.0


def test_entropy_ordering():
    means = [
        np.mean([empirical_entropy(im) for im in synth_generate(SyntheticSpec(f), 100, seed=5).pixels])
        for f in ("flat-blob", "correlated-field", "white-noise")
    ]
    assert means[0] < means[1] < means[2]


def test_entropy_closed_forms():
    assert empirical_entropy(np.zeros((8, 8), dtype=np.uint8)) == 0.0
    assert empirical_entropy(np.array([0, 1, 2, 3])) == pytest.approx(2.0)


@pytest.mark.parametrize(
    "kw", [dict(family="stripes"), dict(family="flat-blob", gray_low=200, gray_high=100), dict(family="correlated-field", length_scale=-1)]
)
def test_invalid_family_parameters(kw):
    with pytest.raises(ConfigurationError):
        synth_generate(SyntheticSpec(**kw), 2, seed=0)


def test_parse_data_spec(tmp_path):
    spec = parse_data_spec("synthetic:correlated-field:l=3,amplitude=30", (1, 8, 8))
    assert spec.length_scale == 3.0 and spec.amplitude == 30.0 and spec.tag() == "correlated-field(l=3)"
    with pytest.raises(ConfigurationError):
        parse_data_spec("synthetic:flat-blob:colour=2")
    with pytest.raises(ConfigurationError):
        parse_data_spec("idx:" + str(tmp_path / "missing.idx"))


# ---- dequantization


def test_dequantization_depends_only_on_id():
    batch = synth_generate(SyntheticSpec("white-noise"), 10, seed=1)
    full = batch.dequantize(SeededRng(4)).values
    part = batch.subset([7, 2]).dequantize(SeededRng(4)).values
    assert np.array_equal(part, full[[7, 2]])
    px = batch.pixels.astype(np.int64)
    assert np.all(full >= px / 256) and np.all(full < (px + 1) / 256)


def test_batch_validation():
    with pytest.raises(ConfigurationError):
        ImageBatch(np.full((1, 1, 2, 2), 256))
    with pytest.raises(InsufficientDataError):
        ImageBatch(np.zeros((0, 1, 2, 2)))
    a = synth_generate(SyntheticSpec("white-noise"), 2, seed=1)
    assert len(concat_batches([a, a])) == 4


# ---- splits and evaluation samples


def test_splits_sizes_disjoint_cover():
    h = synthetic_handle(SyntheticSpec("flat-blob"), 1000, seed=0)
    tr, fi, te = make_splits(h, (0.8, 0.1, 0.1), seed=3)
    assert (len(tr), len(fi), len(te)) == (800, 100, 100)
    sets = [set(s.indices.tolist()) for s in (tr, fi, te)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert sets[0] | sets[1] | sets[2] == set(range(1000))
    again = make_splits(h, (0.8, 0.1, 0.1), seed=3)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip((tr, fi, te), again))


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.0), (0.5, 0.6, -0.1), (0.5, 0.5)])
def test_bad_split_fractions(fractions):
    with pytest.raises(ConfigurationError):
        make_splits(synthetic_handle(SyntheticSpec("flat-blob"), 100, seed=0), fractions)


def test_split_coverage_many_fractions(rng):
    h = synthetic_handle(SyntheticSpec("flat-blob"), 97, seed=0)
    for _ in range(25):
        f = rng.dirichlet([2, 2, 2])
        f[2] = 1 - f[0] - f[1]
        try:
            parts = make_splits(h, tuple(f), seed=int(rng.integers(100)))
        except ConfigurationError:
            continue
        idx = np.concatenate([p.indices for p in parts])
        assert sorted(idx.tolist()) == list(range(97))


def test_idx_handle_split_loads_pixels(tmp_path):
    pixels = np.arange(10 * 4, dtype=np.uint8).reshape(10, 2, 2)
    (tmp_path / "d.idx").write_bytes(idx_bytes(pixels))
    tr, fi, te = make_splits(idx_handle(tmp_path / "d.idx"), (0.6, 0.2, 0.2), seed=1)
    got = te.load()
    assert np.array_equal(got.pixels[:, 0], pixels[te.indices])


def test_eval_sample_full_is_permutation():
    h = synthetic_handle(SyntheticSpec("flat-blob"), 40, seed=0)
    batch = sample_eval_set(h, 40, seed=1)
    assert sorted(batch.ids.tolist()) == list(range(40))


def test_eval_sample_default_size_and_guard():
    h = synthetic_handle(SyntheticSpec("flat-blob"), 1500, seed=0)
    assert len(sample_eval_set(h, seed=0)) == 1000
    with pytest.raises(InsufficientDataError):
        sample_eval_set(h, 1501)


def test_eval_sample_overlap_hypergeometric():
    big, n = 4000, 1000
    h = synthetic_handle(SyntheticSpec("white-noise"), big, seed=0)
    overlaps = []
    for s in range(10):
        a = set(sample_eval_set(h, n, seed=2 * s).ids.tolist())
        b = set(sample_eval_set(h, n, seed=2 * s + 1).ids.tolist())
        overlaps.append(len(a & b))
    mean = n * n / big
    var = n * (n / big) * (1 - n / big) * (big - n) / (big - 1)
    # the mean of 10 draws lies within 4 standard errors of the expectation
    assert abs(np.mean(overlaps) - mean) < 4 * math.sqrt(var / 10)
