import math

import mpmath
import numpy as np
import pytest
import torch

from gradflow.errors import DomainError, InsufficientDataError
from gradflow.numerics import (
    LOG_2PI,
    SeededRng,
    column_moments,
    gaussian_log_pdf,
    logit_inverse,
    logit_preprocess,
    moments,
)


# ---- gaussian_log_pdf


def test_standard_normal_at_mode():
    assert gaussian_log_pdf(0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert gaussian_log_pdf(0.0) == pytest.approx(-0.918939, abs=1e-6)


@pytest.mark.parametrize("v", [1e-6, 0.3, 1.0, 7.5, 1e4])
def test_at_mean_only_normalizer_left(v):
    assert gaussian_log_pdf(2.5, 2.5, v) == pytest.approx(-0.5 * math.log(2 * math.pi * v), rel=1e-14)


def test_against_extended_precision():
    mpmath.mp.dps = 50
    z, m, v = mpmath.mpf("1.7"), mpmath.mpf("0.3"), mpmath.mpf("2.0")
    oracle = -(z - m) ** 2 / (2 * v) - mpmath.log(2 * mpmath.pi * v) / 2
    assert gaussian_log_pdf(1.7, 0.3, 2.0) == pytest.approx(float(oracle), abs=1e-14)


@pytest.mark.parametrize("mean,var", [(0.0, 1.0), (-3.0, 0.25), (10.0, 9.0)])
def test_density_integrates_to_one(mean, var):
    sd = math.sqrt(var)
    z = np.linspace(mean - 8 * sd, mean + 8 * sd, 20001)
    assert np.trapezoid(np.exp(gaussian_log_pdf(z, mean, var)), z) == pytest.approx(1.0, abs=1e-6)


def test_torch_and_numpy_agree():
    z = np.linspace(-3, 3, 11)
    a = gaussian_log_pdf(z, 0.5, 2.0)
    b = gaussian_log_pdf(torch.tensor(z), 0.5, 2.0).numpy()
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


@pytest.mark.parametrize("v", [0.0, -1.0, float("nan")])
def test_bad_variance(v):
    with pytest.raises(DomainError):
        gaussian_log_pdf(0.0, 0.0, v)


# ---- moments


def test_moments_hand_values():
    assert moments([1, 2, 3]) == pytest.approx((2.0, 2.0 / 3.0), abs=1e-15)
    assert moments([1, 2, 3], ddof=1) == pytest.approx((2.0, 1.0), abs=1e-15)


def test_moments_constant():
    assert moments([4.25] * 17) == (4.25, 0.0)


def test_moments_monte_carlo():
    x = SeededRng(5).generator().standard_normal(10_000)
    mean, var = moments(x)
    assert abs(mean) < 0.05 and abs(var - 1) < 0.05


def test_moments_permutation_invariant(rng):
    x = rng.normal(3.0, 2.0, 500)
    a = moments(x)
    b = moments(rng.permutation(x))
    assert a == pytest.approx(b, rel=1e-12)


def test_moments_stable_with_large_offset():
    # the naive sum-of-squares formula loses every digit here
    x = 1e9 + np.array([1.0, 2.0, 3.0])
    assert moments(x)[1] == pytest.approx(2.0 / 3.0, rel=1e-6)


def test_moments_too_short():
    with pytest.raises(InsufficientDataError):
        moments([1.0])


def test_column_moments_match_numpy(rng):
    m = rng.normal(size=(40, 6))
    mean, var = column_moments(m)
    np.testing.assert_allclose(mean, m.mean(0), atol=1e-13)
    np.testing.assert_allclose(var, m.var(0), atol=1e-13)


# ---- SeededRng


def test_rng_reproducible():
    a = SeededRng(42, 7).generator().integers(0, 2**32, 100)
    b = SeededRng(42, 7).generator().integers(0, 2**32, 100)
    assert np.array_equal(a, b)


def test_rng_streams_differ():
    a = SeededRng(42, 7).generator().random(8)
    b = SeededRng(42, 8).generator().random(8)
    c = SeededRng(43, 7).generator().random(8)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)


def test_rng_split_is_substreams():
    parts = SeededRng(1, 2).split(3)
    assert parts[1] == SeededRng(1, 2).substream(1)
    assert len({p.stream for p in parts}) == 3


# ---- logit preprocessing


def test_logit_midpoint():
    y, ld = logit_preprocess(torch.full((1, 1), 0.5, dtype=torch.float64), 0.05)
    assert y.item() == 0.0
    assert ld.item() == pytest.approx(math.log(0.9) - 2 * math.log(0.5), abs=1e-12)
    assert ld.item() == pytest.approx(1.28093, abs=1e-5)


def test_logit_round_trip(rng):
    x = torch.tensor(rng.random((100, 3, 4)))
    y, _ = logit_preprocess(x)
    assert torch.max(torch.abs(logit_inverse(y, clamp=False) - x)) < 1e-6


def test_logit_logdet_vs_central_differences(rng):
    alpha, h = 0.05, 1e-6
    x = torch.tensor(rng.uniform(0.01, 0.99, (100, 1)))
    _, ld = logit_preprocess(x, alpha)
    f = lambda t: torch.log(alpha + (1 - 2 * alpha) * t) - torch.log1p(-(alpha + (1 - 2 * alpha) * t))
    fd = torch.log((f(x + h) - f(x - h)) / (2 * h)).sum(dim=1)
    assert torch.max(torch.abs(fd - ld)) < 1e-6


@pytest.mark.parametrize("bad", [-0.01, 1.01])
def test_logit_domain(bad):
    with pytest.raises(DomainError):
        logit_preprocess(torch.tensor([[0.5, bad]]))


def test_log_2pi():
    assert LOG_2PI == pytest.approx(1.8378770664093453, abs=1e-15)
