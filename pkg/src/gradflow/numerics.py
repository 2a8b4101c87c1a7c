"""Small deterministic numeric kernels used across the package.

Everything here is a pure function of its arguments. Randomness always flows
through :class:`SeededRng`, which keys a PCG64 generator on ``(seed, stream)``
so independent consumers (epochs, workers, dequantization) never share draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, InsufficientDataError

LOG_2PI = math.log(2.0 * math.pi)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise DomainError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random stream identified by ``(seed, stream)``."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, stream: int) -> "SeededRng":
        # streams are nested by hashing the pair, keeping seed fixed
        return SeededRng(self.seed, _mix(self.stream, stream))

    def split(self, n: int) -> list["SeededRng"]:
        return [self.substream(i) for i in range(n)]


def _mix(a: int, b: int) -> int:
    # splitmix64-style combination; keeps results in [0, 2**64)
    x = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def gaussian_log_pdf(z, mean=0.0, variance=1.0):
    """Elementwise log N(z; mean, variance) in nats.

    Accepts numpy arrays, torch tensors or Python scalars and returns the
    same kind.
    """
    if not variance > 0:
        raise DomainError(f"variance must be positive, got {variance}")
    if isinstance(z, torch.Tensor):
        return -0.5 * ((z - mean) ** 2 / variance + math.log(2.0 * math.pi * variance))
    z = np.asarray(z, dtype=np.float64)
    out = -0.5 * ((z - mean) ** 2 / variance + math.log(2.0 * math.pi * variance))
    return float(out) if out.ndim == 0 else out


def moments(values, ddof: int = 0) -> tuple[float, float]:
    """Mean and variance in a single Welford pass.

    ``ddof=0`` gives the population variance (divide by N), ``ddof=1`` the
    sample variance.
    """
    n = 0
    mean = 0.0
    m2 = 0.0
    for v in np.asarray(values, dtype=np.float64).ravel():
        n += 1
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
    if n < 2:
        raise InsufficientDataError(f"moments need at least 2 values, got {n}")
    return float(mean), float(max(m2, 0.0) / (n - ddof))


def column_moments(matrix: np.ndarray, ddof: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Welford over the rows of ``matrix`` (one column per variable)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 rows, got shape {matrix.shape}")
    mean = np.zeros(matrix.shape[1])
    m2 = np.zeros(matrix.shape[1])
    for n, row in enumerate(matrix, start=1):
        delta = row - mean
        mean += delta / n
        m2 += delta * (row - mean)
    return mean, np.maximum(m2, 0.0) / (matrix.shape[0] - ddof)


def logit_preprocess(x: torch.Tensor, alpha: float = 0.05):
    """Map [0,1] pixels to logit space.

    Returns ``(y, logdet)`` where ``logdet`` has one entry per sample (the sum
    over all non-batch dimensions of log|dy/dx|).
    """
    if not 0.0 < alpha < 0.5:
        raise DomainError(f"alpha must lie in (0, 0.5), got {alpha}")
    if torch.any(x < 0) or torch.any(x > 1):
        raise DomainError("logit_preprocess input must lie in [0, 1]")
    s = alpha + (1.0 - 2.0 * alpha) * x
    y = torch.log(s) - torch.log1p(-s)
    per_dim = math.log(1.0 - 2.0 * alpha) - torch.log(s) - torch.log1p(-s)
    return y, per_dim.reshape(x.shape[0], -1).sum(dim=1)


def logit_inverse(y: torch.Tensor, alpha: float = 0.05, clamp: bool = True) -> torch.Tensor:
    x = (torch.sigmoid(y) - alpha) / (1.0 - 2.0 * alpha)
    return x.clamp(0.0, 1.0) if clamp else x
