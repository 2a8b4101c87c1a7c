"""Image data: IDX files, synthetic families, splits and evaluation sampling.

Synthetic images are pure functions of ``(spec, index, seed)`` so any subset
of a dataset can be regenerated without materializing the rest.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, InsufficientDataError
from .numerics import SeededRng

IDX_UBYTE_RANK3 = 0x00000803
DEFAULT_LEVELS = 256
DEFAULT_EVAL_SIZE = 1000
FAMILIES = ("flat-blob", "correlated-field", "white-noise")
SPLITS = ("train", "fit", "test")


@dataclass
class ImageBatch:
    """Quantized images of shape (n, channels, height, width).

    ``values`` is the optional dequantized float view in [0, 1]; ``ids``
    identifies samples within their source so per-sample noise is stable
    across regrouping.
    """

    pixels: np.ndarray
    levels: int = DEFAULT_LEVELS
    source: str = ""
    ids: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 4:
            raise ConfigurationError(f"ImageBatch pixels must be 4-d, got shape {self.pixels.shape}")
        if len(self.pixels) < 1:
            raise InsufficientDataError("ImageBatch must hold at least one image")
        if self.pixels.min() < 0 or self.pixels.max() > self.levels - 1:
            raise ConfigurationError(f"pixels must lie in [0, {self.levels - 1}]")
        if self.ids is None:
            self.ids = np.arange(len(self.pixels), dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=np.float64)
            if self.values.shape != self.pixels.shape:
                raise ConfigurationError("dequantized view must match pixel shape")

    def __len__(self):
        return len(self.pixels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.pixels.shape[1:])

    def subset(self, index) -> "ImageBatch":
        index = np.asarray(index, dtype=np.int64)
        return ImageBatch(
            self.pixels[index],
            self.levels,
            self.source,
            self.ids[index],
            None if self.values is None else self.values[index],
        )

    def dequantize(self, rng: SeededRng) -> "ImageBatch":
        """Add u ~ U[0,1)/levels per pixel; the noise of a sample depends only on (rng, id)."""
        per_image = int(np.prod(self.pixels.shape[1:]))
        noise = np.empty((len(self), per_image))
        for row, sample_id in enumerate(self.ids):
            noise[row] = rng.substream(int(sample_id)).generator().random(per_image)
        values = (self.pixels.astype(np.float64) + noise.reshape(self.pixels.shape)) / self.levels
        return replace(self, values=values)

    def float_view(self, rng: SeededRng | None = None) -> np.ndarray:
        if self.values is not None:
            return self.values
        return self.dequantize(rng or SeededRng(0)).values


def concat_batches(batches: list[ImageBatch]) -> ImageBatch:
    values = None
    if all(b.values is not None for b in batches):
        values = np.concatenate([b.values for b in batches])
    return ImageBatch(
        np.concatenate([b.pixels for b in batches]),
        batches[0].levels,
        batches[0].source,
        np.concatenate([b.ids for b in batches]),
        values,
    )


# ---------------------------------------------------------------- IDX files


def load_idx(path) -> ImageBatch:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("file too short for IDX magic", offset=len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != IDX_UBYTE_RANK3:
        raise FormatError(f"expected IDX magic 0x{IDX_UBYTE_RANK3:08x}, got 0x{magic:08x}", offset=0)
    if len(data) < 16:
        raise FormatError("truncated IDX dimension header", offset=len(data))
    n, h, w = struct.unpack_from(">III", data, 4)
    expected = 16 + n * h * w
    if len(data) < expected:
        raise FormatError(f"truncated pixel data: need {expected} bytes, have {len(data)}", offset=len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after IDX pixel data", offset=expected)
    pixels = np.frombuffer(data, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, 1, h, w)
    return ImageBatch(pixels.copy(), DEFAULT_LEVELS, f"idx:{path}")


def write_idx(path, batch: ImageBatch) -> None:
    n, c, h, w = batch.pixels.shape
    if c != 1:
        raise ConfigurationError("IDX image files hold single-channel images only")
    header = struct.pack(">IIII", IDX_UBYTE_RANK3, n, h, w)
    Path(path).write_bytes(header + batch.pixels.astype(np.uint8).tobytes())


def export_raw(path, batch: ImageBatch) -> None:
    """Write pixels as little-endian u8 plus a one-line JSON sidecar."""
    path = Path(path)
    path.write_bytes(batch.pixels.astype("<u1").tobytes())
    sidecar = {"shape": list(batch.pixels.shape), "dtype": "u8", "levels": batch.levels, "source": batch.source}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


# ------------------------------------------------------- synthetic families


@dataclass(frozen=True)
class SyntheticSpec:
    """A parameterized synthetic image family.

    flat-blob: one gray level per image drawn from [gray_low, gray_high],
    plus Gaussian noise of ``noise_levels`` quantization steps.
    correlated-field: Gaussian random field smoothed with a Gaussian kernel of
    width ``length_scale`` pixels, scaled to ``amplitude`` levels around ``mean``.
    white-noise: iid uniform over all levels.
    """

    family: str
    image_shape: tuple[int, int, int] = (1, 8, 8)
    levels: int = DEFAULT_LEVELS
    gray_low: float = 64.0
    gray_high: float = 191.0
    noise_levels: float = 4.0
    length_scale: float = 2.0
    amplitude: float = 48.0
    mean: float = 127.5

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown synthetic family {self.family!r}; expected one of {FAMILIES}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigurationError(f"image_shape must be (channels, height, width), got {self.image_shape}")
        if self.levels < 2:
            raise ConfigurationError("levels must be at least 2")
        if not 0 <= self.gray_low <= self.gray_high <= self.levels - 1:
            raise ConfigurationError("flat-blob gray range must satisfy 0 <= low <= high <= levels-1")
        if self.noise_levels < 0 or self.amplitude < 0:
            raise ConfigurationError("noise_levels and amplitude must be non-negative")
        if not 0 <= self.length_scale <= 64:
            raise ConfigurationError("length_scale must lie in [0, 64]")

    def tag(self) -> str:
        if self.family == "correlated-field":
            return f"correlated-field(l={self.length_scale:g})"
        return self.family


def synth_image(spec: SyntheticSpec, index: int, seed: int) -> np.ndarray:
    gen = SeededRng(seed, index).generator()
    shape = spec.image_shape
    top = spec.levels - 1
    if spec.family == "flat-blob":
        gray = gen.uniform(spec.gray_low, spec.gray_high)
        img = gray + spec.noise_levels * gen.standard_normal(shape)
    elif spec.family == "correlated-field":
        white = gen.standard_normal(shape)
        img = spec.mean + spec.amplitude * _smooth_unit_variance(white, spec.length_scale)
    else:
        return gen.integers(0, spec.levels, size=shape).astype(np.uint8 if top < 256 else np.int64)
    img = np.clip(np.rint(img), 0, top)
    return img.astype(np.uint8 if top < 256 else np.int64)


def _smooth_unit_variance(white: np.ndarray, width: float) -> np.ndarray:
    if width == 0:
        return white
    sigma = (0, width, width)
    smoothed = ndimage.gaussian_filter(white, sigma=sigma, mode="wrap")
    # the filtered field has variance sum(k**2); divide it back out
    delta = np.zeros(white.shape[1:])
    delta[0, 0] = 1.0
    kernel = ndimage.gaussian_filter(delta, sigma=width, mode="wrap")
    return smoothed / math.sqrt(float(np.sum(kernel**2)))


def synth_generate(spec: SyntheticSpec, n: int, seed: int, indices=None) -> ImageBatch:
    spec.validate()
    if indices is None:
        if n < 1:
            raise ConfigurationError("n must be at least 1")
        indices = np.arange(n)
    indices = np.asarray(indices, dtype=np.int64)
    pixels = np.stack([synth_image(spec, int(i), seed) for i in indices])
    return ImageBatch(pixels, spec.levels, spec.tag(), indices)


def parse_data_spec(text: str, image_shape=(1, 8, 8)) -> "SyntheticSpec | Path":
    """Parse ``synthetic:<family>[:key=value,...]`` or ``idx:<path>`` (bare paths are IDX)."""
    if text.startswith("synthetic:"):
        parts = text.split(":", 2)
        kwargs = {}
        if len(parts) == 3 and parts[2]:
            for item in parts[2].split(","):
                key, _, value = item.partition("=")
                key = {"l": "length_scale", "ell": "length_scale"}.get(key.strip(), key.strip().replace("-", "_"))
                if key not in SyntheticSpec.__dataclass_fields__ or key in ("family", "image_shape"):
                    raise ConfigurationError(f"unknown synthetic parameter {key!r} in {text!r}")
                kwargs[key] = int(value) if key == "levels" else float(value)
        spec = SyntheticSpec(parts[1], tuple(image_shape), **kwargs)
        spec.validate()
        return spec
    path = Path(text[4:] if text.startswith("idx:") else text)
    if not path.is_file():
        raise ConfigurationError(f"data file not found: {path}")
    return path


# --------------------------------------------------------- handles, splits


@dataclass
class DatasetHandle:
    """A view onto an IDX file or a synthetic family, restricted to ``indices``."""

    source: "SyntheticSpec | Path"
    length: int
    seed: int = 0
    split: str | None = None
    indices: np.ndarray | None = None
    _cache: ImageBatch | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(self.length, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    @property
    def name(self) -> str:
        if isinstance(self.source, SyntheticSpec):
            return self.source.tag()
        return Path(self.source).stem

    def load(self, positions=None) -> ImageBatch:
        """Materialize the images at ``positions`` (default: the whole view)."""
        idx = self.indices if positions is None else self.indices[np.asarray(positions, dtype=np.int64)]
        if isinstance(self.source, SyntheticSpec):
            return synth_generate(self.source, len(idx), self.seed, indices=idx)
        if self._cache is None:
            self._cache = load_idx(self.source)
        return self._cache.subset(idx)


def synthetic_handle(spec: SyntheticSpec, length: int, seed: int) -> DatasetHandle:
    spec.validate()
    return DatasetHandle(spec, length, seed)


def idx_handle(path) -> DatasetHandle:
    batch = load_idx(path)
    handle = DatasetHandle(Path(path), len(batch))
    handle._cache = batch
    return handle


def make_splits(handle: DatasetHandle, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition ``handle`` into disjoint (train, fit, test) views by a seeded permutation."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigurationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(handle)
    order = SeededRng(seed, 0x5B117).generator().permutation(n)
    n_train = int(round(fractions[0] * n))
    n_fit = int(round(fractions[1] * n))
    bounds = [0, n_train, n_train + n_fit, n]
    parts = []
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        if hi <= lo:
            raise ConfigurationError(f"split {name!r} would be empty for {n} items and fractions {fractions}")
        parts.append(
            DatasetHandle(handle.source, handle.length, handle.seed, name, handle.indices[np.sort(order[lo:hi])], handle._cache)
        )
    return tuple(parts)


def sample_eval_set(split: DatasetHandle, n: int = DEFAULT_EVAL_SIZE, seed: int = 0) -> ImageBatch:
    """Draw ``n`` distinct images from ``split`` in a seed-determined order."""
    if n > len(split):
        raise InsufficientDataError(f"requested {n} evaluation samples but split has only {len(split)}")
    positions = SeededRng(seed, 0xE7A1).generator().choice(len(split), size=n, replace=False)
    return split.load(positions)


def empirical_entropy(image: np.ndarray, levels: int = DEFAULT_LEVELS) -> float:
    """Shannon entropy in bits of one image's pixel-value histogram."""
    counts = np.bincount(np.asarray(image, dtype=np.int64).ravel(), minlength=levels)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())
