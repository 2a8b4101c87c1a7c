"""GLOW-style normalizing flow written as pure functions of a parameter dict.

A model is a :class:`FlowConfig`, an ordered dict of named parameter tensors
and a few fixed buffers (the LU permutation and signs). Keeping the forward
pass functional lets ``torch.func`` take per-sample and per-group gradients
with ``vmap``, which is what the scoring module needs.

Layout (convolutional coupling): each block squeezes 2x2 spatial patches into
channels, applies ``steps_per_block`` steps of (ActNorm, invertible 1x1 mix,
affine coupling) and, except for the last block, factors half the channels
out to the standard-normal prior. Dense coupling works on the flattened
image as a (D, 1, 1) tensor with alternating even/odd index masks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from torch.func import grad, grad_and_value, vmap

from .datasets import ImageBatch
from .errors import ConfigurationError, NumericError, ShapeError, StateError
from .numerics import DTYPES, LOG_2PI, SeededRng, logit_inverse, logit_preprocess, torch_dtype

log = logging.getLogger(__name__)

ACTNORM_VARIANCE_FLOOR = 1e-6
INIT_WEIGHT_STD = 0.05


@dataclass(frozen=True)
class FlowConfig:
    blocks: int = 2
    steps_per_block: int = 4
    hidden_channels: int = 64
    coupling_kind: str = "convolutional"
    image_shape: tuple = (1, 8, 8)
    quantization_levels: int = 256
    scale_clamp: float = 2.0
    logit_alpha: float = 0.05
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    def validate(self) -> None:
        if self.blocks < 1 or self.steps_per_block < 1 or self.hidden_channels < 1:
            raise ConfigurationError("blocks, steps_per_block and hidden_channels must all be >= 1")
        if self.coupling_kind not in ("convolutional", "dense"):
            raise ConfigurationError(f"coupling_kind must be 'convolutional' or 'dense', got {self.coupling_kind!r}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigurationError(f"image_shape must be (channels, height, width), got {self.image_shape}")
        c, h, w = self.image_shape
        if self.coupling_kind == "dense":
            if self.blocks != 1:
                raise ConfigurationError("dense coupling requires blocks = 1")
            if c * h * w < 2:
                raise ConfigurationError("dense coupling needs at least 2 input dimensions")
        elif h % 2**self.blocks or w % 2**self.blocks:
            raise ConfigurationError(f"height and width must be divisible by 2**blocks = {2**self.blocks}")
        if self.quantization_levels < 2:
            raise ConfigurationError("quantization_levels must be >= 2")
        if not self.scale_clamp > 0:
            raise ConfigurationError("scale_clamp must be positive")
        if not 0 < self.logit_alpha < 0.5:
            raise ConfigurationError("logit_alpha must lie in (0, 0.5)")
        if self.precision not in DTYPES:
            raise ConfigurationError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")

    @property
    def dims(self) -> int:
        return int(np.prod(self.image_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PRESETS = {
    "glow-3ch": FlowConfig(blocks=3, steps_per_block=32, hidden_channels=512, image_shape=(3, 32, 32)),
    "glow-1ch": FlowConfig(blocks=1, steps_per_block=10, hidden_channels=1000, coupling_kind="dense", image_shape=(1, 28, 28)),
    "glow-desk": FlowConfig(blocks=2, steps_per_block=4, hidden_channels=64, image_shape=(1, 8, 8)),
}


@dataclass(frozen=True)
class LayerRef:
    index: int
    name: str
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class LogProbResult:
    per_sample_log_prob: np.ndarray
    total_log_prob: float
    per_layer_gradients: list | None = None


# --------------------------------------------------------------- the steps


def _squeeze(x):
    n, c, h, w = x.shape
    x = x.reshape(n, c, h // 2, 2, w // 2, 2).permute(0, 1, 3, 5, 2, 4)
    return x.reshape(n, c * 4, h // 2, w // 2)


def _unsqueeze(x):
    n, c, h, w = x.shape
    x = x.reshape(n, c // 4, 2, 2, h, w).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(n, c // 4, h * 2, w * 2)


class ActNorm:
    kind = "actnorm"

    def __init__(self, name, channels):
        self.name = name
        self.channels = channels

    def param_shapes(self):
        return [("bias", (self.channels,)), ("logs", (self.channels,))]

    def init_params(self, gen, dtype):
        return {"bias": torch.zeros(self.channels, dtype=dtype), "logs": torch.zeros(self.channels, dtype=dtype)}

    def forward(self, p, buf, x):
        hw = x.shape[2] * x.shape[3]
        y = (x + p["bias"].view(1, -1, 1, 1)) * torch.exp(p["logs"]).view(1, -1, 1, 1)
        return y, hw * p["logs"].sum()

    def inverse(self, p, buf, y):
        return y * torch.exp(-p["logs"]).view(1, -1, 1, 1) - p["bias"].view(1, -1, 1, 1)


class InvertibleMix:
    """1x1 convolution W = P (L + I) (U + diag(sign * exp(log_s)))."""

    kind = "mix"

    def __init__(self, name, channels):
        self.name = name
        self.channels = channels

    def param_shapes(self):
        c = self.channels
        return [("lower", (c, c)), ("upper", (c, c)), ("log_s", (c,))]

    def init_params(self, gen, dtype):
        c = self.channels
        q, _ = np.linalg.qr(gen.standard_normal((c, c)))
        perm, lower, upper = scipy.linalg.lu(q)
        diag = np.diag(upper)
        params = {
            "lower": torch.tensor(np.tril(lower, -1), dtype=dtype),
            "upper": torch.tensor(np.triu(upper, 1), dtype=dtype),
            "log_s": torch.tensor(np.log(np.abs(diag)), dtype=dtype),
        }
        buffers = {
            "perm": torch.tensor(np.argmax(perm, axis=1), dtype=torch.int64),
            "sign": torch.tensor(np.sign(diag), dtype=dtype),
        }
        return params, buffers

    def weight(self, p, buf):
        c = self.channels
        eye = torch.eye(c, dtype=p["lower"].dtype)
        lower = torch.tril(p["lower"], -1) + eye
        upper = torch.triu(p["upper"], 1) + torch.diag(buf["sign"] * torch.exp(p["log_s"]))
        # P = eye[perm] reproduces the permutation matrix of the LU factorization
        return eye[buf["perm"]] @ lower @ upper

    def forward(self, p, buf, x):
        hw = x.shape[2] * x.shape[3]
        w = self.weight(p, buf)
        return F.conv2d(x, w.view(self.channels, self.channels, 1, 1)), hw * p["log_s"].sum()

    def inverse(self, p, buf, y):
        w_inv = torch.linalg.inv(self.weight(p, buf))
        return F.conv2d(y, w_inv.view(self.channels, self.channels, 1, 1))


class AffineCoupling:
    """y_b = x_b * exp(s) + t with (s_hat, t) = net(x_a) and s = c * tanh(s_hat / c).

    The network's last layer starts at zero so every coupling is the identity
    at initialization.
    """

    kind = "coupling"

    def __init__(self, name, channels, hidden, mode, parity, clamp):
        self.name = name
        self.channels = channels
        self.hidden = hidden
        self.mode = mode
        self.clamp = clamp
        if mode == "dense":
            idx = np.arange(channels)
            self.idx_a = torch.tensor(idx[idx % 2 == parity])
            self.idx_b = torch.tensor(idx[idx % 2 != parity])
            self.restore = torch.tensor(np.argsort(np.concatenate([idx[idx % 2 == parity], idx[idx % 2 != parity]])))
            self.n_a, self.n_b = len(self.idx_a), len(self.idx_b)
        else:
            self.n_a = channels // 2
            self.n_b = channels - self.n_a

    def param_shapes(self):
        h = self.hidden
        if self.mode == "dense":
            return [
                ("w1", (h, self.n_a)), ("b1", (h,)),
                ("w2", (h, h)), ("b2", (h,)),
                ("w3", (2 * self.n_b, h)), ("b3", (2 * self.n_b,)),
            ]
        return [
            ("w1", (h, self.n_a, 3, 3)), ("b1", (h,)),
            ("w2", (h, h, 1, 1)), ("b2", (h,)),
            ("w3", (2 * self.n_b, h, 3, 3)), ("b3", (2 * self.n_b,)),
        ]

    def init_params(self, gen, dtype):
        params = {}
        for pname, shape in self.param_shapes():
            if pname in ("w1", "w2"):
                params[pname] = torch.tensor(INIT_WEIGHT_STD * gen.standard_normal(shape), dtype=dtype)
            else:
                params[pname] = torch.zeros(shape, dtype=dtype)
        return params

    def _split(self, x):
        if self.mode == "dense":
            flat = x.reshape(x.shape[0], -1)
            return flat[:, self.idx_a], flat[:, self.idx_b]
        return x[:, : self.n_a], x[:, self.n_a :]

    def _merge(self, xa, yb, like):
        if self.mode == "dense":
            return torch.cat([xa, yb], dim=1)[:, self.restore].reshape(like.shape)
        return torch.cat([xa, yb], dim=1)

    def _net(self, p, xa):
        if self.mode == "dense":
            h = torch.relu(F.linear(xa, p["w1"], p["b1"]))
            h = torch.relu(F.linear(h, p["w2"], p["b2"]))
            out = F.linear(h, p["w3"], p["b3"])
        else:
            h = torch.relu(F.conv2d(xa, p["w1"], p["b1"], padding=1))
            h = torch.relu(F.conv2d(h, p["w2"], p["b2"]))
            out = F.conv2d(h, p["w3"], p["b3"], padding=1)
        s_hat, t = out[:, 0::2], out[:, 1::2]
        return self.clamp * torch.tanh(s_hat / self.clamp), t

    def forward(self, p, buf, x):
        xa, xb = self._split(x)
        s, t = self._net(p, xa)
        yb = xb * torch.exp(s) + t
        return self._merge(xa, yb, x), s.reshape(s.shape[0], -1).sum(dim=1)

    def inverse(self, p, buf, y):
        ya, yb = self._split(y)
        s, t = self._net(p, ya)
        return self._merge(ya, (yb - t) * torch.exp(-s), y)


# --------------------------------------------------------------- the model


@dataclass
class FlowModel:
    config: FlowConfig
    steps: list
    params: "OrderedDict[str, torch.Tensor]"
    buffers: dict
    block_shapes: list
    initialized: bool = False
    actnorm_floor_hits: list = field(default_factory=list)
    source_id: str = ""

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.config.precision)

    @property
    def param_groups(self) -> list[LayerRef]:
        return [LayerRef(i, name, tuple(t.shape)) for i, (name, t) in enumerate(self.params.items())]

    @property
    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def step_params(self, params, step):
        prefix = step.name + "."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    def step_buffers(self, step):
        prefix = step.name + "."
        return {k[len(prefix):]: v for k, v in self.buffers.items() if k.startswith(prefix)}

    def clone(self) -> "FlowModel":
        return FlowModel(
            self.config,
            self.steps,
            OrderedDict((k, v.clone()) for k, v in self.params.items()),
            {k: v.clone() for k, v in self.buffers.items()},
            self.block_shapes,
            self.initialized,
            list(self.actnorm_floor_hits),
            self.source_id,
        )


def layer_groups(model: FlowModel, mode: str = "tensor") -> list[list[int]]:
    """Indices into ``param_groups`` forming each scored layer.

    ``tensor`` scores each weight and bias separately; ``sublayer`` merges the
    tensors of one ActNorm, one mix, or one weight/bias pair of a coupling net.
    """
    refs = model.param_groups
    if mode == "tensor":
        return [[r.index] for r in refs]
    if mode != "sublayer":
        raise ConfigurationError(f"unknown layer grouping {mode!r}")
    groups: "OrderedDict[str, list[int]]" = OrderedDict()
    for r in refs:
        head, _, leaf = r.name.rpartition(".")
        key = head if leaf in ("bias", "logs", "lower", "upper", "log_s") else f"{head}.{leaf[1:]}"
        groups.setdefault(key, []).append(r.index)
    return list(groups.values())


def build_model(config: FlowConfig, rng: SeededRng) -> FlowModel:
    config.validate()
    dtype = torch_dtype(config.precision)
    gen = rng.generator()
    c, h, w = config.image_shape
    steps, params, buffers, block_shapes = [], OrderedDict(), {}, []
    if config.coupling_kind == "dense":
        shape = (c * h * w, 1, 1)
    else:
        shape = (c, h, w)
    for b in range(config.blocks):
        if config.coupling_kind == "convolutional":
            shape = (shape[0] * 4, shape[1] // 2, shape[2] // 2)
        block_shapes.append(shape)
        ch = shape[0]
        for k in range(config.steps_per_block):
            base = f"block{b}.step{k}"
            layers = [
                ActNorm(f"{base}.actnorm", ch),
                InvertibleMix(f"{base}.mix", ch),
                AffineCoupling(f"{base}.coupling", ch, config.hidden_channels, "dense" if config.coupling_kind == "dense" else "conv", k % 2, config.scale_clamp),
            ]
            for layer in layers:
                out = layer.init_params(gen, dtype)
                p, bufs = out if isinstance(out, tuple) else (out, {})
                for pname, _ in layer.param_shapes():
                    params[f"{layer.name}.{pname}"] = p[pname]
                for bname, t in bufs.items():
                    buffers[f"{layer.name}.{bname}"] = t
            steps.append((b, layers))
        if b < config.blocks - 1:
            shape = (shape[0] - shape[0] // 2, shape[1], shape[2])
    flat_steps = []
    for b, layers in steps:
        for layer in layers:
            layer.block = b
            flat_steps.append(layer)
    return FlowModel(config, flat_steps, params, buffers, block_shapes)


def _as_model_input(model: FlowModel, batch: ImageBatch, rng: SeededRng | None = None):
    """Dequantized batch -> (logit-space tensor in model layout, logit log-det per sample)."""
    if batch.image_shape != model.config.image_shape:
        raise ShapeError(f"batch image shape {batch.image_shape} does not match model {model.config.image_shape}")
    x = torch.tensor(batch.float_view(rng), dtype=model.dtype)
    y, logdet = logit_preprocess(x, model.config.logit_alpha)
    if model.config.coupling_kind == "dense":
        y = y.reshape(y.shape[0], -1, 1, 1)
    return y, logdet


def flow_forward(model: FlowModel, params, y, check: bool = True):
    """Run the steps on preprocessed input; returns (flat latent, per-sample log-det)."""
    n = y.shape[0]
    logdet = torch.zeros(n, dtype=y.dtype)
    latents = []
    x = y
    current_block = -1
    for step in model.steps:
        if step.block != current_block:
            if current_block >= 0 and current_block < model.config.blocks - 1:
                keep = x.shape[1] - x.shape[1] // 2
                latents.append(x[:, keep:].reshape(n, -1))
                x = x[:, :keep]
            if model.config.coupling_kind == "convolutional":
                x = _squeeze(x)
            current_block = step.block
        x, ld = step.forward(model.step_params(params, step), model.step_buffers(step), x)
        logdet = logdet + ld
        if check and not (torch.isfinite(x).all() and torch.isfinite(logdet).all()):
            raise NumericError(f"non-finite values after step {step.name}", where=step.name)
    latents.append(x.reshape(n, -1))
    return torch.cat(latents, dim=1), logdet


def _log_prob_from_input(model, params, y, logit_logdet, check=True):
    z, logdet = flow_forward(model, params, y, check)
    prior = -0.5 * (z**2 + LOG_2PI).sum(dim=1)
    return prior + logdet + logit_logdet


def _require_initialized(model):
    if not model.initialized:
        raise StateError("model ActNorm layers are not initialized; call actnorm_init first")


def forward_log_prob(model: FlowModel, batch: ImageBatch, rng: SeededRng | None = None) -> LogProbResult:
    """Exact per-sample log-density (nats) of the dequantized batch in [0,1]^D."""
    _require_initialized(model)
    y, logit_logdet = _as_model_input(model, batch, rng)
    with torch.no_grad():
        lp = _log_prob_from_input(model, model.params, y, logit_logdet)
    per_sample = lp.double().numpy()
    return LogProbResult(per_sample, float(per_sample.sum()))


def log_prob_and_gradients(model: FlowModel, batch: ImageBatch, rng: SeededRng | None = None) -> LogProbResult:
    """Log-density plus the gradient of the batch-summed log-likelihood for every parameter tensor."""
    _require_initialized(model)
    y, logit_logdet = _as_model_input(model, batch, rng)
    params = OrderedDict((k, v.detach()) for k, v in model.params.items())

    def total(p):
        lp = _log_prob_from_input(model, p, y, logit_logdet)
        return lp.sum(), lp

    grads, (_, lp) = grad_and_value(total, has_aux=True)(params)
    per_sample = lp.detach().double().numpy()
    return LogProbResult(per_sample, float(per_sample.sum()), [grads[k] for k in model.params])


def group_gradients(model: FlowModel, y_groups: torch.Tensor, chunk: int = 256) -> OrderedDict:
    """Gradients of the summed log-likelihood of each group.

    ``y_groups`` has shape (G, b, ...) in model input layout (already
    logit-preprocessed). Returns name -> tensor of shape (G, *param_shape).
    """
    _require_initialized(model)
    params = OrderedDict((k, v.detach()) for k, v in model.params.items())

    def group_total(p, yg):
        z, logdet = flow_forward(model, p, yg, check=False)
        return (-0.5 * (z**2).sum(dim=1) + logdet).sum()

    per_group = vmap(grad(group_total), in_dims=(None, 0))
    out = OrderedDict((k, []) for k in params)
    for start in range(0, y_groups.shape[0], chunk):
        g = per_group(params, y_groups[start : start + chunk])
        for k in out:
            out[k].append(g[k])
    return OrderedDict((k, torch.cat(v)) for k, v in out.items())


def actnorm_init(model: FlowModel, batch: ImageBatch, rng: SeededRng | None = None) -> None:
    """Data-dependent ActNorm initialization: unit-variance, zero-mean outputs on ``batch``."""
    if model.initialized:
        raise StateError("ActNorm layers already initialized")
    if len(batch) < 2:
        raise StateError("actnorm_init needs a batch of at least 2 images")
    x, _ = _as_model_input(model, batch, rng)
    current_block = -1
    hits = []
    with torch.no_grad():
        for step in model.steps:
            if step.block != current_block:
                if 0 <= current_block < model.config.blocks - 1:
                    x = x[:, : x.shape[1] - x.shape[1] // 2]
                if model.config.coupling_kind == "convolutional":
                    x = _squeeze(x)
                current_block = step.block
            if isinstance(step, ActNorm):
                mean = x.mean(dim=(0, 2, 3))
                var = ((x - mean.view(1, -1, 1, 1)) ** 2).mean(dim=(0, 2, 3))
                floored = var < ACTNORM_VARIANCE_FLOOR
                if floored.any():
                    hits.append(step.name)
                    log.warning("ActNorm %s: variance floor applied to %d channel(s)", step.name, int(floored.sum()))
                model.params[f"{step.name}.bias"] = -mean
                model.params[f"{step.name}.logs"] = -0.5 * torch.log(torch.clamp(var, min=ACTNORM_VARIANCE_FLOOR))
            x, _ = step.forward(model.step_params(model.params, step), model.step_buffers(step), x)
    model.actnorm_floor_hits = hits
    model.initialized = True


def latent_dims(model: FlowModel) -> int:
    return model.config.dims


def inverse(model: FlowModel, latent, temperature: float = 1.0) -> ImageBatch:
    """Map latents (n, D), scaled by ``temperature``, back to continuous images in [0,1]."""
    x = inverse_to_input(model, latent, temperature)
    if model.config.coupling_kind == "dense":
        x = x.reshape(x.shape[0], *model.config.image_shape)
    img = logit_inverse(x, model.config.logit_alpha).double().numpy()
    levels = model.config.quantization_levels
    pixels = np.clip(np.floor(img * levels), 0, levels - 1).astype(np.uint8 if levels <= 256 else np.int64)
    return ImageBatch(pixels, levels, "samples", values=img)


def inverse_to_input(model: FlowModel, latent, temperature: float = 1.0) -> torch.Tensor:
    """Inverse of ``flow_forward``: latent -> logit-space input in model layout."""
    if temperature < 0:
        raise ConfigurationError("temperature must be >= 0")
    z = torch.as_tensor(latent, dtype=model.dtype)
    if z.ndim != 2 or z.shape[1] != model.config.dims:
        raise ShapeError(f"latent must have shape (n, {model.config.dims}), got {tuple(z.shape)}")
    z = z * temperature
    n = z.shape[0]
    # carve the flat latent into the per-block factored-out pieces
    pieces, offset = [], 0
    for b, shape in enumerate(model.block_shapes):
        if b < len(model.block_shapes) - 1:
            out_shape = (shape[0] // 2, shape[1], shape[2])
        else:
            out_shape = shape
        size = int(np.prod(out_shape))
        pieces.append(z[:, offset : offset + size].reshape(n, *out_shape))
        offset += size
    with torch.no_grad():
        x = pieces[-1]
        for b in reversed(range(model.config.blocks)):
            if b < model.config.blocks - 1:
                x = torch.cat([x, pieces[b]], dim=1)
            for step in reversed([s for s in model.steps if s.block == b]):
                x = step.inverse(model.step_params(model.params, step), model.step_buffers(step), x)
            if model.config.coupling_kind == "convolutional":
                x = _unsqueeze(x)
    return x


def sample(model: FlowModel, n: int, temperature: float, rng: SeededRng) -> ImageBatch:
    latent = rng.generator().standard_normal((n, model.config.dims))
    return inverse(model, latent, temperature)


def bpd(total_log_prob, dims: int, levels: int = 256):
    """Bits per dimension of a discrete image given the continuous log-density in nats."""
    if dims < 1 or levels < 2:
        raise ConfigurationError("bpd needs dims >= 1 and levels >= 2")
    return -np.asarray(total_log_prob) / (dims * math.log(2.0)) + math.log2(levels)
