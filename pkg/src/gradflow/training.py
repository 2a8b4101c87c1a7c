"""Maximum-likelihood training with Adam and epoch checkpoints.

Every random choice in an epoch (shuffle order, dequantization noise) is drawn
from ``SeededRng(seed, epoch)``, so resuming from a checkpoint reproduces an
uninterrupted run exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.func import grad_and_value

from .datasets import DatasetHandle, ImageBatch
from .errors import ConfigurationError, FormatError, NumericError, ShapeError
from .flow import FlowConfig, FlowModel, _as_model_input, _log_prob_from_input, actnorm_init, build_model
from .numerics import SeededRng, torch_dtype

log = logging.getLogger(__name__)

STANDARD_CHECKPOINT_EPOCHS = (1, 10, 20, 30, 40, 50, 70, 80, 100, 150)
# per-preset optimizer defaults; the two image presets follow the reference runs
PRESET_TRAINING = {
    "glow-3ch": {"batch_size": 64, "learning_rate": 5e-4, "weight_decay": 0.0, "epochs": 250},
    "glow-1ch": {"batch_size": 128, "learning_rate": 1e-3, "weight_decay": 1e-4, "epochs": 200},
    "glow-desk": {"batch_size": 64, "learning_rate": 1e-3, "weight_decay": 0.0, "epochs": 10},
}
MAGIC = b"GFCK"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 10
    checkpoint_epochs: tuple | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    grad_clip_norm: float | None = 50.0

    def resolved_checkpoint_epochs(self) -> list[int]:
        if self.checkpoint_epochs is None:
            chosen = {e for e in STANDARD_CHECKPOINT_EPOCHS if e <= self.epochs}
        else:
            chosen = {int(e) for e in self.checkpoint_epochs}
            bad = [e for e in chosen if not 1 <= e <= self.epochs]
            if bad:
                raise ConfigurationError(f"checkpoint epochs {sorted(bad)} fall outside [1, {self.epochs}]")
        chosen.add(self.epochs)
        return sorted(chosen)

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate and weight_decay must be >= 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive or None")
        self.resolved_checkpoint_epochs()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoint_epochs"] = self.resolved_checkpoint_epochs()
        return d


@dataclass
class OptimizerState:
    m: "OrderedDict[str, torch.Tensor]"
    v: "OrderedDict[str, torch.Tensor]"
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(
            OrderedDict((k, torch.zeros_like(p)) for k, p in params.items()),
            OrderedDict((k, torch.zeros_like(p)) for k, p in params.items()),
        )


def adam_step(params, grads, state: OptimizerState, cfg: TrainConfig):
    """One Adam update of a loss *to be minimized*; returns (new params, new state).

    Weight decay is decoupled: params are shrunk by (1 - lr * weight_decay)
    before the moment-based step.
    """
    if list(params) != list(grads) or list(params) != list(state.m):
        raise ShapeError("params, grads and optimizer state must cover the same tensors in the same order")
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_p, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"shape mismatch for {k}: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p = p * (1.0 - cfg.learning_rate * cfg.weight_decay)
        step = cfg.learning_rate * (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps_adam)
        new_p[k] = p - step
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, t)


def clip_by_global_norm(grads, max_norm):
    if max_norm is None:
        return grads, None
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = OrderedDict((k, g * scale) for k, g in grads.items())
    return grads, total


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    epoch: int
    config: FlowConfig
    params: "OrderedDict[str, torch.Tensor]"
    buffers: dict
    optimizer: OptimizerState
    rng_state: dict
    loss_history: list = field(default_factory=list)
    train_config: dict | None = None
    initialized: bool = True

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    @property
    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.epoch).encode())
        for t in self.params.values():
            h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def model(self) -> FlowModel:
        m = build_model(self.config, SeededRng(0))
        if list(m.params) != list(self.params):
            raise FormatError("checkpoint layer names do not match the architecture of its config")
        m.params = OrderedDict((k, v.clone()) for k, v in self.params.items())
        m.buffers = {k: v.clone() for k, v in self.buffers.items()}
        m.initialized = self.initialized
        m.source_id = self.checkpoint_id
        return m


def make_checkpoint(model: FlowModel, state: OptimizerState, epoch: int, cfg: TrainConfig, history: list) -> Checkpoint:
    return Checkpoint(
        epoch=epoch,
        config=model.config,
        params=OrderedDict((k, v.detach().clone()) for k, v in model.params.items()),
        buffers={k: v.clone() for k, v in model.buffers.items()},
        optimizer=OptimizerState(
            OrderedDict((k, v.clone()) for k, v in state.m.items()),
            OrderedDict((k, v.clone()) for k, v in state.v.items()),
            state.step,
        ),
        rng_state={"seed": cfg.seed, "next_stream": epoch + 1, "generator": "PCG64/SeedSequence(seed, spawn_key=(epoch,))"},
        loss_history=[float(x) for x in history],
        train_config=cfg.to_dict(),
        initialized=model.initialized,
    )


def _blob_dtype(precision):
    return np.dtype("<f4") if precision == "float32" else np.dtype("<f8")


def checkpoint_bytes(c: Checkpoint) -> bytes:
    precision = c.config.precision
    header = {
        "format": "gradflow-checkpoint",
        "epoch": c.epoch,
        "config": c.config.to_dict(),
        "config_hash": c.config_hash,
        "precision": precision,
        "layers": [{"name": k, "shape": list(v.shape)} for k, v in c.params.items()],
        "buffers": {
            k: {"dtype": "int64" if v.dtype == torch.int64 else "float", "shape": list(v.shape), "data": v.flatten().tolist()}
            for k, v in sorted(c.buffers.items())
        },
        "adam_step": c.optimizer.step,
        "rng": c.rng_state,
        "loss_history": c.loss_history,
        "train_config": c.train_config,
        "initialized": c.initialized,
        "preprocessing": {"logit_alpha": c.config.logit_alpha, "dequantization": "uniform"},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dt = _blob_dtype(precision)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    for group in (c.params, c.optimizer.m, c.optimizer.v):
        for k in c.params:
            parts.append(group[k].detach().contiguous().numpy().astype(dt, copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(c: Checkpoint, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(c)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".gfck")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise FormatError("file too short for checkpoint preamble", offset=len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    version, head_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if len(data) < 12 + head_len:
        raise FormatError("truncated header", offset=len(data))
    try:
        header = json.loads(data[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", offset=12) from None
    config = FlowConfig.from_dict(header["config"])
    if config.config_hash() != header.get("config_hash"):
        raise FormatError("config hash mismatch: header config does not match its recorded hash", offset=12)
    dt = _blob_dtype(header["precision"])
    tdtype = torch_dtype(header["precision"])
    layers = header["layers"]
    sizes = [int(np.prod(layer["shape"])) for layer in layers]
    expected = 12 + head_len + 3 * sum(sizes) * dt.itemsize
    if len(data) != expected:
        raise FormatError(
            f"blob length mismatch: header declares {expected - 12 - head_len} bytes, file holds {len(data) - 12 - head_len}",
            offset=min(len(data), expected),
        )
    offset = 12 + head_len
    groups = []
    for _ in range(3):
        g = OrderedDict()
        for layer, size in zip(layers, sizes):
            arr = np.frombuffer(data, dtype=dt, count=size, offset=offset).reshape(layer["shape"])
            g[layer["name"]] = torch.tensor(arr.copy(), dtype=tdtype)
            offset += size * dt.itemsize
        groups.append(g)
    buffers = {}
    for k, b in header["buffers"].items():
        dtype = torch.int64 if b["dtype"] == "int64" else tdtype
        buffers[k] = torch.tensor(b["data"], dtype=dtype).reshape(b["shape"])
    return Checkpoint(
        epoch=header["epoch"],
        config=config,
        params=groups[0],
        buffers=buffers,
        optimizer=OptimizerState(groups[1], groups[2], header["adam_step"]),
        rng_state=header["rng"],
        loss_history=header["loss_history"],
        train_config=header["train_config"],
        initialized=header["initialized"],
    )


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def checkpoint_path(directory, epoch: int) -> Path:
    return Path(directory) / f"epoch-{epoch:04d}.gfck"


# ---------------------------------------------------------------- training


def _batch_loss(model: FlowModel, batch: ImageBatch):
    y, logit_logdet = _as_model_input(model, batch)
    scale = 1.0 / (model.config.dims * math.log(2.0))
    offset = math.log2(model.config.quantization_levels)

    def loss(params):
        lp = _log_prob_from_input(model, params, y, logit_logdet, check=False)
        return -lp.mean() * scale + offset

    return loss


class TrainingDiverged(NumericError):
    """Raised when the loss becomes non-finite; ``last_good`` is the last finite checkpoint."""

    def __init__(self, message, last_good: Checkpoint | None, epoch: int, batch_index: int):
        super().__init__(message, where=f"epoch {epoch} batch {batch_index}")
        self.last_good = last_good
        self.epoch = epoch
        self.batch_index = batch_index


def train(
    model: FlowModel,
    data,
    cfg: TrainConfig,
    checkpoint_dir=None,
    resume: Checkpoint | None = None,
    on_epoch=None,
) -> list[Checkpoint]:
    """Minimize mean negative log-likelihood (in bits/dim) with Adam.

    ``data`` is an :class:`ImageBatch` or :class:`DatasetHandle` holding the
    training split. ActNorm is initialized on the first batch when needed.
    Returns the checkpoints taken at ``cfg.checkpoint_epochs`` (the last epoch
    always included); they are also written to ``checkpoint_dir`` if given.
    """
    cfg.validate()
    images = data.load() if isinstance(data, DatasetHandle) else data
    if images.image_shape != model.config.image_shape:
        raise ShapeError(f"training images {images.image_shape} do not match model {model.config.image_shape}")
    n = len(images)
    keep = set(cfg.resolved_checkpoint_epochs())
    if resume is not None:
        model.params = OrderedDict((k, v.clone()) for k, v in resume.params.items())
        model.initialized = resume.initialized
        state = OptimizerState(
            OrderedDict((k, v.clone()) for k, v in resume.optimizer.m.items()),
            OrderedDict((k, v.clone()) for k, v in resume.optimizer.v.items()),
            resume.optimizer.step,
        )
        history = list(resume.loss_history)
        start = resume.epoch
    else:
        state = OptimizerState.zeros_like(model.params)
        history = []
        start = 0
    checkpoints = []
    last_good = resume
    per_image = int(np.prod(images.image_shape))
    for epoch in range(start + 1, cfg.epochs + 1):
        rng = SeededRng(cfg.seed, epoch)
        order = rng.generator().permutation(n)
        total, count = 0.0, 0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            sub = images.subset(idx)
            noise = rng.substream(bi).generator().random((len(idx), per_image)).reshape(sub.pixels.shape)
            sub.values = (sub.pixels.astype(np.float64) + noise) / sub.levels
            if not model.initialized:
                actnorm_init(model, sub)
            grads, loss = grad_and_value(_batch_loss(model, sub))(model.params)
            loss_value = float(loss)
            if not math.isfinite(loss_value) or not all(torch.isfinite(g).all() for g in grads.values()):
                if checkpoint_dir is not None and last_good is not None:
                    save_checkpoint(last_good, Path(checkpoint_dir) / "last-good.gfck")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}", last_good, epoch, bi)
            grads, _ = clip_by_global_norm(grads, cfg.grad_clip_norm)
            # the loss is minimized, so Adam sees its gradient directly
            model.params, state = adam_step(model.params, grads, state, cfg)
            total += loss_value * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("epoch %d mean bpd %.4f", epoch, history[-1])
        ckpt = make_checkpoint(model, state, epoch, cfg, history)
        last_good = ckpt
        if epoch in keep:
            checkpoints.append(ckpt)
            if checkpoint_dir is not None:
                save_checkpoint(ckpt, checkpoint_path(checkpoint_dir, epoch))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return checkpoints
