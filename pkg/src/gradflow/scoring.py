"""Layer-wise gradient-norm OOD scores.

For a group of ``b`` images the score of layer ``l`` is the log squared
Euclidean norm of the gradient of the group's summed log-likelihood with
respect to that layer's parameters. Per-layer normal fits on held-out ID data
turn a score vector into a single Gaussian negative log-likelihood, which is
the OOD score (higher = more out-of-distribution).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasets import ImageBatch
from .errors import ConfigurationError, ConsistencyError, InsufficientDataError, NumericError
from .flow import FlowModel, _as_model_input, bpd, forward_log_prob, group_gradients, layer_groups
from .numerics import LOG_2PI, SeededRng, column_moments

log = logging.getLogger(__name__)

GRADIENT = "gradient-aggregate"
BASELINE = "negative-bpd-baseline"
DIAGONAL = "diagonal-preconditioned"
KINDS = (GRADIENT, BASELINE, DIAGONAL)
STUDIED_BATCH_SIZES = (1, 5)

DEFAULT_EPSILON = 1e-10
NORM_FLOOR = 1e-30
FISHER_FLOOR = 1e-8
DEFAULT_N_FIT = 1000


def normalize_kind(kind: str) -> str:
    aliases = {"gradient": GRADIENT, "nll-baseline": BASELINE, "bpd": BASELINE, "diagonal": DIAGONAL}
    kind = aliases.get(kind, kind)
    if kind not in KINDS:
        raise ConfigurationError(f"unknown score kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class ScoreBatchSpec:
    """How samples are grouped: seeded shuffle, then disjoint consecutive groups of ``b``."""

    b: int = 1
    seed: int = 0
    dequant_seed: int = 0
    layer_grouping: str = "tensor"

    def __post_init__(self):
        if self.b < 1:
            raise ConfigurationError("group size b must be >= 1")

    @property
    def studied_setting(self) -> bool:
        return self.b in STUDIED_BATCH_SIZES

    def groups(self, n: int) -> tuple[list[np.ndarray], int]:
        """Positions of each group and the number of leftover samples dropped."""
        if self.b == 1:
            order = np.arange(n)
        else:
            order = SeededRng(self.seed, 0x6B0F).generator().permutation(n)
        full = n // self.b
        groups = [order[i * self.b : (i + 1) * self.b] for i in range(full)]
        return groups, n - full * self.b


@dataclass
class LayerScoreVector:
    values: np.ndarray
    checkpoint_id: str = ""
    member_ids: tuple = ()

    def __len__(self):
        return len(self.values)


@dataclass
class GaussianLayerStats:
    mean: np.ndarray
    variance: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    n_fit: int = 0
    b: int = 1
    checkpoint_id: str = ""
    kind: str = GRADIENT

    def to_json(self) -> str:
        payload = {
            "b": self.b,
            "checkpoint_hash": self.checkpoint_id,
            "epsilon": self.epsilon,
            "kind": self.kind,
            "mu": [float(x) for x in self.mean],
            "n_fit": self.n_fit,
            "sigma2": [float(x) for x in self.variance],
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GaussianLayerStats":
        d = json.loads(text)
        return cls(
            np.asarray(d["mu"], dtype=np.float64),
            np.asarray(d["sigma2"], dtype=np.float64),
            float(d["epsilon"]),
            int(d["n_fit"]),
            int(d["b"]),
            d["checkpoint_hash"],
            d.get("kind", GRADIENT),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GaussianLayerStats":
        return cls.from_json(Path(path).read_text())


@dataclass
class OODScore:
    value: float
    kind: str
    contributions: np.ndarray | None = None


# ------------------------------------------------------------ layer scores


def _squared_norms(model: FlowModel, grads: "OrderedDict[str, torch.Tensor]", fisher_diag=None, grouping="tensor"):
    """(G, L) matrix of per-layer squared (optionally Fisher-weighted) gradient norms."""
    names = list(model.params)
    cols = []
    for name in names:
        g = grads[name].double()
        sq = g * g
        if fisher_diag is not None:
            sq = sq / fisher_diag[name].double()
        cols.append(sq.reshape(sq.shape[0], -1).sum(dim=1))
    per_tensor = torch.stack(cols, dim=1).numpy()
    bad = ~np.isfinite(per_tensor)
    if bad.any():
        layer = names[int(np.argwhere(bad)[0, 1])]
        raise NumericError(f"non-finite gradient in layer {layer}", where=layer)
    if grouping == "tensor":
        return per_tensor
    return np.stack([per_tensor[:, idx].sum(axis=1) for idx in layer_groups(model, grouping)], axis=1)


def _log_floor(sq: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(sq, NORM_FLOOR))


def _model_input(model: FlowModel, batch: ImageBatch, dequant_seed: int):
    y, _ = _as_model_input(model, batch, SeededRng(dequant_seed, 0xDE0))
    return y


def layer_score_matrix(
    model: FlowModel,
    batch: ImageBatch,
    groups: list[np.ndarray],
    dequant_seed: int = 0,
    fisher_diag=None,
    grouping: str = "tensor",
) -> np.ndarray:
    """Scores for many groups at once: row i is the layer-score vector of ``groups[i]``."""
    if not groups:
        raise InsufficientDataError("no complete groups to score")
    y = _model_input(model, batch, dequant_seed)
    idx = torch.as_tensor(np.stack(groups))
    grads = group_gradients(model, y[idx])
    return _log_floor(_squared_norms(model, grads, fisher_diag, grouping))


def layer_scores(model: FlowModel, group: ImageBatch, dequant_seed: int = 0, grouping: str = "tensor") -> LayerScoreVector:
    """Layer-score vector of one group (all images of ``group`` summed)."""
    values = layer_score_matrix(model, group, [np.arange(len(group))], dequant_seed, None, grouping)[0]
    return LayerScoreVector(values, model.source_id, tuple(int(i) for i in group.ids))


def estimate_fisher_diag(model: FlowModel, batch: ImageBatch, dequant_seed: int = 0) -> "OrderedDict[str, torch.Tensor]":
    """Running mean of per-sample squared gradients, floored at ``FISHER_FLOOR``."""
    y = _model_input(model, batch, dequant_seed)
    grads = group_gradients(model, y.unsqueeze(1))
    return OrderedDict((k, torch.clamp((g.double() ** 2).mean(dim=0), min=FISHER_FLOOR)) for k, g in grads.items())


def diagonal_preconditioned_scores(
    model: FlowModel, group: ImageBatch, fisher_diag, dequant_seed: int = 0, grouping: str = "tensor"
) -> LayerScoreVector:
    if list(fisher_diag) != list(model.params) or any(
        tuple(fisher_diag[k].shape) != tuple(v.shape) for k, v in model.params.items()
    ):
        raise ConsistencyError("fisher_diag does not match the model's parameter groups")
    values = layer_score_matrix(model, group, [np.arange(len(group))], dequant_seed, fisher_diag, grouping)[0]
    return LayerScoreVector(values, model.source_id, tuple(int(i) for i in group.ids))


# --------------------------------------------------------- gaussian fitting


def fit_layer_gaussians(
    vectors, epsilon: float = DEFAULT_EPSILON, b: int = 1, kind: str = GRADIENT, ddof: int = 0
) -> GaussianLayerStats:
    """Independent per-layer normal fit (mean, population variance by default)."""
    vectors = list(vectors)
    if len(vectors) < 2:
        raise InsufficientDataError(f"need at least 2 score vectors to fit, got {len(vectors)}")
    ids = {v.checkpoint_id for v in vectors}
    if len(ids) > 1:
        raise ConsistencyError(f"score vectors come from different checkpoints: {sorted(ids)}")
    lengths = {len(v) for v in vectors}
    if len(lengths) > 1:
        raise ConsistencyError(f"score vectors have different lengths: {sorted(lengths)}")
    mean, var = column_moments(np.stack([v.values for v in vectors]), ddof=ddof)
    return GaussianLayerStats(mean, var, epsilon, len(vectors), b, ids.pop(), kind)


def aggregate_score(v: LayerScoreVector, stats: GaussianLayerStats, sigma_convention: str = "variance") -> OODScore:
    """Gaussian negative log-likelihood of a layer-score vector under ``stats``.

    ``sigma_convention="variance"`` uses the fitted variance directly as the
    squared scale; ``"squared"`` squares it first.
    """
    if len(v) != len(stats.mean):
        raise ConsistencyError(f"score vector has {len(v)} layers, stats have {len(stats.mean)}")
    if stats.checkpoint_id and v.checkpoint_id and stats.checkpoint_id != v.checkpoint_id:
        raise ConsistencyError("score vector and stats come from different checkpoints")
    contributions = _nll_terms(np.asarray(v.values)[None, :], stats, sigma_convention)[0]
    return OODScore(float(contributions.sum()), stats.kind, contributions)


def _nll_terms(values: np.ndarray, stats: GaussianLayerStats, sigma_convention: str = "variance") -> np.ndarray:
    if sigma_convention == "variance":
        scale2 = stats.variance + stats.epsilon
    elif sigma_convention == "squared":
        scale2 = stats.variance**2 + stats.epsilon
    else:
        raise ConfigurationError(f"unknown sigma convention {sigma_convention!r}")
    return 0.5 * ((values - stats.mean) ** 2 / scale2 + np.log(2.0 * math.pi * scale2))


@dataclass(frozen=True)
class Threshold:
    value: float
    provenance: str


def quantile_threshold(id_scores, q: float = 0.95) -> Threshold:
    value = float(np.quantile(np.asarray(id_scores, dtype=np.float64), q))
    return Threshold(value, f"{q:g}-quantile of {len(id_scores)} ID scores")


def classify(score, threshold) -> str:
    """'OOD' iff the score exceeds the threshold, else 'ID'."""
    value = score.value if isinstance(score, OODScore) else float(score)
    limit = threshold.value if isinstance(threshold, Threshold) else float(threshold)
    return "OOD" if value > limit else "ID"


def nll_baseline_score(model: FlowModel, x: ImageBatch, dequant_seed: int = 0) -> OODScore:
    """Bits per dimension of a single image (higher = less likely)."""
    if len(x) != 1:
        raise ConfigurationError("nll_baseline_score scores exactly one image")
    result = forward_log_prob(model, x, SeededRng(dequant_seed, 0xDE0))
    value = float(bpd(result.per_sample_log_prob[0], model.config.dims, model.config.quantization_levels))
    return OODScore(value, BASELINE)


# ------------------------------------------------------ whole-dataset runs


@dataclass
class ScoreRow:
    sample_ids: tuple
    checkpoint_epoch: int
    kind: str
    b: int
    score: float
    layer_scores: np.ndarray | None = None


@dataclass
class ScoreTable:
    rows: list
    dropped: int = 0
    kind: str = GRADIENT
    b: int = 1

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.rows], dtype=np.float64)

    def to_csv(self, include_layers: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=";", lineterminator="\n")
        w.writerow(["sample_ids", "checkpoint_epoch", "kind", "b", "score", "layer_scores"])
        for r in self.rows:
            layers = ""
            if include_layers and r.layer_scores is not None:
                layers = json.dumps([float(x) for x in r.layer_scores])
            w.writerow([",".join(str(i) for i in r.sample_ids), r.checkpoint_epoch, r.kind, r.b, repr(float(r.score)), layers])
        return buf.getvalue()


def _resolve_model(checkpoint):
    if isinstance(checkpoint, FlowModel):
        return checkpoint, -1
    return checkpoint.model(), checkpoint.epoch


def fit_stats(
    checkpoint,
    fit_data: ImageBatch,
    spec: ScoreBatchSpec,
    kind: str = GRADIENT,
    n_fit: int = DEFAULT_N_FIT,
    epsilon: float = DEFAULT_EPSILON,
    fisher_diag=None,
    ddof: int = 0,
) -> GaussianLayerStats:
    """Fit per-layer Gaussians on up to ``n_fit`` groups of held-out ID data."""
    kind = normalize_kind(kind)
    if kind == BASELINE:
        raise ConfigurationError("the negative-BPD baseline needs no fitted statistics")
    model, _ = _resolve_model(checkpoint)
    groups, _ = spec.groups(len(fit_data))
    groups = groups[:n_fit]
    if len(groups) < n_fit:
        log.warning("fit set yields %d groups of b=%d, fewer than requested n_fit=%d", len(groups), spec.b, n_fit)
    if kind == DIAGONAL and fisher_diag is None:
        raise ConfigurationError("diagonal-preconditioned scoring needs fisher_diag")
    matrix = layer_score_matrix(model, fit_data, groups, spec.dequant_seed, fisher_diag if kind == DIAGONAL else None, spec.layer_grouping)
    vectors = [LayerScoreVector(row, model.source_id) for row in matrix]
    return fit_layer_gaussians(vectors, epsilon, spec.b, kind, ddof)


def score_dataset(
    checkpoint,
    stats: GaussianLayerStats | None,
    data: ImageBatch,
    spec: ScoreBatchSpec,
    kind: str = GRADIENT,
    fisher_diag=None,
    sigma_convention: str = "variance",
    keep_layer_scores: bool = False,
) -> ScoreTable:
    """Score every complete group of ``data``; the model is only read, never updated."""
    kind = normalize_kind(kind)
    model, epoch = _resolve_model(checkpoint)
    groups, dropped = spec.groups(len(data))
    if dropped:
        log.info("b=%d grouping of %d samples drops %d leftover sample(s)", spec.b, len(data), dropped)
    if not spec.studied_setting:
        log.warning("group size b=%d is outside the studied settings %s", spec.b, STUDIED_BATCH_SIZES)
    ids = data.ids
    rows = []
    if kind == BASELINE:
        result = forward_log_prob(model, data, SeededRng(spec.dequant_seed, 0xDE0))
        per_sample = bpd(result.per_sample_log_prob, model.config.dims, model.config.quantization_levels)
        for g in groups:
            # groups of b > 1 are scored by their mean bits/dim
            rows.append(ScoreRow(tuple(int(i) for i in ids[g]), epoch, kind, spec.b, float(np.mean(per_sample[g]))))
        return ScoreTable(rows, dropped, kind, spec.b)
    if stats is None:
        raise ConfigurationError(f"{kind} scoring needs fitted statistics")
    if stats.checkpoint_id != model.source_id:
        raise ConsistencyError(
            f"stats were fitted on checkpoint {stats.checkpoint_id}, but scoring checkpoint {model.source_id}"
        )
    if stats.b != spec.b:
        raise ConsistencyError(f"stats were fitted with b={stats.b}, scoring uses b={spec.b}")
    if stats.kind != kind:
        raise ConsistencyError(f"stats are for kind {stats.kind}, scoring kind {kind}")
    if kind == DIAGONAL and fisher_diag is None:
        raise ConfigurationError("diagonal-preconditioned scoring needs fisher_diag")
    matrix = layer_score_matrix(model, data, groups, spec.dequant_seed, fisher_diag if kind == DIAGONAL else None, spec.layer_grouping)
    if matrix.shape[1] != len(stats.mean):
        raise ConsistencyError(f"model has {matrix.shape[1]} scored layers, stats have {len(stats.mean)}")
    totals = _nll_terms(matrix, stats, sigma_convention).sum(axis=1)
    for g, total, row in zip(groups, totals, matrix):
        rows.append(ScoreRow(tuple(int(i) for i in ids[g]), epoch, kind, spec.b, float(total), row if keep_layer_scores else None))
    return ScoreTable(rows, dropped, kind, spec.b)
