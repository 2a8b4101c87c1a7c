"""Separability metrics and the epoch-sweep report.

Conventions: higher scores mean "more OOD"; AUROC counts tied ID/OOD pairs
as one half.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datasets import ImageBatch
from .errors import DomainError, InsufficientDataError
from .scoring import (
    BASELINE,
    DIAGONAL,
    GRADIENT,
    ScoreBatchSpec,
    estimate_fisher_diag,
    fit_stats,
    normalize_kind,
    score_dataset,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DEFAULT_BINS = 100

# Reference cells quoted for documentation; desk-scale runs do not reproduce them.
PUBLISHED_REFERENCE_CELLS = (
    {"id": "SVHN", "ood": "CelebA", "b": 1, "epoch": 10, "auroc": 0.9852, "fully_trained": 0.9377},
    {"id": "KMNIST", "ood": "FashionMNIST", "b": 1, "epoch": 30, "auroc": 0.7315, "fully_trained": 0.6737},
)
PUBLISHED_OVL_AUC = ({"epochs": 50, "ovl": 0.8357, "auc": 0.6310}, {"epochs": "full", "ovl": 0.8635, "auc": 0.5502})


def _scores(values, what) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InsufficientDataError(f"{what} is empty")
    if np.isnan(arr).any():
        raise DomainError(f"{what} contains NaN")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """P(ood score > id score) + 0.5 P(tie), by sorting and binary search."""
    ids = np.sort(_scores(id_scores, "id_scores"))
    ood = _scores(ood_scores, "ood_scores")
    below = np.searchsorted(ids, ood, side="left")
    at_or_below = np.searchsorted(ids, ood, side="right")
    # 2U = 2 * (#id < ood) + (#id == ood), kept in integers
    twice_u = int(below.sum()) + int(at_or_below.sum())
    return twice_u / (2 * len(ids) * len(ood))


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def histogram(scores, bins: int = DEFAULT_BINS, range: tuple | None = None) -> Histogram:
    """Uniform-width histogram; values outside ``range`` land in the end bins."""
    if bins < 1:
        raise DomainError("bins must be >= 1")
    values = _scores(scores, "scores")
    lo, hi = (float(values.min()), float(values.max())) if range is None else map(float, range)
    if hi < lo:
        raise DomainError(f"invalid histogram range ({lo}, {hi})")
    if hi == lo:
        # a single repeated value: all counts fall in the first bin
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(np.clip(values, lo, hi), bins=edges)
    return Histogram(counts.astype(np.int64), edges)


def shared_histograms(a, b, bins: int = DEFAULT_BINS):
    """Histograms of ``a`` and ``b`` over identical edges spanning both."""
    a = _scores(a, "first score set")
    b = _scores(b, "second score set")
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    return histogram(a, bins, (lo, hi)), histogram(b, bins, (lo, hi))


def overlap_of_pmfs(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(min(1.0, np.minimum(p, q).sum()))


def ovl(id_scores, ood_scores, bins: int = DEFAULT_BINS) -> float:
    """Overlap coefficient of two score samples on shared histogram bins.

    If every score in both sets is the same value the overlap is 1.0.
    """
    a = _scores(id_scores, "id_scores")
    b = _scores(ood_scores, "ood_scores")
    if min(a.min(), b.min()) == max(a.max(), b.max()):
        return 1.0
    ha, hb = shared_histograms(a, b, bins)
    return overlap_of_pmfs(ha.probabilities, hb.probabilities)


# --------------------------------------------------- Neyman-Pearson demo


@dataclass(frozen=True)
class DiscreteDistributionPair:
    p: tuple
    q: tuple

    def __post_init__(self):
        p = tuple(float(x) for x in self.p)
        q = tuple(float(x) for x in self.q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if len(p) != len(q) or not p:
            raise DomainError("P and Q must be non-empty and share one support")
        for name, d in (("P", p), ("Q", q)):
            if any(not math.isfinite(x) or x < 0 for x in d):
                raise DomainError(f"{name} has negative or non-finite entries")
            if abs(sum(d) - 1.0) > 1e-12:
                raise DomainError(f"{name} sums to {sum(d)!r}, not 1")

    @property
    def overlapping(self) -> bool:
        return any(a > 0 and b > 0 for a, b in zip(self.p, self.q))


@dataclass(frozen=True)
class NPDemoResult:
    auc_true: float
    auc_ratio: float
    normalizer: float


_INF = (1, Fraction(0))


def _ratio_key(p: float, q: float):
    # P > 0 with Q = 0 ranks above every finite ratio
    if q == 0:
        return _INF if p > 0 else (0, Fraction(0))
    return (0, Fraction(p) / Fraction(q))


def _exact_auc(keys, p, q) -> Fraction:
    total = Fraction(0)
    for i, wi in enumerate(p):
        if wi == 0:
            continue
        for j, wj in enumerate(q):
            if wj == 0:
                continue
            if keys[i] > keys[j]:
                total += Fraction(wi) * Fraction(wj)
            elif keys[i] == keys[j]:
                total += Fraction(wi) * Fraction(wj) / 2
    return total


def np_lemma_demo(pair: DiscreteDistributionPair) -> NPDemoResult:
    """AUC of separating x ~ P from y ~ Q using P(x) versus P(x)/Q(x).

    Both AUCs are exact enumerations over support pairs in rational
    arithmetic, so the ordering between them is never a rounding artifact.
    ``normalizer`` is the sum of P/Q over the points where both are positive.
    """
    p, q = pair.p, pair.q
    auc_true = _exact_auc([(0, Fraction(x)) for x in p], p, q)
    auc_ratio = _exact_auc([_ratio_key(a, b) for a, b in zip(p, q)], p, q)
    normalizer = sum(Fraction(a) / Fraction(b) for a, b in zip(p, q) if a > 0 and b > 0)
    return NPDemoResult(float(auc_true), float(auc_ratio), float(normalizer))


def read_distribution_pair(path_p, path_q=None) -> DiscreteDistributionPair:
    """Read P and Q from one two-column text file, or one column from each of two files."""

    def columns(path):
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(x) for x in line.replace(",", " ").split()])
        return rows

    if path_q is None:
        rows = columns(path_p)
        if any(len(r) != 2 for r in rows):
            raise DomainError(f"{path_p}: expected two columns (P, Q) per line")
        return DiscreteDistributionPair(tuple(r[0] for r in rows), tuple(r[1] for r in rows))
    p = [r[0] for r in columns(path_p)]
    q = [r[0] for r in columns(path_q)]
    return DiscreteDistributionPair(tuple(p), tuple(q))


# ----------------------------------------------------------------- reports


@dataclass
class EvalPairReport:
    id_dataset: str
    ood_dataset: str
    checkpoint_epoch: int
    b: int
    kind: str
    auroc: float
    ovl: float
    n_id: int
    n_ood: int
    edges: list = field(default_factory=list)
    counts_id: list = field(default_factory=list)
    counts_ood: list = field(default_factory=list)
    dropped_id: int = 0
    dropped_ood: int = 0


def evaluate_pair(id_name, ood_name, epoch, b, kind, id_scores, ood_scores, bins=DEFAULT_BINS, dropped=(0, 0)) -> EvalPairReport:
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    h_id, h_ood = shared_histograms(id_scores, ood_scores, bins)
    return EvalPairReport(
        id_name, ood_name, epoch, b, kind,
        auroc(id_scores, ood_scores), ovl(id_scores, ood_scores, bins),
        len(id_scores), len(ood_scores),
        [float(e) for e in h_id.edges], h_id.counts.tolist(), h_ood.counts.tolist(),
        dropped[0], dropped[1],
    )


@dataclass
class SweepRow:
    id: str
    ood: str
    epoch: int
    b: int
    kind: str
    auroc: float
    ovl: float
    n_id: int
    n_ood: int
    is_max: bool = False


@dataclass
class SweepTable:
    rows: list
    tied_groups: list = field(default_factory=list)

    CSV_COLUMNS = ("id", "ood", "epoch", "b", "kind", "auroc", "ovl", "n_id", "n_ood", "is_max")

    def mark_maxima(self) -> None:
        """Mark the best epoch per (id, ood, b, kind); every tied maximum is marked."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r.id, r.ood, r.b, r.kind), []).append(r)
        self.tied_groups = []
        for key, rows in groups.items():
            best = max(r.auroc for r in rows)
            winners = [r for r in rows if r.auroc == best]
            for r in rows:
                r.is_max = r.auroc == best
            if len(winners) > 1:
                self.tied_groups.append({"group": list(key), "epochs": [r.epoch for r in winners]})

    def lookup(self, id_name, ood_name, b, kind) -> dict:
        return {r.epoch: r for r in self.rows if (r.id, r.ood, r.b, r.kind) == (id_name, ood_name, b, kind)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=";", lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.id, r.ood, r.epoch, r.b, r.kind, f"{r.auroc:.6f}", f"{r.ovl:.6f}", r.n_id, r.n_ood, int(r.is_max)])
        return buf.getvalue()


def render_histogram_svg(report: EvalPairReport, width: int = 480, height: int = 300) -> str:
    """Two overlaid step histograms (ID, OOD) on shared axes, as a standalone SVG."""
    edges = np.asarray(report.edges)
    pid = np.asarray(report.counts_id, dtype=float) / max(1, sum(report.counts_id))
    pood = np.asarray(report.counts_ood, dtype=float) / max(1, sum(report.counts_ood))
    left, right, top, bottom = 50, 10, 30, 40
    pw, ph = width - left - right, height - top - bottom
    ymax = max(pid.max(), pood.max(), 1e-12)
    x0, x1 = edges[0], edges[-1]

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw if x1 > x0 else left

    def sy(v):
        return top + ph - v / ymax * ph

    def path(p):
        pts = [f"{sx(edges[0]):.2f},{sy(0):.2f}"]
        for k, v in enumerate(p):
            pts.append(f"{sx(edges[k]):.2f},{sy(v):.2f}")
            pts.append(f"{sx(edges[k + 1]):.2f},{sy(v):.2f}")
        pts.append(f"{sx(edges[-1]):.2f},{sy(0):.2f}")
        return " ".join(pts)

    title = f"{report.id_dataset} (ID) vs {report.ood_dataset} (OOD), epoch {report.checkpoint_epoch}, b={report.b}"
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" font-size="12" text-anchor="middle" font-family="sans-serif">{_xml(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<polyline points="{path(pid)}" fill="#1f77b4" fill-opacity="0.35" stroke="#1f77b4"/>',
        f'<polyline points="{path(pood)}" fill="#d62728" fill-opacity="0.35" stroke="#d62728"/>',
        f'<text x="{left}" y="{height - 22}" font-size="10" font-family="sans-serif">{x0:.4g}</text>',
        f'<text x="{left + pw}" y="{height - 22}" font-size="10" text-anchor="end" font-family="sans-serif">{x1:.4g}</text>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" font-size="11" text-anchor="middle" font-family="sans-serif">'
        f"{_xml(report.kind)} score (AUROC {report.auroc:.4f}, OVL {report.ovl:.4f})</text>",
        f'<text x="{left + pw - 4}" y="{top + 12}" font-size="10" text-anchor="end" fill="#1f77b4" font-family="sans-serif">ID n={report.n_id}</text>',
        f'<text x="{left + pw - 4}" y="{top + 26}" font-size="10" text-anchor="end" fill="#d62728" font-family="sans-serif">OOD n={report.n_ood}</text>',
        "</svg>",
    ]
    return "\n".join(lines) + "\n"


def _xml(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.]+", "-", text).strip("-")


def histogram_filename(report: EvalPairReport) -> str:
    return (
        f"hist-{_slug(report.id_dataset)}-vs-{_slug(report.ood_dataset)}"
        f"-e{report.checkpoint_epoch:04d}-b{report.b}-{report.kind}.svg"
    )


@dataclass
class EvalSets:
    """Materialized data for one sweep: the ID fit set and 1000-sample evaluation sets."""

    id_name: str
    id_fit: ImageBatch
    id_eval: ImageBatch
    ood_evals: dict


def evaluate_checkpoint(checkpoint, sets: EvalSets, b_list, kinds, n_fit, epsilon, bins, dequant_seed=0, group_seed=0, score_dir=None):
    """All (ood, b, kind) reports for one checkpoint; stats are refit from the ID fit set."""
    reports = []
    model = checkpoint.model()
    fisher = None
    for kind in kinds:
        kind = normalize_kind(kind)
        if kind == DIAGONAL and fisher is None:
            fisher = estimate_fisher_diag(model, sets.id_fit.subset(np.arange(min(len(sets.id_fit), n_fit))), dequant_seed)
        for b in b_list:
            spec = ScoreBatchSpec(b=b, seed=group_seed, dequant_seed=dequant_seed)
            stats = None
            if kind != BASELINE:
                stats = fit_stats(checkpoint, sets.id_fit, spec, kind, n_fit, epsilon, fisher)
            id_table = score_dataset(checkpoint, stats, sets.id_eval, spec, kind, fisher)
            if score_dir is not None:
                Path(score_dir, f"scores-{_slug(sets.id_name)}-e{checkpoint.epoch:04d}-b{b}-{kind}.csv").write_text(id_table.to_csv())
            for ood_name, ood_batch in sets.ood_evals.items():
                ood_table = score_dataset(checkpoint, stats, ood_batch, spec, kind, fisher)
                if score_dir is not None:
                    Path(score_dir, f"scores-{_slug(ood_name)}-e{checkpoint.epoch:04d}-b{b}-{kind}.csv").write_text(ood_table.to_csv())
                reports.append(
                    evaluate_pair(
                        sets.id_name, ood_name, checkpoint.epoch, b, kind,
                        id_table.scores, ood_table.scores, bins, (id_table.dropped, ood_table.dropped),
                    )
                )
    return reports


def sweep_report(
    run_dir,
    sets: EvalSets,
    epochs,
    b_list=(1, 5),
    kinds=(GRADIENT,),
    n_fit=1000,
    epsilon=1e-10,
    bins=DEFAULT_BINS,
    dequant_seed=0,
    group_seed=0,
    out_dir=None,
    write_svg=True,
):
    """Evaluate every requested checkpoint of a run and write the sweep outputs.

    Returns ``(table, reports, missing_epochs)``. Missing checkpoints are
    skipped and listed rather than aborting the sweep.
    """
    from .training import checkpoint_path, load_checkpoint

    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    reports_dir, figures_dir, scores_dir = out_dir / "reports", out_dir / "figures", out_dir / "scores"
    for d in (reports_dir, figures_dir, scores_dir):
        d.mkdir(parents=True, exist_ok=True)
    reports, missing = [], []
    for epoch in epochs:
        path = checkpoint_path(run_dir / "checkpoints", epoch)
        if not path.is_file():
            log.error("missing checkpoint for epoch %d: %s", epoch, path)
            missing.append(epoch)
            continue
        ckpt = load_checkpoint(path)
        reports.extend(evaluate_checkpoint(ckpt, sets, b_list, kinds, n_fit, epsilon, bins, dequant_seed, group_seed, scores_dir))
    order = {k: i for i, k in enumerate(normalize_kind(k) for k in kinds)}
    reports.sort(key=lambda r: (r.ood_dataset, order[r.kind], r.b, r.checkpoint_epoch))
    table = SweepTable([SweepRow(r.id_dataset, r.ood_dataset, r.checkpoint_epoch, r.b, r.kind, r.auroc, r.ovl, r.n_id, r.n_ood) for r in reports])
    table.mark_maxima()
    (reports_dir / "sweep.csv").write_text(table.to_csv())
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "rows": [asdict(r) for r in table.rows],
        "tied_maxima": table.tied_groups,
        "missing_epochs": missing,
        "pairs": [asdict(r) for r in reports],
        "published_reference": {"cells": list(PUBLISHED_REFERENCE_CELLS), "ovl_auc": list(PUBLISHED_OVL_AUC)},
    }
    (reports_dir / "sweep.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    if write_svg:
        for r in reports:
            (figures_dir / histogram_filename(r)).write_text(render_histogram_svg(r))
    return table, reports, missing
