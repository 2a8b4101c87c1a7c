"""Command-line entry point: ``gradflow <command> ...``.

Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import zlib
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig
from .datasets import SyntheticSpec, idx_handle, make_splits, parse_data_spec, sample_eval_set, synthetic_handle
from .errors import GradflowError, NumericError
from .evaluation import (
    EvalSets,
    evaluate_checkpoint,
    histogram_filename,
    np_lemma_demo,
    read_distribution_pair,
    render_histogram_svg,
    evaluate_pair,
    sweep_report,
)
from .flow import build_model, sample
from .numerics import SeededRng
from .scoring import BASELINE, DIAGONAL, GaussianLayerStats, ScoreBatchSpec, estimate_fisher_diag, fit_stats, normalize_kind, score_dataset
from .training import TrainingDiverged, load_checkpoint, train

log = logging.getLogger("gradflow")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
OUTPUT_DIRS = ("checkpoints", "scores", "reports", "figures")
MODEL_STREAM = 0x0F10


class UsageError(GradflowError):
    pass


# ------------------------------------------------------------------ helpers


def _configure_threads() -> None:
    limit = os.environ.get("GRADFLOW_THREADS")
    if limit:
        try:
            torch.set_num_threads(max(1, int(limit)))
        except ValueError:
            raise UsageError(f"GRADFLOW_THREADS must be an integer, got {limit!r}") from None


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig.defaults()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value)
    return cfg


def synthetic_seed(cfg: ExperimentConfig, spec: SyntheticSpec) -> int:
    # a family tag always gets the same seed, whichever command or list position names it
    return cfg["data.seed"] + zlib.crc32(spec.tag().encode()) % 100_003


def dataset(cfg: ExperimentConfig, text: str):
    image_shape = cfg.flow_config().image_shape
    source = parse_data_spec(text, image_shape)
    if isinstance(source, SyntheticSpec):
        return synthetic_handle(source, cfg["data.size"], synthetic_seed(cfg, source))
    handle = idx_handle(source)
    if handle.load(np.arange(1)).image_shape != image_shape:
        raise UsageError(f"{text}: image shape does not match the model's {image_shape}")
    return handle


def splits(cfg: ExperimentConfig, text: str):
    return make_splits(dataset(cfg, text), cfg["data.split_fractions"], cfg["data.split_seed"])


def build_eval_sets(cfg: ExperimentConfig, id_text: str, ood_texts) -> EvalSets:
    n_eval = cfg["eval.n_eval"]
    _, id_fit, id_test = splits(cfg, id_text)
    id_eval = sample_eval_set(id_test, n_eval, cfg["eval.sample_seed"])
    fit_batch = id_eval if cfg["score.fit_equals_test"] else id_fit.load()
    oods = {}
    for text in ood_texts:
        _, _, ood_test = splits(cfg, text)
        oods[ood_test.name] = sample_eval_set(ood_test, n_eval, cfg["eval.sample_seed"])
    return EvalSets(id_test.name, fit_batch, id_eval, oods)


def _prepare_output(out: Path, cfg: ExperimentConfig) -> None:
    for sub in OUTPUT_DIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "resolved-config").write_text(cfg.to_text())


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.preset:
        cfg.set("flow.preset", args.preset)
    if args.data:
        cfg.set("data.id", args.data)
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["output_dir"] = args.out
    flow_cfg = cfg.flow_config()
    train_cfg = cfg.train_config()
    train_split, _, _ = splits(cfg, cfg["data.id"])
    images = train_split.load()
    out = Path(cfg["output_dir"])
    _prepare_output(out, cfg)
    model = build_model(flow_cfg, SeededRng(cfg["seed"], MODEL_STREAM))
    history = []

    try:
        checkpoints = train(
            model, images, train_cfg, checkpoint_dir=out / "checkpoints", on_epoch=lambda e, v: history.append((e, v))
        )
    except TrainingDiverged as exc:
        _write_loss(out, history)
        log.error("%s; last good checkpoint kept as checkpoints/last-good.gfck", exc)
        return EXIT_NUMERIC
    _write_loss(out, history)
    print(f"trained {train_cfg.epochs} epochs on {train_split.name} ({len(images)} images); "
          f"checkpoints at epochs {[c.epoch for c in checkpoints]} in {out / 'checkpoints'}")
    return EXIT_OK


def _write_loss(out: Path, history) -> None:
    lines = ["epoch;mean_bpd"] + [f"{e};{v!r}" for e, v in history]
    (out / "loss.csv").write_text("\n".join(lines) + "\n")


def cmd_score(args) -> int:
    cfg = resolve_config(args)
    if args.fit_equals_test:
        cfg["score.fit_equals_test"] = True
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.image_shape != cfg.flow_config().image_shape:
        cfg["flow.preset"] = _preset_for(ckpt.config)
    kind = normalize_kind(args.kind)
    spec = ScoreBatchSpec(b=args.b, seed=cfg["score.group_seed"], dequant_seed=cfg["score.dequant_seed"], layer_grouping=cfg["score.layer_grouping"])
    n_eval = args.n_eval if args.n_eval is not None else cfg["eval.n_eval"]
    _, _, test_split = splits(cfg, args.test_data)
    test = sample_eval_set(test_split, n_eval, cfg["eval.sample_seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats, fisher = None, None
    if kind != BASELINE:
        fit_batch = test if cfg["score.fit_equals_test"] else splits(cfg, args.fit_data or args.test_data)[1].load()
        if kind == DIAGONAL:
            fisher = estimate_fisher_diag(ckpt.model(), fit_batch.subset(np.arange(min(len(fit_batch), cfg["score.n_fit"]))), spec.dequant_seed)
        if args.stats:
            stats = GaussianLayerStats.load(args.stats)
        else:
            stats = fit_stats(ckpt, fit_batch, spec, kind, cfg["score.n_fit"], cfg["score.epsilon"], fisher)
            stats.save(out / f"stats-e{ckpt.epoch:04d}-b{spec.b}-{kind}.json")
    table = score_dataset(ckpt, stats, test, spec, kind, fisher, cfg["score.sigma_convention"], keep_layer_scores=args.layer_scores)
    path = out / f"scores-{test_split.name}-e{ckpt.epoch:04d}-b{spec.b}-{kind}.csv"
    path.write_text(table.to_csv(include_layers=args.layer_scores))
    print(f"{len(table.rows)} score rows written to {path}" + (f"; {table.dropped} leftover sample(s) dropped" if table.dropped else ""))
    return EXIT_OK


def _preset_for(config) -> str:
    from .flow import PRESETS

    for name, preset in PRESETS.items():
        if preset.image_shape == config.image_shape:
            return name
    raise UsageError(f"no preset matches checkpoint image shape {config.image_shape}")


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    sets = build_eval_sets(cfg, args.id or cfg["data.id"], args.ood or cfg["data.ood"])
    out = Path(args.out)
    _prepare_output(out, cfg)
    b_list = _int_list(args.b) if args.b else cfg["score.b_list"]
    kinds = args.kind or cfg["score.kinds"]
    reports = evaluate_checkpoint(
        ckpt, sets, b_list, kinds, cfg["score.n_fit"], cfg["score.epsilon"], cfg["eval.bins"],
        cfg["score.dequant_seed"], cfg["score.group_seed"], out / "scores",
    )
    lines = ["id;ood;epoch;b;kind;auroc;ovl;n_id;n_ood"]
    for r in reports:
        lines.append(f"{r.id_dataset};{r.ood_dataset};{r.checkpoint_epoch};{r.b};{r.kind};{r.auroc:.6f};{r.ovl:.6f};{r.n_id};{r.n_ood}")
        (out / "figures" / histogram_filename(r)).write_text(render_histogram_svg(r))
        print(f"{r.ood_dataset:>28s} b={r.b} {r.kind}: AUROC {r.auroc:.4f}  OVL {r.ovl:.4f}")
    (out / "reports" / f"eval-e{ckpt.epoch:04d}.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = Path(args.run)
    resolved = run / "resolved-config"
    cfg = ExperimentConfig.load(resolved) if resolved.is_file() and not args.config else resolve_config(args)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value)
    if args.fit_equals_test:
        cfg["score.fit_equals_test"] = True
    epochs = _int_list(args.epochs) if args.epochs else _default_sweep_epochs(cfg)
    sets = build_eval_sets(cfg, args.id or cfg["data.id"], args.ood or cfg["data.ood"])
    b_list = _int_list(args.b) if args.b else cfg["score.b_list"]
    kinds = args.kind or cfg["score.kinds"]
    table, _, missing = sweep_report(
        run, sets, epochs, b_list, kinds, cfg["score.n_fit"], cfg["score.epsilon"], cfg["eval.bins"],
        cfg["score.dequant_seed"], cfg["score.group_seed"], out_dir=args.out or run,
    )
    for r in table.rows:
        mark = "*" if r.is_max else " "
        print(f"{mark} {r.ood:>28s} e{r.epoch:<4d} b={r.b} {r.kind}: AUROC {r.auroc:.4f}  OVL {r.ovl:.4f}")
    if missing:
        log.error("missing checkpoints for epochs %s (skipped)", missing)
        return EXIT_USAGE
    return EXIT_OK


def _default_sweep_epochs(cfg: ExperimentConfig):
    return cfg.train_config().resolved_checkpoint_epochs()


def cmd_hist(args) -> int:
    id_scores = _read_score_column(args.id_scores)
    ood_scores = _read_score_column(args.ood_scores)
    report = evaluate_pair(args.id_name, args.ood_name, args.epoch, args.b, args.kind, id_scores, ood_scores, args.bins)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(render_histogram_svg(report))
    print(f"AUROC {report.auroc:.4f}  OVL {report.ovl:.4f} -> {args.out}")
    return EXIT_OK


def _read_score_column(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"score file not found: {path}")
    rows = path.read_text().splitlines()
    header = rows[0].split(";")
    if "score" not in header:
        raise UsageError(f"{path}: no 'score' column")
    col = header.index("score")
    return np.array([float(r.split(";")[col]) for r in rows[1:] if r.strip()])


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    batch = sample(model, args.n, args.temperature, SeededRng(args.seed, 0x5A3))
    write_image_grid(args.out, batch.pixels, ckpt.config.quantization_levels)
    print(f"{args.n} samples at temperature {args.temperature:g} written to {args.out}")
    return EXIT_OK


def write_image_grid(path, pixels: np.ndarray, levels: int = 256, pad: int = 1) -> None:
    """Tile (n, c, h, w) images into one binary PGM (c = 1) or PPM (c = 3)."""
    n, c, h, w = pixels.shape
    if c not in (1, 3):
        raise UsageError(f"cannot write {c}-channel images as PGM/PPM")
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.zeros((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    scale = 255.0 / (levels - 1)
    for k in range(n):
        r, q = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y : y + h, x : x + w] = np.rint(pixels[k] * scale).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = grid[0] if c == 1 else np.transpose(grid, (1, 2, 0))
    header = magic + f"\n{grid.shape[2]} {grid.shape[1]}\n255\n".encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + body.tobytes())


def cmd_npdemo(args) -> int:
    if args.pq:
        pair = read_distribution_pair(args.pq)
    elif args.p and args.q:
        pair = read_distribution_pair(args.p, args.q)
    else:
        raise UsageError("npdemo needs --pq FILE or both --p FILE and --q FILE")
    if not pair.overlapping:
        log.warning("P and Q have disjoint supports; both statistics separate perfectly")
    result = np_lemma_demo(pair)
    print(f"auc_true  (statistic P(x))      = {result.auc_true:.6f}")
    print(f"auc_ratio (statistic P(x)/Q(x)) = {result.auc_ratio:.6f}")
    print(f"normalizer C                    = {result.normalizer:.6f}")
    relation = ">" if result.auc_ratio > result.auc_true else ("=" if result.auc_ratio == result.auc_true else "<")
    print(f"auc_ratio {relation} auc_true")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradflow", description="Layer-wise gradient OOD scores for GLOW-style flows.")
    parser.add_argument("--version", action="version", version=f"gradflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        return p

    p = with_config(sub.add_parser("train", help="train a flow and write epoch checkpoints"))
    p.add_argument("--preset")
    p.add_argument("--data", help="ID data spec, e.g. synthetic:flat-blob or idx:train-images.idx")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("score", help="fit per-layer statistics and score a dataset"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fit-data", help="ID data whose fit split supplies the statistics")
    p.add_argument("--test-data", required=True)
    p.add_argument("--b", type=int, default=1)
    p.add_argument("--kind", default="gradient-aggregate")
    p.add_argument("--stats", help="reuse a stats JSON instead of fitting")
    p.add_argument("--n-eval", type=int)
    p.add_argument("--fit-equals-test", action="store_true")
    p.add_argument("--layer-scores", action="store_true", help="include per-layer scores in the CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = with_config(sub.add_parser("eval", help="AUROC/OVL of one checkpoint against OOD sets"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id")
    p.add_argument("--ood", nargs="+")
    p.add_argument("--b")
    p.add_argument("--kind", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("sweep", help="evaluate a run across checkpoint epochs"))
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--id")
    p.add_argument("--ood", nargs="+")
    p.add_argument("--epochs", help="comma-separated; default: the run's checkpoint epochs")
    p.add_argument("--b")
    p.add_argument("--kind", nargs="+")
    p.add_argument("--fit-equals-test", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("hist", help="overlaid ID/OOD histogram from two score CSVs")
    p.add_argument("--id-scores", required=True)
    p.add_argument("--ood-scores", required=True)
    p.add_argument("--id-name", default="ID")
    p.add_argument("--ood-name", default="OOD")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--b", type=int, default=1)
    p.add_argument("--kind", default="gradient-aggregate")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("sample", help="draw samples from a checkpoint into a PGM or PPM grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("npdemo", help="AUC of P(x) versus the likelihood ratio P(x)/Q(x)")
    p.add_argument("--pq", help="two-column text file: P Q per support point")
    p.add_argument("--p", help="one-column file with P")
    p.add_argument("--q", help="one-column file with Q")
    p.set_defaults(func=cmd_npdemo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _configure_threads()
        return args.func(args)
    except NumericError as exc:
        print(f"gradflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GradflowError, FileNotFoundError) as exc:
        print(f"gradflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
