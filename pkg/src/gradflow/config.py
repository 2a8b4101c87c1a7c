"""Flat, typed ``key = value`` experiment configuration.

Each key has a declared type and default (see ``KEYS``). Lines starting with
``#`` are comments. Lists are comma-separated; the OOD dataset list uses
``|`` because dataset specs themselves contain commas. ``none`` clears an
optional value. The resolved configuration is written back in the same
format, one key per line in sorted order, so it can be diffed and reused.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .flow import PRESETS, FlowConfig
from .training import PRESET_TRAINING, TrainConfig


@dataclass(frozen=True)
class Key:
    type: str
    default: object
    doc: str


KEYS = {
    "seed": Key("int", 0, "model initialization and training RNG seed"),
    "output_dir": Key("str", "runs/default", "root of checkpoints/, scores/, reports/, figures/"),
    "flow.preset": Key("str", "glow-desk", f"one of {sorted(PRESETS)}"),
    "flow.blocks": Key("int?", None, "override the preset's block count"),
    "flow.steps_per_block": Key("int?", None, "override the preset's steps per block"),
    "flow.hidden_channels": Key("int?", None, "override the preset's coupling width"),
    "flow.coupling_kind": Key("str?", None, "convolutional | dense"),
    "flow.scale_clamp": Key("float", 2.0, "coupling log-scale bound s_max"),
    "flow.logit_alpha": Key("float", 0.05, "logit preprocessing margin"),
    "flow.precision": Key("str", "float32", "float32 | float64"),
    "train.batch_size": Key("int?", None, "images per Adam step; none = preset default"),
    "train.learning_rate": Key("float?", None, "Adam step size; none = preset default"),
    "train.weight_decay": Key("float?", None, "decoupled weight decay; none = preset default"),
    "train.epochs": Key("int?", None, "number of epochs; none = preset default"),
    "train.checkpoint_epochs": Key("int-list?", None, "epochs to checkpoint; none = 1,10,20,30,40,50,70,80,100,150 within range"),
    "train.grad_clip_norm": Key("float?", 50.0, "global gradient-norm clip; none disables"),
    "train.beta1": Key("float", 0.9, "Adam beta1"),
    "train.beta2": Key("float", 0.999, "Adam beta2"),
    "train.eps_adam": Key("float", 1e-8, "Adam epsilon"),
    "data.id": Key("str", "synthetic:flat-blob", "ID data: synthetic:<family>[:k=v,...] or idx:<path>"),
    "data.ood": Key("str-list", ["synthetic:white-noise"], "OOD data specs separated by |"),
    "data.size": Key("int", 8000, "length of each synthetic dataset"),
    "data.seed": Key("int", 0, "synthetic generation base seed; each family tag adds a fixed offset"),
    "data.split_fractions": Key("float-list", [0.5, 0.25, 0.25], "train, fit, test fractions"),
    "data.split_seed": Key("int", 0, "split permutation seed"),
    "score.b_list": Key("int-list", [1, 5], "group sizes"),
    "score.kinds": Key("str-list", ["gradient-aggregate"], "gradient-aggregate | negative-bpd-baseline | diagonal-preconditioned"),
    "score.epsilon": Key("float", 1e-10, "stability constant in the aggregate score"),
    "score.n_fit": Key("int", 1000, "score observations used for the per-layer fit"),
    "score.sigma_convention": Key("str", "variance", "variance | squared"),
    "score.group_seed": Key("int", 0, "shuffle seed for forming groups"),
    "score.dequant_seed": Key("int", 0, "dequantization noise seed during scoring"),
    "score.fit_equals_test": Key("bool", False, "fit statistics on the evaluation samples themselves"),
    "score.layer_grouping": Key("str", "tensor", "tensor | sublayer"),
    "eval.bins": Key("int", 100, "histogram bins for OVL and figures"),
    "eval.n_eval": Key("int", 1000, "samples drawn per dataset for evaluation"),
    "eval.sample_seed": Key("int", 0, "seed for drawing evaluation samples"),
}


def parse_value(key: str, text: str):
    spec = KEYS[key]
    text = text.strip()
    base = spec.type.rstrip("?")
    if spec.type.endswith("?") and text.lower() == "none":
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if base == "str":
            return text
        if base == "int-list":
            return [int(x) for x in text.split(",") if x.strip()]
        if base == "float-list":
            return [float(x) for x in text.split(",") if x.strip()]
        if base == "str-list":
            return [x.strip() for x in text.split("|") if x.strip()]
    except ValueError:
        raise ConfigurationError(f"config key {key}: cannot parse {text!r} as {spec.type}") from None
    raise AssertionError(base)


def format_value(key: str, value) -> str:
    if value is None:
        return "none"
    base = KEYS[key].type.rstrip("?")
    if base == "bool":
        return "true" if value else "false"
    if base in ("int-list", "float-list"):
        return ",".join(repr(v) for v in value)
    if base == "str-list":
        return " | ".join(value)
    return repr(value) if base == "float" else str(value)


class ExperimentConfig(dict):
    """Mapping of every known key to its resolved value."""

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({k: (list(v.default) if isinstance(v.default, list) else v.default) for k, v in KEYS.items()})

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        cfg = cls.defaults()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def set(self, key: str, text: str) -> None:
        if key not in KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        self[key] = parse_value(key, text)

    def to_text(self) -> str:
        lines = ["# gradflow resolved configuration"]
        lines += [f"{k} = {format_value(k, self[k])}" for k in sorted(self)]
        return "\n".join(lines) + "\n"

    def flow_config(self) -> FlowConfig:
        preset = self["flow.preset"]
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; known presets: {sorted(PRESETS)}")
        d = PRESETS[preset].to_dict()
        for field in ("blocks", "steps_per_block", "hidden_channels", "coupling_kind"):
            if self[f"flow.{field}"] is not None:
                d[field] = self[f"flow.{field}"]
        d["scale_clamp"] = self["flow.scale_clamp"]
        d["logit_alpha"] = self["flow.logit_alpha"]
        d["precision"] = self["flow.precision"]
        cfg = FlowConfig.from_dict(d)
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        ce = self["train.checkpoint_epochs"]
        preset = PRESET_TRAINING.get(self["flow.preset"], PRESET_TRAINING["glow-desk"])
        pick = {k: preset[k] if self[f"train.{k}"] is None else self[f"train.{k}"] for k in preset}
        cfg = TrainConfig(
            **pick,
            checkpoint_epochs=None if ce is None else tuple(ce),
            seed=self["seed"],
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            eps_adam=self["train.eps_adam"],
            grad_clip_norm=self["train.grad_clip_norm"],
        )
        cfg.validate()
        return cfg
