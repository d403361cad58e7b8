"""Flat key = value experiment configs.

Grammar: UTF-8 text, one `key = value` pair per line, `#` starts a
comment line, blank lines ignored. Keys are dotted names from the schema
below; unknown keys are rejected. Values parse by the key's declared
type: ints, floats, true/false booleans, bare strings, and comma
separated lists. Optional keys read as absent when the value is empty.

A single master `seed` drives everything: data generation, partitioning,
model init, client sampling, and local training each hash it with a
purpose label (and round/client indices where relevant), so streams never
collide and adding a consumer never shifts existing draws.

`resolved_text` renders every key including defaults; writing it next to
a run's outputs gives a snapshot that reproduces the run exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from . import rng
from .client import LocalTrainConfig, RegularizerConfig
from .data import SynthConfig
from .model import ModelConfig
from .partitioner import ScenarioSpec
from .server import AGGREGATOR_KINDS, FLRunConfig

_UNSET = object()


@dataclass(frozen=True)
class KeySpec:
    kind: str
    default: object
    help: str


SCHEMA: dict[str, KeySpec] = {
    "seed": KeySpec("int", 0, "master seed; all streams derive from it"),
    "out_dir": KeySpec("str", "run", "output directory, relative paths live under $FEDMM_OUT"),
    "metric": KeySpec("str", "auto", "auto | roc_auc | macro_f1"),
    "prompt.agnostic": KeySpec("bool", True, "splice the modality-agnostic clause into prompts"),
    "data.source": KeySpec("str", "synth", "synth | manifest"),
    "data.train_manifest": KeySpec("opt_str", None, "train manifest path (manifest mode)"),
    "data.test_manifest": KeySpec("opt_str", None, "test manifest path (manifest mode)"),
    "synth.classes": KeySpec("int", 4, "class count"),
    "synth.modalities": KeySpec("str_list", ["image", "text"], "modality names"),
    "synth.dims": KeySpec("int_list", [16, 16], "per-modality feature dims"),
    "synth.samples_per_class": KeySpec("int", 50, "train samples per class"),
    "synth.test_samples_per_class": KeySpec("int", 100, "test samples per class"),
    "synth.centroid_scale": KeySpec("float", 3.0, "class centroid std"),
    "synth.noise_scale": KeySpec("float", 1.0, "per-sample noise std"),
    "scenario.kind": KeySpec("str", "aligned", "aligned | missing | cross | hybrid"),
    "scenario.clients": KeySpec("int", 10, "client count"),
    "scenario.alpha": KeySpec("float", 0.5, "Dirichlet concentration for label skew"),
    "scenario.beta": KeySpec("float", 0.5, "missing: per-slot drop probability"),
    "scenario.image_only_clients": KeySpec("int", 5, "cross: clients keeping only modality 0"),
    "scenario.keep_prob": KeySpec("float", 0.8, "hybrid: per-modality keep probability"),
    "model.hidden": KeySpec("int", 32, "hidden width"),
    "model.encoder_depth": KeySpec("int", 3, "tanh layers per modality encoder"),
    "model.trunk_depth": KeySpec("int", 4, "tanh layers after fusion"),
    "model.rank": KeySpec("int", 4, "adapter rank"),
    "model.adapter_alpha": KeySpec("float", 4.0, "adapter composition scale numerator"),
    "fl.rounds": KeySpec("int", 50, "federated rounds"),
    "fl.clients_per_round": KeySpec("int", 2, "clients sampled per round"),
    "fl.aggregator": KeySpec("str", "adam", " | ".join(AGGREGATOR_KINDS)),
    "fl.server_lr": KeySpec("opt_float", None, "server learning rate (empty: per-kind default)"),
    "fl.eval_every": KeySpec("int", 5, "evaluate every this many rounds"),
    "local.epochs": KeySpec("int", 1, "local epochs per round"),
    "local.batch_size": KeySpec("int", 16, "local minibatch size"),
    "local.lr": KeySpec("float", 1e-2, "local peak learning rate"),
    "local.warmup_ratio": KeySpec("float", 0.01, "fraction of local steps spent warming up"),
    "reg.enabled": KeySpec("bool", True, "adaptive proximal regularizer on/off"),
    "reg.gamma_max": KeySpec("float", 0.1, "proximal strength ceiling"),
    "reg.margin": KeySpec("int", 2, "depths masked off at each end"),
    "baseline.epochs": KeySpec("int", 5, "isolated-client baseline epochs"),
    "sweep.levels": KeySpec("float_list", [], "heterogeneity levels to sweep"),
    "sweep.aggregators": KeySpec("str_list", [], "aggregators to sweep"),
    "sweep.seeds": KeySpec("int_list", [], "master seeds to sweep (empty: just `seed`)"),
}


def parse_value(kind: str, text: str) -> object:
    text = text.strip()
    if kind.startswith("opt_") and text == "":
        return None
    if kind in ("opt_str", "str"):
        return text
    if kind in ("opt_int", "int"):
        return int(text)
    if kind in ("opt_float", "float"):
        return float(text)
    if kind == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind.endswith("_list"):
        if text == "":
            return []
        element = {"int_list": int, "float_list": float, "str_list": str}[kind]
        return [element(part.strip()) for part in text.split(",")]
    raise ValueError(f"unknown key kind {kind!r}")


def render_value(kind: str, value: object) -> str:
    if value is None:
        return ""
    if kind == "bool":
        return "true" if value else "false"
    if kind.endswith("_list"):
        return ",".join(render_value(kind.removesuffix("_list").replace("opt_", ""), v) for v in value)
    if kind in ("float", "opt_float"):
        return repr(float(value))
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{lineno}: expected `key = value`, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value.strip()
    return raw


@dataclass
class ExperimentConfig:
    """A fully resolved flat config; typed sub-configs derive on demand."""

    values: dict[str, object]

    @classmethod
    def from_sources(
        cls,
        config_path: str | Path | None = None,
        overrides: list[str] | None = None,
    ) -> "ExperimentConfig":
        raw: dict[str, str] = {}
        if config_path is not None:
            text = Path(config_path).read_text(encoding="utf-8")
            raw.update(parse_config_text(text, source=str(config_path)))
        for item in overrides or []:
            if "=" not in item:
                raise ValueError(f"--set needs key=value, got {item!r}")
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ValueError(f"--set: unknown key {key!r}")
            raw[key] = value.strip()
        values: dict[str, object] = {}
        for key, spec in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parse_value(spec.kind, raw[key])
                except ValueError as err:
                    raise ValueError(f"key {key!r}: {err}") from None
            else:
                values[key] = spec.default
        cfg = cls(values=values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    def validate(self) -> None:
        if self["data.source"] not in ("synth", "manifest"):
            raise ValueError(f"data.source must be synth or manifest, got {self['data.source']!r}")
        if self["data.source"] == "manifest":
            for key in ("data.train_manifest", "data.test_manifest"):
                if not self[key]:
                    raise ValueError(f"data.source=manifest requires {key}")
        if self["metric"] not in ("auto", "roc_auc", "macro_f1"):
            raise ValueError(f"metric must be auto/roc_auc/macro_f1, got {self['metric']!r}")
        self.scenario_spec().validate()
        self.local_config().validate()
        self.reg_config().validate()
        self.fl_config().validate()
        if self["data.source"] == "synth":
            self.synth_config().validate()

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def agnostic(self) -> bool:
        return bool(self.values["prompt.agnostic"])

    def out_dir(self) -> Path:
        configured = Path(str(self.values["out_dir"]))
        if configured.is_absolute():
            return configured
        root = Path(os.environ.get("FEDMM_OUT", "."))
        return root / configured

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            class_count=int(self["synth.classes"]),
            modalities=tuple(self["synth.modalities"]),
            dims=tuple(self["synth.dims"]),
            samples_per_class=int(self["synth.samples_per_class"]),
            centroid_scale=float(self["synth.centroid_scale"]),
            noise_scale=float(self["synth.noise_scale"]),
            seed=rng.seed_for(self.seed, "data"),
        )

    def scenario_spec(self) -> ScenarioSpec:
        kind = str(self["scenario.kind"])
        extras: dict[str, object] = {}
        if kind == "missing":
            extras["beta"] = float(self["scenario.beta"])
        elif kind == "cross":
            extras["image_only_clients"] = int(self["scenario.image_only_clients"])
        elif kind == "hybrid":
            extras["keep_prob"] = float(self["scenario.keep_prob"])
        return ScenarioSpec(
            kind=kind,
            clients=int(self["scenario.clients"]),
            alpha=float(self["scenario.alpha"]),
            seed=rng.seed_for(self.seed, "scenario"),
            **extras,
        )

    def model_config(self, modality_dims: tuple[int, ...], class_count: int) -> ModelConfig:
        return ModelConfig(
            modality_dims=modality_dims,
            hidden=int(self["model.hidden"]),
            encoder_depth=int(self["model.encoder_depth"]),
            trunk_depth=int(self["model.trunk_depth"]),
            class_count=class_count,
            rank=int(self["model.rank"]),
            adapter_alpha=float(self["model.adapter_alpha"]),
            seed=rng.seed_for(self.seed, "model"),
        )

    def local_config(self) -> LocalTrainConfig:
        return LocalTrainConfig(
            epochs=int(self["local.epochs"]),
            batch_size=int(self["local.batch_size"]),
            lr=float(self["local.lr"]),
            warmup_ratio=float(self["local.warmup_ratio"]),
        )

    def reg_config(self) -> RegularizerConfig:
        return RegularizerConfig(
            enabled=bool(self["reg.enabled"]),
            gamma_max=float(self["reg.gamma_max"]),
            margin=int(self["reg.margin"]),
        )

    def fl_config(self) -> FLRunConfig:
        return FLRunConfig(
            rounds=int(self["fl.rounds"]),
            clients_per_round=int(self["fl.clients_per_round"]),
            aggregator=str(self["fl.aggregator"]),
            local=self.local_config(),
            reg=self.reg_config(),
            server_lr=self["fl.server_lr"],
            eval_every=int(self["fl.eval_every"]),
            metric=str(self["metric"]),
            seed=rng.seed_for(self.seed, "fl"),
        )

    def with_values(self, updates: dict[str, object]) -> "ExperimentConfig":
        merged = dict(self.values)
        for key, value in updates.items():
            if key not in SCHEMA:
                raise ValueError(f"unknown key {key!r}")
            merged[key] = value
        cfg = ExperimentConfig(values=merged)
        cfg.validate()
        return cfg

    def resolved_text(self) -> str:
        lines = [f"{key} = {render_value(SCHEMA[key].kind, self.values[key])}" for key in sorted(SCHEMA)]
        return "\n".join(lines) + "\n"

    def write_snapshot(self, path: str | Path) -> None:
        Path(path).write_text(self.resolved_text(), encoding="utf-8")
