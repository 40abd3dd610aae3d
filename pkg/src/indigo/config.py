"""Experiment configuration: namespaced keys, presets and validation.

Config files are TOML. Keys are namespaced (``loss.lambda``, ``fusion.K``);
they may be written as dotted keys or as tables. Unknown keys and type
mismatches are errors that name the key.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoders import BundleConfig, StubConfig, VisualPretrainConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .objectives import LossConfig
from .pipelines import PipelineSpec, ViTConfig

PRESETS = ("desk", "paper-scale")
SELECTIONS = ("train_domain_val", "test_domain_val")
SETTINGS = ("closed", "open")

DESK_DEFAULTS: dict[str, Any] = {
    "pipeline.kind": "indigo",
    "pipeline.loss_mode": "cls",
    "pipeline.finetune_mvit": "frozen",
    "fusion.K": 3,
    "fusion.heads": 6,
    "fusion.token_dim": 96,
    "fusion.mechanism": "msa",
    "loss.lambda": 1.0,
    "loss.distill_temperature": 3.0,
    "loss.distill_alpha": 0.5,
    "loss.normalize_prompts": False,
    "optim.lr_visual": 1e-3,
    "optim.lr_fusion": 5e-3,
    "optim.weight_decay": 5e-5,
    "optim.momentum": 0.9,
    "optim.nesterov": True,
    "schedule.epochs": 10,
    "schedule.drop_epoch": 6,
    "schedule.drop_factor": 0.1,
    "train.batch_size": 32,
    "protocol.seeds": [0, 1, 2, 3, 4],
    "protocol.data_fraction": 1.0,
    "protocol.selection": "train_domain_val",
    "protocol.val_fraction": 0.2,
    "protocol.setting": "closed",
    "protocol.sources": [],
    "protocol.targets": [],
    "data.root": "",
    "data.C": 8,
    "data.D": 4,
    "data.n_per_cell": 60,
    "data.image_size": 16,
    "data.channels": 3,
    "data.seed": 0,
    "data.style_seed": 0,
    "visual.patch_size": 4,
    "visual.dim": 64,
    "visual.depth": 4,
    "visual.heads": 4,
    "visual.pretrain": True,
    "visual.pretrain_steps": 6000,
    "visual.pretrain_n": 4000,
    "visual.pretrain_lr": 1e-3,
    "visual.pretrain_seed": 123,
    "stub.dim": 64,
    "stub.depth": 2,
    "stub.heads": 4,
    "stub.embed_dim": 32,
    "stub.text_dim": 32,
    "stub.steps": 2000,
    "stub.batch_size": 64,
    "stub.optimizer": "adam",
    "stub.lr": 1e-3,
    "stub.class_only_captions": 0.5,
    "stub.seed": 0,
    "stub.D": 8,
    "stub.n_per_cell": 20,
    "stub.data_seed": 1000,
}

PAPER_OVERRIDES: dict[str, Any] = {
    "fusion.token_dim": 384,
    "train.batch_size": 240,
    "data.image_size": 224,
    "data.C": 16,
    "visual.patch_size": 16,
    "visual.dim": 384,
    "visual.depth": 12,
    "visual.heads": 6,
    "stub.dim": 768,
    "stub.depth": 12,
    "stub.heads": 12,
    "stub.embed_dim": 512,
    "stub.text_dim": 512,
}


def preset_defaults(preset: str) -> dict[str, Any]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    values = copy.deepcopy(DESK_DEFAULTS)
    if preset == "paper-scale":
        values.update(PAPER_OVERRIDES)
    return values


def _flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _check_type(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if key == "protocol.seeds" and not all(isinstance(s, int) and not isinstance(s, bool) for s in value):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
        if key in ("protocol.sources", "protocol.targets") and not all(isinstance(s, str) for s in value):
            raise ConfigError(f"{key}: expected a list of domain names, got {value!r}")
        return list(value)
    return value


@dataclass
class ExperimentConfig:
    """Flat, fully populated key -> value map plus typed views onto it."""

    values: dict[str, Any] = field(default_factory=lambda: preset_defaults("desk"))
    preset: str = "desk"

    def __post_init__(self):
        self.validate()

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **updates: Any) -> "ExperimentConfig":
        """Copy with dotted-key updates; pass them as ``**{"loss.lambda": 0.5}``."""
        values = copy.deepcopy(self.values)
        for k, v in updates.items():
            if k not in values:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = _check_type(k, v, DESK_DEFAULTS[k])
        return ExperimentConfig(values, self.preset)

    def validate(self) -> None:
        v = self.values
        unknown = set(v) - set(DESK_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        missing = set(DESK_DEFAULTS) - set(v)
        if missing:
            raise ConfigError(f"missing config key {sorted(missing)[0]!r}")
        if not 0.0 <= v["loss.lambda"] <= 1.0:
            raise ConfigError(f"loss.lambda must lie in [0, 1], got {v['loss.lambda']}")
        if not 0.0 < v["protocol.data_fraction"] <= 1.0:
            raise ConfigError(f"protocol.data_fraction must lie in (0, 1], got {v['protocol.data_fraction']}")
        if not 0.0 < v["protocol.val_fraction"] < 1.0:
            raise ConfigError(f"protocol.val_fraction must lie in (0, 1), got {v['protocol.val_fraction']}")
        if not v["protocol.seeds"]:
            raise ConfigError("protocol.seeds must be nonempty")
        if v["protocol.selection"] not in SELECTIONS:
            raise ConfigError(f"protocol.selection must be one of {SELECTIONS}, got {v['protocol.selection']!r}")
        if v["protocol.setting"] not in SETTINGS:
            raise ConfigError(f"protocol.setting must be one of {SETTINGS}, got {v['protocol.setting']!r}")
        zero_ok = ("schedule.epochs", "stub.steps", "visual.pretrain_steps")
        for key in ("schedule.epochs", "train.batch_size", "stub.steps", "data.n_per_cell", "visual.pretrain_steps",
                    "visual.pretrain_n", "stub.batch_size", "stub.n_per_cell"):
            if v[key] < (0 if key in zero_ok else 1):
                raise ConfigError(f"{key} out of range: {v[key]}")
        if not 3 <= v["stub.D"] <= 8:
            raise ConfigError(f"stub.D must lie in [3, 8], got {v['stub.D']}")
        if v["stub.optimizer"] not in ("adam", "sgd"):
            raise ConfigError(f"stub.optimizer must be 'adam' or 'sgd', got {v['stub.optimizer']!r}")
        if not 0.0 <= v["stub.class_only_captions"] <= 1.0:
            raise ConfigError(f"stub.class_only_captions must lie in [0, 1], got {v['stub.class_only_captions']}")
        for key in ("optim.lr_visual", "optim.lr_fusion", "stub.lr", "visual.pretrain_lr"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {v[key]}")
        # typed views raise ConfigError naming the offending section
        self.pipeline_spec()
        self.fusion_config()
        self.loss_config()

    def pipeline_spec(self) -> PipelineSpec:
        v = self.values
        return PipelineSpec(v["pipeline.kind"], v["pipeline.loss_mode"], v["pipeline.finetune_mvit"])

    def fusion_config(self) -> FusionConfig:
        v = self.values
        return FusionConfig(K=v["fusion.K"], heads=v["fusion.heads"], token_dim=v["fusion.token_dim"],
                            mechanism=v["fusion.mechanism"])

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(lam=v["loss.lambda"], distill_temperature=v["loss.distill_temperature"],
                          distill_alpha=v["loss.distill_alpha"], normalize_prompts=v["loss.normalize_prompts"])

    def visual_config(self) -> ViTConfig:
        v = self.values
        return ViTConfig(v["data.image_size"], v["visual.patch_size"], v["data.channels"], v["visual.dim"],
                         v["visual.depth"], v["visual.heads"])

    def stub_config(self, class_names, domain_names) -> StubConfig:
        v = self.values
        bundle = BundleConfig(image_size=v["data.image_size"], patch_size=v["visual.patch_size"],
                              channels=v["data.channels"], dim=v["stub.dim"], depth=v["stub.depth"],
                              heads=v["stub.heads"], text_dim=v["stub.text_dim"], embed_dim=v["stub.embed_dim"],
                              words=list(class_names) + list(domain_names))
        return StubConfig(bundle=bundle, steps=v["stub.steps"], batch_size=v["stub.batch_size"],
                          optimizer=v["stub.optimizer"], lr=v["stub.lr"], seed=v["stub.seed"])

    def visual_pretrain_config(self) -> VisualPretrainConfig:
        v = self.values
        return VisualPretrainConfig(steps=v["visual.pretrain_steps"], lr=v["visual.pretrain_lr"],
                                    seed=v["visual.pretrain_seed"])

    def echo(self) -> dict[str, Any]:
        return {"preset": self.preset, **copy.deepcopy(self.values)}

    def to_toml(self) -> str:
        lines = [f'preset = "{self.preset}"']
        for k in sorted(self.values):
            lines.append(f"{k} = {_toml_value(self.values[k])}")
        return "\n".join(lines) + "\n"


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def config_from_mapping(tree: Mapping, preset: str | None = None) -> ExperimentConfig:
    flat = _flatten(tree)
    file_preset = flat.pop("preset", None)
    preset = preset or file_preset or "desk"
    if not isinstance(preset, str):
        raise ConfigError(f"preset: expected a string, got {preset!r}")
    values = preset_defaults(preset)
    for key, value in flat.items():
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _check_type(key, value, DESK_DEFAULTS[key])
    return ExperimentConfig(values, preset)


def parse_config(path: str | Path | None, preset: str | None = None) -> ExperimentConfig:
    """Read a TOML config; ``preset`` (e.g. from the command line) wins over the file's."""
    if path is None:
        return config_from_mapping({}, preset)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_mapping(tree, preset)
