"""Experiment configuration: a flat dataclass mirrored by a sectioned TOML file.

    [dataset]    n_train, repetitions
    [patching]   patch_size, rescale, ref_height, ref_width
    [backbone]   kind, file, frozen, feature_dim, seed
    [recurrent]  kind, hidden_dim
    [fsl]        mode, k, q, head
    [training]   episodes, eval_every, eval_episodes, optimizer, lr, seed
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .backbone import KINDS as BACKBONE_KINDS, KNOWN_WIDTHS
from .errors import ConfigError
from .fsl import HEADS, Mode
from .recurrent import RU_KINDS


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.CONDITIONAL
    k: int = 5
    q: int = 5
    head: str = "prototype"
    episodes: int = 5000
    eval_every: int = 250
    eval_episodes: int = 100
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    backbone: str = "resnet50"
    backbone_file: str | None = None
    frozen: bool = True
    feature_dim: int | None = None
    backbone_seed: int = 0
    ru_kind: str = "lstm"
    hidden_dim: int = 256
    patch_size: int = 299
    rescale: bool = True
    ref_height: int = 1047
    ref_width: int = 1564
    n_train: int = 6
    repetitions: int = 10

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", Mode.parse(self.mode))
        except ValueError:
            pass  # reported by validate()

    @property
    def ref_size(self) -> tuple[int, int]:
        return self.ref_height, self.ref_width

    @property
    def effective_feature_dim(self) -> int | None:
        if self.backbone == "mock":
            return 16 if self.feature_dim is None else self.feature_dim
        return KNOWN_WIDTHS.get(self.backbone)

    def replace(self, **changes) -> "TrainConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def problems(self) -> list[str]:
        p = []
        if not isinstance(self.mode, Mode):
            p.append(f"fsl.mode: unknown mode {self.mode!r}")
        for name in ("k", "q", "episodes", "eval_every", "eval_episodes", "patch_size",
                     "ref_height", "ref_width", "repetitions", "n_train", "hidden_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                p.append(f"{name} must be an integer >= 1, got {v!r}")
        if isinstance(self.episodes, int) and isinstance(self.eval_every, int) and self.eval_every > self.episodes:
            p.append(f"eval_every ({self.eval_every}) must not exceed episodes ({self.episodes})")
        if not isinstance(self.lr, (int, float)) or not self.lr > 0:
            p.append(f"lr must be > 0, got {self.lr!r}")
        if self.optimizer != "adam":
            p.append(f"optimizer must be 'adam', got {self.optimizer!r}")
        if self.head not in HEADS:
            p.append(f"fsl.head must be one of {HEADS}, got {self.head!r}")
        if self.backbone not in BACKBONE_KINDS:
            p.append(f"backbone.kind must be one of {BACKBONE_KINDS}, got {self.backbone!r}")
        elif self.backbone != "mock" and not self.backbone_file:
            p.append(f"backbone.file is required for backbone {self.backbone!r}")
        if self.feature_dim is not None and self.backbone != "mock":
            p.append("backbone.feature_dim only applies to the mock backbone")
        if self.ru_kind not in RU_KINDS:
            p.append(f"recurrent.kind must be one of {RU_KINDS}, got {self.ru_kind!r}")
        n = self.effective_feature_dim
        if n is not None and isinstance(self.hidden_dim, int) and self.hidden_dim >= n:
            p.append(f"recurrent.hidden_dim ({self.hidden_dim}) must be smaller than the feature width ({n})")
        if self.backbone == "mock" and isinstance(self.patch_size, int) and self.patch_size < 8:
            p.append("patch_size must be >= 8 for the mock backbone")
        return p

    def validate(self) -> "TrainConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def to_sections(self) -> dict[str, dict[str, Any]]:
        out: dict[str, dict[str, Any]] = {}
        for (section, key), attr in _KEYS.items():
            v = getattr(self, attr)
            if v is None:
                continue
            out.setdefault(section, {})[key] = v.value if isinstance(v, Mode) else v
        return out

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (getattr(self, f.name).value if isinstance(getattr(self, f.name), Mode)
                         else getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"unknown config field {u!r}" for u in unknown])
        return cls(**d)


_KEYS = {
    ("dataset", "n_train"): "n_train",
    ("dataset", "repetitions"): "repetitions",
    ("patching", "patch_size"): "patch_size",
    ("patching", "rescale"): "rescale",
    ("patching", "ref_height"): "ref_height",
    ("patching", "ref_width"): "ref_width",
    ("backbone", "kind"): "backbone",
    ("backbone", "file"): "backbone_file",
    ("backbone", "frozen"): "frozen",
    ("backbone", "feature_dim"): "feature_dim",
    ("backbone", "seed"): "backbone_seed",
    ("recurrent", "kind"): "ru_kind",
    ("recurrent", "hidden_dim"): "hidden_dim",
    ("fsl", "mode"): "mode",
    ("fsl", "k"): "k",
    ("fsl", "q"): "q",
    ("fsl", "head"): "head",
    ("training", "episodes"): "episodes",
    ("training", "eval_every"): "eval_every",
    ("training", "eval_episodes"): "eval_episodes",
    ("training", "optimizer"): "optimizer",
    ("training", "lr"): "lr",
    ("training", "seed"): "seed",
}


def config_from_sections(sections: Mapping[str, Mapping[str, Any]], base: TrainConfig | None = None) -> TrainConfig:
    values: dict[str, Any] = {}
    problems = []
    for section, table in sections.items():
        if not isinstance(table, Mapping):
            problems.append(f"top-level key {section!r} must be a [section]")
            continue
        for key, v in table.items():
            attr = _KEYS.get((section, key))
            if attr is None:
                problems.append(f"unknown config key {section}.{key}")
            else:
                values[attr] = v
    if problems:
        raise ConfigError(problems)
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        sections = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_sections(sections)


def dump_config(config: TrainConfig) -> str:
    return tomli_w.dumps(config.to_sections())
