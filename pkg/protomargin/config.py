"""
Run configuration for protomargin.

A RunConfig gathers every section the pipeline needs (data paths and splits,
corpus generation, training, evaluation, explanation) under one master seed. Its
file form is flat UTF-8 JSON with dotted keys::

    {"seed": 7, "train.lambda_f": 0.0, "train.k": 1, "synth.confounder_strength": 0.9}

Precedence, lowest first: defaults, config file, ``--preset``, individual CLI flags.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from protomargin.evaluation import EvalConfig
from protomargin.explain import ExplainConfig
from protomargin.synthgen import SynthConfig
from protomargin.trainer import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys, wrong value types and unreadable config files."""


# Keys filled in from other sections; logger_name fields are never exposed.
_DERIVED = {"train.seed", "train.image_size", "eval.seed"}

PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "protopnet": {"train.k": 1, "train.lambda_f": 0.0},
}


@dataclass
class DataConfig:
    """
    Dataset location and splitting.

    Attributes:
        path: Dataset directory holding manifest.json.
        split_counts: Explicit (train, val, test) sizes; null to use split_ratios.
        split_ratios: Split ratios used when split_counts is null.
    """

    path: str = "data"
    split_counts: tuple[int, int, int] | None = (600, 100, 125)
    split_ratios: tuple[float, float, float] = (0.73, 0.12, 0.15)

    def __post_init__(self) -> None:
        if self.split_counts is not None:
            self.split_counts = tuple(int(c) for c in self.split_counts)  # type: ignore[assignment]
            if len(self.split_counts) != 3 or min(self.split_counts) < 0:
                raise ValueError(f"split_counts needs 3 nonnegative sizes, got {self.split_counts}")
        self.split_ratios = tuple(float(r) for r in self.split_ratios)  # type: ignore[assignment]
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0 or sum(self.split_ratios) <= 0:
            raise ValueError(f"split_ratios needs 3 nonnegative ratios, got {self.split_ratios}")


@dataclass
class RunConfig:
    """
    Complete configuration of one pipeline run.

    Attributes:
        seed: Master seed for every random stream.
        out: Output directory for checkpoints, logs and reports.
        data: Dataset location and splitting.
        synth: Corpus generation.
        train: Training protocol.
        eval: Evaluation.
        explain: Explanation artifacts.

    Example:
        ```python
        from protomargin.config import RunConfig

        config = RunConfig.from_flat({"seed": 3, "train.k": 1})
        assert RunConfig.from_flat(config.to_flat()) == config
        ```
    """

    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        self.train = replace(self.train, seed=self.seed, image_size=self.synth.image_size)
        self.eval = replace(self.eval, seed=self.seed)
        counts = self.data.split_counts
        if counts is not None and sum(counts) != sum(self.synth.class_counts):
            raise ValueError(
                f"data.split_counts {list(counts)} must sum to the corpus size "
                f"{sum(self.synth.class_counts)}; set it to null to split by ratio"
            )

    def to_flat(self) -> dict[str, Any]:
        """Dotted-key, JSON-ready form."""
        flat: dict[str, Any] = {"seed": self.seed, "out": self.out}
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if f.name == "logger_name" or f"{section}.{f.name}" in _DERIVED:
                    continue
                value = getattr(obj, f.name)
                flat[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
        """
        Build a config from dotted keys on top of `base` (defaults when omitted).

        Raises:
            ConfigError: On unknown keys or values of the wrong type.
        """
        base = base or cls()
        defaults = base.to_flat()
        unknown = sorted(set(flat) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

        merged = {**defaults, **{k: _coerce(k, v, defaults[k]) for k, v in flat.items()}}
        sections: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
        for key, value in merged.items():
            if "." in key:
                section, name = key.split(".", 1)
                sections[section][name] = tuple(value) if isinstance(value, list) else value
        try:
            return cls(
                seed=merged["seed"],
                out=merged["out"],
                **{s: _SECTIONS[s](**kwargs) for s, kwargs in sections.items()},
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, overrides: dict[str, Any]) -> RunConfig:
        return RunConfig.from_flat(overrides, base=self)


_SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "synth": SynthConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "explain": ExplainConfig,
}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if value is None:
        if key == "data.split_counts":
            return None
        raise ConfigError(f"{key} must not be null")
    if default is None or isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return list(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if isinstance(default, int) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{key} has the wrong type: {value!r} (default {default!r})")


# ============================================================================
# Files and presets
# ============================================================================


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a flat dotted-key JSON config file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def save_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_flat(), indent=2, sort_keys=True) + "\n", "utf-8")
    return path


def resolve_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict[str, Any] | None = None,
) -> RunConfig:
    """
    Apply defaults, then the file, then the preset, then explicit overrides.

    Raises:
        ConfigError: On an unknown preset or any invalid layer.
    """
    config = RunConfig()
    if path is not None:
        config = RunConfig.from_flat(load_config_file(path), base=config)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        config = RunConfig.from_flat(PRESETS[preset], base=config)
    if overrides:
        config = config.with_overrides(overrides)
    return config


_ATTRIBUTE_LINE = re.compile(r"^\s{8}(\w+): (.+)$")


def _attribute_docs(cls: type) -> dict[str, str]:
    docs: dict[str, str] = {}
    in_block = False
    last = None
    for line in (cls.__doc__ or "").splitlines():
        if line.strip() == "Attributes:":
            in_block = True
            continue
        if in_block:
            match = _ATTRIBUTE_LINE.match(line)
            if match:
                last = match.group(1)
                docs[last] = match.group(2).strip()
            elif line.startswith(" " * 12) and last:
                docs[last] += " " + line.strip()
            elif line.strip() and not line.startswith(" " * 8):
                in_block = False
    return docs


def describe_keys() -> list[tuple[str, Any, str]]:
    """(key, default, description) for every config key, for --help."""
    defaults = RunConfig().to_flat()
    rows: list[tuple[str, Any, str]] = []
    top = _attribute_docs(RunConfig)
    for key, default in defaults.items():
        if "." in key:
            section, name = key.split(".", 1)
            text = _attribute_docs(_SECTIONS[section]).get(name, "")
        else:
            text = top.get(key, "")
        rows.append((key, default, text))
    return rows
