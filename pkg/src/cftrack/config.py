"""Key=value run configuration covering every tunable module.

Format: one ``section.key=value`` per line, ``#`` comments allowed.  Unknown
keys are rejected by name; values are validated against the owning config's
invariants at load time.  Command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .cfm import MarginParams
from .data import SyntheticSceneConfig
from .errors import ConfigError
from .heads import LossWeights
from .tracker import TrackerConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)

    def validate(self) -> None:
        self.train.validate()
        self.scene.validate()


def _parse_value(raw: str, target_type, key: str):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            if not raw:
                return ()
            return tuple(
                float(tok) if "." in tok else int(tok) for tok in raw.split(",")
            )
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def _dataclass_field_types(cls):
    return {f.name: f.type for f in fields(cls)}


_SECTION_FIELDS = {
    "train": {
        f.name: f.type
        for f in fields(TrainConfig)
        if f.name not in ("loss_weights", "margin")
    },
    "loss": _dataclass_field_types(LossWeights),
    "margin": _dataclass_field_types(MarginParams),
    "tracker": {
        f.name: f.type for f in fields(TrackerConfig) if f.name != "margin"
    },
    "scene": _dataclass_field_types(SyntheticSceneConfig),
}

_PY_TYPES = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}


def _field_type(section: str, key: str):
    declared = _SECTION_FIELDS[section][key]
    name = declared if isinstance(declared, str) else declared.__name__
    return _PY_TYPES.get(name, str)


def parse_config_lines(lines, source: str = "<config>") -> RunConfig:
    values: dict[str, dict] = {s: {} for s in _SECTION_FIELDS}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {text!r}")
        key, _, raw = text.partition("=")
        key = key.strip()
        section, _, name = key.partition(".")
        if section not in _SECTION_FIELDS or name not in _SECTION_FIELDS[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[section][name] = _parse_value(raw, _field_type(section, name), key)

    try:
        margin = MarginParams(**values["margin"])
        weights = LossWeights(**values["loss"])
        train = TrainConfig(**values["train"], loss_weights=weights, margin=margin)
        tracker = TrackerConfig(**values["tracker"], margin=margin)
        scene = SyntheticSceneConfig(**values["scene"])
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: {e}") from None
    cfg = RunConfig(train=train, tracker=tracker, scene=scene)
    cfg.validate()
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return parse_config_lines(f, source=path)


def override(cfg: RunConfig, **sections) -> RunConfig:
    """Apply non-None flag overrides, e.g. override(cfg, train={'seed': 3})."""
    out = cfg
    for section, updates in sections.items():
        updates = {k: v for k, v in updates.items() if v is not None}
        if updates:
            out = replace(out, **{section: replace(getattr(out, section), **updates)})
    out.validate()
    return out
