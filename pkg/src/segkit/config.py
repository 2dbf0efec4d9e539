"""Run configuration: one YAML file; every pipeline constant is a key."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import IMAGENET_MEAN, IMAGENET_STD, AugmentParams
from .errors import ConfigError
from .losses import VARIANTS
from .nets import STYLES, NetworkSpec
from .trainer import Schedule


@dataclass
class RunConfig:
    data_root: str = "data"
    output_dir: str = "runs/default"
    folds_file: str | None = None  # defaults to <output_dir>/folds.csv
    folds: int = 5
    val_fold: int = 0
    seed: int = 0
    crop: int | None = 512
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    network: NetworkSpec = field(default_factory=NetworkSpec)
    schedule: Schedule = field(default_factory=lambda: Schedule(batch_size=4))
    loss_variant: str = "aggregate"
    augment: AugmentParams = field(default_factory=AugmentParams)
    threshold: float = 0.3
    min_area: int = 300
    connectivity: int = 8
    match_radius: float = 30.0
    timing_repeats: int = 20

    @property
    def fold_table(self) -> Path:
        return Path(self.folds_file) if self.folds_file else Path(self.output_dir) / "folds.csv"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        d["network"] = self.network.to_dict()
        d["schedule"] = {"phases": [list(p) for p in self.schedule.phases],
                         "batch_size": self.schedule.batch_size, "seed": self.schedule.seed}
        aug = asdict(self.augment)
        d["augment"] = {k: list(v) if isinstance(v, tuple) else v for k, v in aug.items()}
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def validate(self, check_paths: bool = False) -> list[str]:
        errors = []
        if self.folds < 2:
            errors.append("folds must be >= 2")
        if not 0 <= self.val_fold < max(self.folds, 1):
            errors.append(f"val_fold must be in [0, {self.folds - 1}]")
        if self.crop is not None and self.crop < 1:
            errors.append("crop must be a positive integer or null")
        if len(self.mean) != 3:
            errors.append("mean must have 3 entries")
        if len(self.std) != 3 or any(s <= 0 for s in self.std):
            errors.append("std must have 3 positive entries")
        if self.network.style not in STYLES:
            errors.append(f"network.style must be one of {list(STYLES)}")
        for key in ("base_width", "depth", "input_channels", "output_classes", "blocks_per_stage"):
            if getattr(self.network, key) < 1:
                errors.append(f"network.{key} must be >= 1")
        errors += self.schedule.validate()
        if self.loss_variant not in VARIANTS:
            errors.append(f"loss_variant must be one of {list(VARIANTS)}")
        errors += self.augment.validate()
        if not 0 <= self.threshold <= 1:
            errors.append("threshold must be in [0, 1]")
        if self.min_area < 0:
            errors.append("min_area must be >= 0")
        if self.connectivity not in (4, 8):
            errors.append("connectivity must be 4 or 8")
        if self.match_radius < 0:
            errors.append("match_radius must be >= 0")
        if self.timing_repeats < 1:
            errors.append("timing_repeats must be >= 1")
        if check_paths and not Path(self.data_root).is_dir():
            errors.append(f"data_root does not exist: {self.data_root}")
        return errors


_SCALARS = {
    "data_root": str, "output_dir": str, "folds_file": (str, type(None)), "folds": int, "val_fold": int,
    "seed": int, "crop": (int, type(None)), "loss_variant": str, "threshold": (int, float), "min_area": int,
    "connectivity": int, "match_radius": (int, float), "timing_repeats": int,
}
_NETWORK = {"style": str, "input_channels": int, "base_width": int, "depth": int, "output_classes": int,
            "stage_convs": (list, type(None)), "blocks_per_stage": int, "seed": int}
_SCHEDULE = {"phases": list, "batch_size": int, "seed": int}
_AUGMENT = {f.name: (list if f.type.startswith("tuple") else (int, float)) for f in fields(AugmentParams)}


def _typed(section: dict, schema: dict, prefix: str, errors: list[str]) -> dict:
    out = {}
    for key, value in section.items():
        if key not in schema:
            errors.append(f"{prefix}{key}: unknown key")
            continue
        expected = schema[key]
        if isinstance(value, bool) or not isinstance(value, expected):
            errors.append(f"{prefix}{key}: expected {_type_name(expected)}, got {type(value).__name__}")
            continue
        out[key] = value
    return out


def _type_name(t) -> str:
    if isinstance(t, tuple):
        return " or ".join("null" if x is type(None) else x.__name__ for x in t)
    return t.__name__


def from_dict(raw: dict, check_paths: bool = False) -> RunConfig:
    """Build and validate a config; every offending key is reported in one ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    errors: list[str] = []
    sections = {"network": _NETWORK, "schedule": _SCHEDULE, "augment": _AUGMENT}
    top = {k: v for k, v in raw.items() if k not in sections and k not in ("mean", "std")}
    kwargs = _typed(top, _SCALARS, "", errors)
    for key in ("mean", "std"):
        if key in raw:
            v = raw[key]
            if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                errors.append(f"{key}: expected a list of 3 numbers")
            else:
                kwargs[key] = tuple(float(x) for x in v)
    for name, schema in sections.items():
        section = raw.get(name, {})
        if section is None:
            section = {}
        if not isinstance(section, dict):
            errors.append(f"{name}: expected a mapping")
            continue
        parsed = _typed(section, schema, f"{name}.", errors)
        try:
            if name == "network":
                kwargs[name] = NetworkSpec(**parsed)
            elif name == "schedule":
                phases = parsed.get("phases")
                if phases is not None and not all(isinstance(p, list) and len(p) == 2 for p in phases):
                    errors.append("schedule.phases: expected a list of [epochs, rate] pairs")
                    parsed.pop("phases")
                kwargs[name] = Schedule(**{"batch_size": 4, **parsed})
            else:
                parsed = {k: tuple(v) if isinstance(v, list) else v for k, v in parsed.items()}
                for k, v in parsed.items():
                    if isinstance(v, tuple) and len(v) != 2:
                        errors.append(f"augment.{k}: expected [low, high]")
                kwargs[name] = AugmentParams(**parsed)
        except (TypeError, ValueError) as exc:
            errors.append(f"{name}: {exc}")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    cfg = RunConfig(**kwargs)
    errors = cfg.validate(check_paths)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path, check_paths: bool = False) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return from_dict(raw, check_paths)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.dump())
