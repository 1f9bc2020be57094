"""Run configuration: dataclasses, the line-oriented config-file parser, and
the canonical effective-config rendering.

File format: ``[section]`` headers and ``key = value`` lines; ``#`` comments
and blank lines are ignored.  Unknown sections or keys are rejected with the
offending line number.  Missing keys take the documented defaults, so an
empty file is a valid configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

ARCHES = ("tiny_vgg", "mini_resnet")
DATA_SOURCES = ("synthetic", "idx", "cifar10", "cifar100")
PRECISIONS = ("float32", "float64")
HEBB_STATS = ("mean", "max_per_map")
IMAGE_SIZES = (16, 28, 32)


class ConfigError(ValueError):
    """Raised for unparseable or constraint-violating configuration."""


@dataclass
class TrainConfig:
    """Every hyperparameter of both training phases."""

    epochs_phase1: int = 30
    epochs_phase2: int = 30
    batch_size: int = 64
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    swa_start_epoch: int = 24
    swa_phase2: bool = False
    early_stop_patience: int = 15
    augment: bool = True
    seed: int = 0
    precision: str = "float32"
    # loss coefficients (defaults are starting points, not published values)
    lambda_hebb1: float = 0.1
    lambda_hebb2: float = 0.1
    lambda_metric: float = 0.5
    lambda_cons: float = 1e-3
    margin: float = 1.0
    hebb_activation_stat: str = "mean"
    # analysis
    haf_tau: float = 0.8


@dataclass
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 4
    image_size: int = 16
    channels: int = 3
    train_per_class: int = 500
    val_per_class: int = 125
    test_per_class: int = 125
    noise: float = 0.25
    # file-backed sources; comma-separated lists are allowed for cifar
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class FullConfig:
    arch: str = "tiny_vgg"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_TRAIN_FIELDS = {"epochs_phase1", "epochs_phase2", "batch_size", "lr_phase1",
                 "lr_phase2", "momentum", "weight_decay", "swa_start_epoch",
                 "swa_phase2", "early_stop_patience", "augment", "seed",
                 "precision"}
_LOSS_FIELDS = {"lambda_hebb1", "lambda_hebb2", "lambda_metric", "lambda_cons",
                "margin", "hebb_activation_stat"}
_ANALYSIS_FIELDS = {"haf_tau"}


def _section_map() -> dict[str, dict[str, type]]:
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    data_types = {f.name: f.type for f in fields(DataConfig)}
    return {
        "model": {"arch": "str"},
        "data": data_types,
        "train": {k: train_types[k] for k in _TRAIN_FIELDS},
        "loss": {k: train_types[k] for k in _LOSS_FIELDS},
        "analysis": {k: train_types[k] for k in _ANALYSIS_FIELDS},
    }


_CASTS = {"int": int, "float": float, "bool": _parse_bool, "str": str}


def parse_config_text(text: str, origin: str = "<config>") -> FullConfig:
    schema = _section_map()
    cfg = FullConfig()
    lines_of: dict[tuple[str, str], int] = {}
    section = None
    seen: set[tuple[str, str]] = set()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in schema:
                raise ConfigError(f"{origin}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in schema[section]:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r} in [{section}]")
        if (section, key) in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        seen.add((section, key))
        lines_of[(section, key)] = lineno
        cast = _CASTS[schema[section][key]]
        try:
            parsed = cast(value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from None
        _assign(cfg, section, key, parsed)

    _validate(cfg, lines_of, origin)
    return cfg


def parse_config(path: str) -> FullConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, origin=path)


def _assign(cfg: FullConfig, section: str, key: str, value) -> None:
    if section == "model":
        cfg.arch = value
    elif section == "data":
        setattr(cfg.data, key, value)
    else:  # train / loss / analysis all live on TrainConfig
        setattr(cfg.train, key, value)


def _validate(cfg: FullConfig, lines_of: dict[tuple[str, str], int],
              origin: str) -> None:
    def fail(section: str, key: str, message: str) -> None:
        lineno = lines_of.get((section, key))
        where = f"{origin}:{lineno}: " if lineno else f"{origin}: "
        raise ConfigError(f"{where}{key} {message}")

    t, d = cfg.train, cfg.data
    if cfg.arch not in ARCHES:
        fail("model", "arch", f"must be one of {ARCHES}, got {cfg.arch!r}")
    if t.epochs_phase1 < 1:
        fail("train", "epochs_phase1", "must be >= 1")
    if t.epochs_phase2 < 1:
        fail("train", "epochs_phase2", "must be >= 1")
    if t.batch_size < 2:
        fail("train", "batch_size", "must be >= 2 (batch norm needs N >= 2)")
    if not t.lr_phase1 > 0:
        fail("train", "lr_phase1", "must be > 0")
    if not t.lr_phase2 > 0:
        fail("train", "lr_phase2", "must be > 0")
    if not 0.0 <= t.momentum < 1.0:
        fail("train", "momentum", "must be in [0, 1)")
    if t.weight_decay < 0:
        fail("train", "weight_decay", "must be >= 0")
    if not 1 <= t.swa_start_epoch <= t.epochs_phase1:
        fail("train", "swa_start_epoch", "must be in [1, epochs_phase1]")
    if t.early_stop_patience < 1:
        fail("train", "early_stop_patience", "must be >= 1")
    if t.precision not in PRECISIONS:
        fail("train", "precision", f"must be one of {PRECISIONS}")
    for name in ("lambda_hebb1", "lambda_hebb2", "lambda_metric", "lambda_cons"):
        if getattr(t, name) < 0:
            fail("loss", name, "must be >= 0")
    if not t.margin > 0:
        fail("loss", "margin", "must be > 0")
    if t.hebb_activation_stat not in HEBB_STATS:
        fail("loss", "hebb_activation_stat", f"must be one of {HEBB_STATS}")
    if not 0.0 < t.haf_tau <= 1.0:
        fail("analysis", "haf_tau", "must be in (0, 1]")
    if d.source not in DATA_SOURCES:
        fail("data", "source", f"must be one of {DATA_SOURCES}")
    if d.num_classes < 2:
        fail("data", "num_classes", "must be >= 2")
    if d.image_size not in IMAGE_SIZES:
        fail("data", "image_size", f"must be one of {IMAGE_SIZES}")
    if d.channels < 1:
        fail("data", "channels", "must be >= 1")
    if d.noise < 0:
        fail("data", "noise", "must be >= 0")
    if d.source == "synthetic":
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(d, name) < 2:
                fail("data", name, "must be >= 2")
    elif d.source == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(d, name):
                fail("data", name, "is required for idx data")
    else:  # cifar10 / cifar100 use record files without separate label files
        for name in ("train_images", "test_images"):
            if not getattr(d, name):
                fail("data", name, "is required for cifar data")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_effective(cfg: FullConfig) -> str:
    """Canonical text of the fully-defaulted configuration (round-trips)."""
    out = ["[model]", f"arch = {cfg.arch}", "", "[data]"]
    for f in fields(DataConfig):
        out.append(f"{f.name} = {_format_value(getattr(cfg.data, f.name))}")
    out.append("")
    out.append("[train]")
    for f in fields(TrainConfig):
        if f.name in _TRAIN_FIELDS:
            out.append(f"{f.name} = {_format_value(getattr(cfg.train, f.name))}")
    out.append("")
    out.append("[loss]")
    for f in fields(TrainConfig):
        if f.name in _LOSS_FIELDS:
            out.append(f"{f.name} = {_format_value(getattr(cfg.train, f.name))}")
    out.append("")
    out.append("[analysis]")
    for f in fields(TrainConfig):
        if f.name in _ANALYSIS_FIELDS:
            out.append(f"{f.name} = {_format_value(getattr(cfg.train, f.name))}")
    out.append("")
    return "\n".join(out)
