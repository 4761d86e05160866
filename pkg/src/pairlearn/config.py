"""Run configuration: dataclasses plus a plain-text ``key = value`` format.

The file format is deliberately small: one dotted key per line, ``#``
comments, no sections. The loss temperatures, stage fractions, and
learning rate have no fallback values; a config that omits them fails
with a message naming the missing field. Everything else defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .backbones import BackboneSpec
from .data import DatasetSpec
from .nn import ConfigError
from .optim import StageSchedule
from .plm import PlmConfig

_MODES = ("vpl", "independent", "distill", "dml")

# Keys with no silent defaults: the knobs that change results the most.
REQUIRED_KEYS = (
    "mode",
    "epochs",
    "batch_size",
    "seed",
    "plm.tau",
    "plm.rho",
    "schedule.x",
    "schedule.y",
    "optim.lr",
    "data.source",
    "data.classes",
    "data.seed",
    "branch_a.kind",
    "branch_a.depth",
    "branch_a.width",
    "branch_b.kind",
    "branch_b.depth",
    "branch_b.width",
)


@dataclass(frozen=True)
class OptimConfig:
    max_lr: float
    min_lr: float
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.max_lr < 0:
            raise ConfigError(f"optim.lr must be non-negative, got {self.max_lr}")
        if not 0 <= self.min_lr <= self.max_lr:
            raise ConfigError(
                f"optim.min_lr must be in [0, lr], got {self.min_lr} with lr {self.max_lr}"
            )
        if self.weight_decay < 0:
            raise ConfigError(f"optim.weight_decay must be non-negative, got {self.weight_decay}")


@dataclass(frozen=True)
class RunConfig:
    mode: str
    branch_a: BackboneSpec
    branch_b: BackboneSpec
    plm: PlmConfig
    x: int
    y: int
    optim_a: OptimConfig
    optim_b: OptimConfig
    data: DatasetSpec
    epochs: int
    batch_size: int
    seed: int
    ema: bool = False
    ema_decay_max: float = 0.9995
    teacher_checkpoint: str | None = None
    distill_teacher: str = "a"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.mode == "distill" and self.teacher_checkpoint is None:
            raise ConfigError("distill mode requires distill.teacher_checkpoint")
        if self.distill_teacher not in ("a", "b"):
            raise ConfigError(f"distill.teacher must be a or b, got {self.distill_teacher!r}")
        if not 0 <= self.ema_decay_max < 1:
            raise ConfigError(f"ema.decay_max must be in [0, 1), got {self.ema_decay_max}")
        if self.branch_a.classes != self.data.classes:
            raise ConfigError(
                f"branch_a.classes {self.branch_a.classes} != data.classes {self.data.classes}"
            )
        if self.branch_b.classes != self.data.classes:
            raise ConfigError(
                f"branch_b.classes {self.branch_b.classes} != data.classes {self.data.classes}"
            )
        # Validates x + y <= 100 and the percentage ranges.
        self.schedule()

    def schedule(self) -> StageSchedule:
        return StageSchedule(self.x, self.y, self.epochs)


# ---------------------------------------------------------------------------
# parsing


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines to a flat mapping; comments and blanks skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _to_bool(key: str, value: str) -> bool:
    if value in ("true", "false"):
        return value == "true"
    raise ConfigError(f"{key}: expected true or false, got {value!r}")


def _to_floats(key: str, value: str) -> tuple[float, ...]:
    try:
        return tuple(float(part.strip()) for part in value.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {value!r}") from None


class _Fields:
    """Tracks which keys were consumed so leftovers can be reported."""

    def __init__(self, mapping: dict[str, str]):
        self.mapping = dict(mapping)
        self.used: set[str] = set()

    def get(self, key: str, default: str | None = None) -> str | None:
        if key in self.mapping:
            self.used.add(key)
            return self.mapping[key]
        return default

    def require(self, key: str) -> str:
        value = self.get(key)
        if value is None:
            raise ConfigError(f"missing required config field {key!r}")
        return value

    def unused(self) -> list[str]:
        return sorted(set(self.mapping) - self.used)


def _branch_spec(f: _Fields, name: str, classes: int) -> BackboneSpec:
    heads = f.get(f"{name}.heads")
    patch = f.get(f"{name}.patch")
    return BackboneSpec(
        kind=f.require(f"{name}.kind"),
        depth=_to_int(f"{name}.depth", f.require(f"{name}.depth")),
        width=_to_int(f"{name}.width", f.require(f"{name}.width")),
        classes=classes,
        heads=_to_int(f"{name}.heads", heads) if heads is not None else None,
        patch=_to_int(f"{name}.patch", patch) if patch is not None else None,
    )


def _optim_config(f: _Fields, override: str) -> OptimConfig:
    def pick(suffix: str, default: str | None) -> str | None:
        value = f.get(f"{override}.{suffix}")
        if value is None:
            value = f.get(f"optim.{suffix}", default)
        return value

    lr = pick("lr", None)
    if lr is None:
        raise ConfigError("missing required config field 'optim.lr'")
    min_lr = pick("min_lr", None)
    wd = pick("weight_decay", "0.05")
    max_lr = _to_float("optim.lr", lr)
    return OptimConfig(
        max_lr=max_lr,
        min_lr=_to_float("optim.min_lr", min_lr) if min_lr is not None else max_lr / 100.0,
        weight_decay=_to_float("optim.weight_decay", wd),
    )


def build_run_config(mapping: dict[str, str], data_root: str | None = None) -> RunConfig:
    """Validate and coerce a flat mapping into a RunConfig.

    ``data_root`` fills data.root when the file leaves it unset (the CLI
    passes the data-root environment variable here). Unknown keys are an
    error, as is any missing key from REQUIRED_KEYS.
    """
    f = _Fields(mapping)
    for key in REQUIRED_KEYS:
        if f.get(key) is None:
            raise ConfigError(f"missing required config field {key!r}")

    classes = _to_int("data.classes", f.require("data.classes"))
    root = f.get("data.root", data_root)
    mean = f.get("data.mean")
    std = f.get("data.std")
    data = DatasetSpec(
        source=f.require("data.source"),
        classes=classes,
        seed=_to_int("data.seed", f.require("data.seed")),
        root=root,
        flip=_to_bool("data.flip", f.get("data.flip", "false")),
        crop_pad=_to_int("data.crop_pad", f.get("data.crop_pad", "0")),
        image_size=_to_int("data.image_size", f.get("data.image_size", "32")),
        channels=_to_int("data.channels", f.get("data.channels", "3")),
        train_count=_to_int("data.train_count", f.get("data.train_count", "1000")),
        eval_count=_to_int("data.eval_count", f.get("data.eval_count", "1000")),
        noise=_to_float("data.noise", f.get("data.noise", "0.25")),
        limit=_to_int("data.limit", f.get("data.limit")) if f.get("data.limit") else None,
        eval_limit=(
            _to_int("data.eval_limit", f.get("data.eval_limit"))
            if f.get("data.eval_limit")
            else None
        ),
        mean=_to_floats("data.mean", mean) if mean is not None else None,
        std=_to_floats("data.std", std) if std is not None else None,
    )

    plm = PlmConfig(
        tau=_to_float("plm.tau", f.require("plm.tau")),
        rho=_to_float("plm.rho", f.require("plm.rho")),
        routing=f.get("plm.routing", "restricted"),
    )

    config = RunConfig(
        mode=f.require("mode"),
        branch_a=_branch_spec(f, "branch_a", classes),
        branch_b=_branch_spec(f, "branch_b", classes),
        plm=plm,
        x=_to_int("schedule.x", f.require("schedule.x")),
        y=_to_int("schedule.y", f.require("schedule.y")),
        optim_a=_optim_config(f, "optim_a"),
        optim_b=_optim_config(f, "optim_b"),
        data=data,
        epochs=_to_int("epochs", f.require("epochs")),
        batch_size=_to_int("batch_size", f.require("batch_size")),
        seed=_to_int("seed", f.require("seed")),
        ema=_to_bool("ema", f.get("ema", "false")),
        ema_decay_max=_to_float("ema.decay_max", f.get("ema.decay_max", "0.9995")),
        teacher_checkpoint=f.get("distill.teacher_checkpoint"),
        distill_teacher=f.get("distill.teacher", "a"),
    )
    leftovers = f.unused()
    if leftovers:
        raise ConfigError(f"unknown config fields: {', '.join(leftovers)}")
    return config


def load_run_config(path: str) -> RunConfig:
    return build_run_config(parse_config_file(path), data_root=os.environ.get("PAIRLEARN_DATA_ROOT"))


# ---------------------------------------------------------------------------
# canonical echo


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_config_mapping(config: RunConfig) -> dict[str, str]:
    """The fully resolved configuration as sorted dotted keys.

    Every artifact (metrics CSV header, checkpoint) embeds this mapping,
    so a run can always be reproduced from its outputs alone.
    """
    m: dict[str, str] = {
        "mode": config.mode,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "ema": config.ema,
        "ema.decay_max": config.ema_decay_max,
        "plm.tau": config.plm.tau,
        "plm.rho": config.plm.rho,
        "plm.routing": config.plm.routing,
        "schedule.x": config.x,
        "schedule.y": config.y,
    }
    for name, spec in (("branch_a", config.branch_a), ("branch_b", config.branch_b)):
        m[f"{name}.kind"] = spec.kind
        m[f"{name}.depth"] = spec.depth
        m[f"{name}.width"] = spec.width
        if spec.heads is not None:
            m[f"{name}.heads"] = spec.heads
        if spec.patch is not None:
            m[f"{name}.patch"] = spec.patch
    # optim_a is the base; optim_b keys appear only where they differ, so
    # the echo is itself a minimal valid config file.
    m["optim.lr"] = config.optim_a.max_lr
    m["optim.min_lr"] = config.optim_a.min_lr
    m["optim.weight_decay"] = config.optim_a.weight_decay
    if config.optim_b.max_lr != config.optim_a.max_lr:
        m["optim_b.lr"] = config.optim_b.max_lr
    if config.optim_b.min_lr != config.optim_a.min_lr:
        m["optim_b.min_lr"] = config.optim_b.min_lr
    if config.optim_b.weight_decay != config.optim_a.weight_decay:
        m["optim_b.weight_decay"] = config.optim_b.weight_decay
    d = config.data
    m["data.source"] = d.source
    m["data.classes"] = d.classes
    m["data.seed"] = d.seed
    if d.root is not None:
        m["data.root"] = d.root
    m["data.flip"] = d.flip
    m["data.crop_pad"] = d.crop_pad
    m["data.image_size"] = d.image_size
    m["data.channels"] = d.channels
    m["data.train_count"] = d.train_count
    m["data.eval_count"] = d.eval_count
    m["data.noise"] = d.noise
    if d.limit is not None:
        m["data.limit"] = d.limit
    if d.eval_limit is not None:
        m["data.eval_limit"] = d.eval_limit
    if d.mean is not None:
        m["data.mean"] = d.mean
    if d.std is not None:
        m["data.std"] = d.std
    if config.teacher_checkpoint is not None:
        m["distill.teacher_checkpoint"] = config.teacher_checkpoint
        m["distill.teacher"] = config.distill_teacher
    return {k: _fmt(v) for k, v in sorted(m.items())}


def run_config_text(config: RunConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in run_config_mapping(config).items()) + "\n"
