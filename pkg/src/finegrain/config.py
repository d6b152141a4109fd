"""Run configuration: defaults, presets, and the key=value text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .norm import ConfigError, GroupSpec


@dataclass
class RunConfig:
    # architecture
    variant: str = "small"
    groups: int = 1
    channels_per_group: int = 0  # > 0 overrides groups
    use_se: bool = False
    affine: bool = True
    epsilon: float = 1e-5
    bn_momentum: float = 0.1
    style: str = "residual"
    input_form: str = "auto"  # auto | imagenet | cifar
    num_classes: int = 0  # 0 = from the dataset (1000 without one)
    # optimization
    lr: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "step"  # step | linear
    milestones: str = "10,15"
    lr_factor: float = 10.0
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    # data
    dataset: str = "cifar10"  # cifar10 | cifar100 | synthetic
    data_dir: str = ""
    train_subset: int = 5000
    test_subset: int = 1000
    augment: bool = True
    synthetic_kind: str = "gaussian_blobs"
    # artifacts
    checkpoint: str = "finet.ckpt"
    fused_checkpoint: str = "finet.fused.ckpt"
    metrics_csv: str = "metrics.csv"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("small", "large"):
            raise ConfigError(f"variant must be small or large, got {self.variant!r}")
        if self.groups < 1 or self.channels_per_group < 0:
            raise ConfigError("groups >= 1 and channels_per_group >= 0 required")
        if self.schedule not in ("step", "linear"):
            raise ConfigError(f"schedule must be step or linear, got {self.schedule!r}")
        if self.input_form not in ("auto", "imagenet", "cifar"):
            raise ConfigError(f"input_form must be auto, imagenet or cifar, got {self.input_form!r}")
        if self.style not in ("residual", "shuffle"):
            raise ConfigError(f"style must be residual or shuffle, got {self.style!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        self.milestone_list()

    @property
    def group_spec(self) -> GroupSpec:
        if self.channels_per_group > 0:
            return GroupSpec.channels_per_group(self.channels_per_group)
        return GroupSpec.fixed_groups(self.groups)

    def milestone_list(self) -> list[int]:
        try:
            return [int(m) for m in self.milestones.split(",") if m.strip()]
        except ValueError as e:
            raise ConfigError(f"bad milestones {self.milestones!r}") from e

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return (base or cls()).updated(values)

    def updated(self, values: dict) -> "RunConfig":
        """Copy with string or typed overrides applied."""
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse(types[key], value) if isinstance(value, str) else value
        return dataclasses.replace(self, **parsed)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(typ, value: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError as e:
        raise ConfigError(f"cannot parse {value!r} as {typ}") from e
    return value


PRESETS = {
    # desk-scale CIFAR run on a CPU
    "desk": {},
    # full CIFAR recipe
    "cifar": {"variant": "large", "batch_size": 128, "epochs": 200, "lr": 0.1, "milestones": "100,150",
              "weight_decay": 5e-4, "schedule": "step", "train_subset": 0, "test_subset": 0},
    # ImageNet recipe; ingestion of ImageNet itself is not provided
    "imagenet": {"batch_size": 512, "epochs": 320, "lr": 0.2, "schedule": "linear", "weight_decay": 4e-5,
                 "input_form": "imagenet", "num_classes": 1000, "augment": False},
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig().updated(PRESETS[name])
