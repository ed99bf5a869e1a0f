"""Configuration and result records.

Every record derives from `DTO`, which converts it to a dict, a flat dict, a
tuple or a JSON string.
"""
import json
import re
from enum import Enum
from typing import Optional, Union

import numpy as np
from attrs import Factory, asdict, define, field, validators
from cattrs import Converter
from cattrs.errors import BaseValidationError, ForbiddenExtraKeysError

from .exceptions import ArchitectureError, ConfigError, InvalidMetric
from .layers import ARCHITECTURES, LayerSpec, ModelOptions, PoolVariant
from .pooling import FirstStage, Inference
from .utils import flat_dict


class JSONEncoder(json.JSONEncoder):
    """Custom json encoder for numpy values, enums and DTOs"""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, Enum):
            return obj.value
        elif isinstance(obj, DTO):
            return obj.to_dict()
        return json.JSONEncoder.default(self, obj)


@define
class DTO:
    """Parent class for all records"""

    def to_dict(self) -> dict:
        """Convert object to a dictionary"""
        return asdict(self)

    def to_flat_dict(self) -> dict:
        """Convert object to a flat dictionary"""
        return flat_dict(asdict(self))

    def to_json(self) -> str:
        """Convert object to a json string"""
        return JSONEncoder(sort_keys=True).encode(self)


# Configuration

Arch = Union[str, list[str]]

converter = Converter(forbid_extra_keys=True)
converter.register_structure_hook(
    Arch, lambda value, _: value if isinstance(value, str) else [str(v) for v in value]
)

_GRID_NAME = re.compile(r"^s3pool((?:-\d+)+)$")
DATASETS = ("synthetic", "cifar10")
DTYPES = ("float32", "float64")


def _positive(instance, attribute, value):
    if value is not None and value < 1:
        raise ConfigError(f"{attribute.name} must be >= 1, got {value}.")


def _rate(instance, attribute, value):
    if not 0.0 <= value < 1.0:
        raise ConfigError(f"{attribute.name} must be in [0, 1), got {value}.")


def _one_of(choices):
    def check(instance, attribute, value):
        if value not in choices:
            raise ConfigError(f"{attribute.name} must be one of {list(choices)}, got '{value}'.")

    return check


@define
class TrainConfig(DTO):
    """Everything that determines a training run.

    ``pooling`` accepts ``max``, ``avg``, ``zeiler``, ``s3pool`` or the grid
    naming ``s3pool-16-8``, which sets ``grids`` to [16, 8]. ``arch`` is a
    preset name (``nin``, ``resnet``) or an explicit list of layer names, in
    which case ``pooling``, ``grids``, ``width`` and ``dropout`` are ignored.
    """

    arch: Arch = "nin"
    pooling: str = "s3pool"
    grids: list[int] = Factory(lambda: [16, 8])
    width: int = field(default=16, validator=_positive)
    num_classes: int = field(default=10, validator=_positive)
    epochs: int = field(default=20, validator=_positive)
    batch_size: int = field(default=128, validator=_positive)
    lr: float = 1.0
    lr_drop_epoch: Optional[int] = field(default=None, validator=_positive)
    lr_drop_factor: float = 0.1
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 0
    dataset: str = field(default="synthetic", validator=_one_of(DATASETS))
    data_dir: Optional[str] = None
    train_size: int = field(default=1000, validator=_positive)
    test_size: int = field(default=500, validator=_positive)
    normalize: bool = False
    dropout: float = field(default=0.0, validator=_rate)
    inference: str = field(default="average", validator=_one_of([m.value for m in Inference]))
    share_samples: bool = False
    first_stage: str = field(default="max", validator=_one_of([m.value for m in FirstStage]))
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    dtype: str = field(default="float32", validator=_one_of(DTYPES))

    def __attrs_post_init__(self):
        named = _GRID_NAME.match(self.pooling)
        if named:
            self.pooling = PoolVariant.S3POOL.value
            self.grids = [int(g) for g in named.group(1).strip("-").split("-")]
        if self.pooling not in [v.value for v in PoolVariant]:
            raise ConfigError(f"Unknown pooling '{self.pooling}'.")
        if isinstance(self.arch, str) and self.arch not in ARCHITECTURES:
            raise ConfigError(f"Unknown architecture '{self.arch}'; use {sorted(ARCHITECTURES)} or a layer list.")
        if self.lr_drop_epoch is not None and self.lr_drop_epoch > self.epochs:
            raise ConfigError(
                f"lr_drop_epoch {self.lr_drop_epoch} is after the last epoch {self.epochs}."
            )
        if self.dataset == "cifar10" and self.num_classes != 10:
            raise ConfigError("CIFAR-10 has 10 classes.")

    @property
    def name(self) -> str:
        """Short label such as ``s3pool-16-8`` or ``max``."""
        if self.pooling == PoolVariant.S3POOL.value:
            return "-".join(["s3pool"] + [str(g) for g in self.grids])
        return self.pooling

    def layer_specs(self) -> list[LayerSpec]:
        """Resolve ``arch`` into layer specs.

        Raises:
            ConfigError: A layer name cannot be parsed.
        """
        try:
            if isinstance(self.arch, str):
                return ARCHITECTURES[self.arch](
                    self.pooling, self.grids, self.width, self.num_classes, self.dropout
                )
            return [LayerSpec.parse(text) for text in self.arch]
        except ArchitectureError as err:
            raise ConfigError(str(err)) from err

    def model_options(self) -> ModelOptions:
        return ModelOptions(
            inference=self.inference,
            first_stage=self.first_stage,
            shared=self.share_samples,
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
            dtype=self.dtype,
        )

    def lr_at(self, epoch: int) -> float:
        """Learning-rate multiplier for a 1-based epoch."""
        if self.lr_drop_epoch is not None and epoch > self.lr_drop_epoch:
            return self.lr * self.lr_drop_factor
        return self.lr

    def evolve(self, **changes) -> "TrainConfig":
        """Copy with some fields replaced, validated like a fresh config."""
        data = converter.unstructure(self)
        data.update(changes)
        return TrainConfig.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Structure a mapping, rejecting unknown keys and wrong types.

        Raises:
            ConfigError: The mapping does not describe a valid config.
        """
        if not isinstance(data, dict):
            raise ConfigError("A config must be a JSON object.")
        try:
            return converter.structure(data, cls)
        except ConfigError:
            raise
        except ForbiddenExtraKeysError as err:
            raise ConfigError(f"Unknown config keys: {sorted(err.extra_fields)}.") from err
        except BaseValidationError as err:
            config_errors = [e for e in err.exceptions if isinstance(e, ConfigError)]
            if config_errors:
                raise config_errors[0] from err
            raise ConfigError(f"Invalid config: {err.exceptions}") from err
        except (ValueError, TypeError) as err:
            raise ConfigError(f"Invalid config: {err}") from err

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        """Read a config from a JSON file.

        Raises:
            ConfigError: Unreadable file, malformed JSON or invalid content.
        """
        try:
            with open(path, encoding="utf-8") as stream:
                data = json.load(stream)
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as err:
            raise ConfigError(f"Cannot read config {path}: {err}") from err
        return cls.from_dict(data)


# Results


def _error_rate(instance, attribute, value):
    if not 0.0 <= value <= 100.0:
        raise InvalidMetric(f"{attribute.name} must be a percentage, got {value}.")


@define
class EpochMetrics(DTO):
    epoch: int
    train_error: float = field(converter=float, validator=_error_rate)
    test_error: float = field(converter=float, validator=_error_rate)
    seconds: float = field(converter=float, validator=validators.ge(0.0))
    loss: float = field(converter=float)


@define
class RunMetrics(DTO):
    """Per-epoch errors and timings of one training run."""

    name: str
    seed: int
    epochs: list[EpochMetrics] = Factory(list)

    @property
    def final_train_error(self) -> float:
        return self.epochs[-1].train_error

    @property
    def final_test_error(self) -> float:
        return self.epochs[-1].test_error

    @property
    def seconds_per_epoch(self) -> float:
        return sum(e.seconds for e in self.epochs) / len(self.epochs)

    def csv_rows(self) -> list[dict]:
        """Rows of metrics.csv: epoch, split, error, seconds."""
        rows = []
        for e in self.epochs:
            rows.append({"epoch": e.epoch, "split": "train", "error": e.train_error, "seconds": e.seconds})
            rows.append({"epoch": e.epoch, "split": "test", "error": e.test_error, "seconds": e.seconds})
        return rows

    def summary(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "epochs": len(self.epochs),
            "final": {"train_error": self.final_train_error, "test_error": self.final_test_error},
            "seconds_per_epoch": self.seconds_per_epoch,
        }


@define
class BenchRow(DTO):
    arch: str
    pooling: str
    seconds_per_epoch: float
    ratio: float


@define
class SweepRow(DTO):
    config: str
    seed: int
    train_error: float
    test_error: float


@define
class SizeRow(DTO):
    train_size: int
    pooling: str
    seed: int
    train_error: float
    test_error: float


@define
class CheckResult(DTO):
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0
