from enum import Enum
from pathlib import Path
from typing import Literal, Type, TypeVar, Union
import json
import tomllib

from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ConfigError

T = TypeVar("T", bound=BaseModel)


class ModelConfig(BaseModel):
    input_dim: int = Field(16, gt=0)
    hidden_width: int = Field(64, gt=0)
    num_layers: int = Field(3, ge=1)
    feat_dim: int = Field(32, gt=0)
    num_classes: int = Field(4, ge=2)
    bottleneck: int = Field(8, gt=0)  # 128 at ViT scale
    dom_dim: int = Field(16, gt=0)
    extractor_hidden: int = Field(32, gt=0)
    discriminator_hidden: int = Field(0, ge=0)  # 0 means a single linear layer

    def layer_widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * (self.num_layers - 1) + [self.feat_dim]


class PretrainConfig(BaseModel):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(2e-3, gt=0)
    train_size: int = Field(2000, ge=1)
    holdout_size: int = Field(1000, ge=1)
    max_source_error: float = Field(0.05, gt=0, lt=1)


class AugmentationConfig(BaseModel):
    noise_std: float = Field(0.1, ge=0)
    max_rotation_deg: float = Field(10.0, ge=0)
    copies_per_sample: int = Field(2, ge=1)


class AblationFlags(BaseModel):
    """Which parts of the method are active; one field per ablation-table column."""

    adapt: bool = True
    amplifier: bool = True
    self_training: bool = True
    invariance: bool = True
    discrimination: bool = True
    selection: bool = True
    prototype_update: bool = True


class BaselineKind(str, Enum):
    SOURCE_ONLY = "source-only"
    SELF_TRAINING_ONLY = "self-training-only"
    SELF_INV = "self+inv"
    SELF_INV_DIS = "self+inv+dis"
    SELF_INV_DIS_J = "self+inv+dis+J"
    FULL = "full-testdg"
    NO_AMPLIFIER = "no-amplifier"

    def flags(self) -> AblationFlags:
        if self is BaselineKind.SOURCE_ONLY:
            return AblationFlags(adapt=False, amplifier=False, self_training=False, invariance=False,
                                 discrimination=False, selection=False, prototype_update=False)
        if self is BaselineKind.NO_AMPLIFIER:
            return AblationFlags(amplifier=False)
        steps = [
            BaselineKind.SELF_TRAINING_ONLY,
            BaselineKind.SELF_INV,
            BaselineKind.SELF_INV_DIS,
            BaselineKind.SELF_INV_DIS_J,
            BaselineKind.FULL,
        ]
        level = steps.index(self)
        return AblationFlags(
            invariance=level >= 1,
            discrimination=level >= 2,
            selection=level >= 3,
            prototype_update=level >= 4,
        )


# Ablation-table order: source, then components added one at a time, then the amplifier row.
ABLATION_ROWS = [
    BaselineKind.SOURCE_ONLY,
    BaselineKind.SELF_TRAINING_ONLY,
    BaselineKind.SELF_INV,
    BaselineKind.SELF_INV_DIS,
    BaselineKind.SELF_INV_DIS_J,
    BaselineKind.FULL,
    BaselineKind.NO_AMPLIFIER,
]


class AdaptationConfig(BaseModel):
    lr_step1: float = Field(1e-3, gt=0)
    lr_step2: float = Field(2e-4, gt=0)
    lr_proto: float = Field(1e-2, gt=0)
    optimizer: Literal["sgd", "adaptive-moment"] = "adaptive-moment"
    lambda_inv: float = Field(1.0, ge=0)
    ema_momentum: float = Field(0.99, gt=0, lt=1)
    threshold: float = Field(0.1, gt=0, lt=1)
    queue_capacity: int = Field(64, ge=1)  # 256 at benchmark scale
    num_prototypes: int = Field(16, ge=1)  # 40 at benchmark scale
    proto_update_steps: int = Field(5, ge=1)
    predict_with_amplifier: bool = True
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    flags: AblationFlags = Field(default_factory=AblationFlags)
    track_prototype_drift: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _queue_holds_prototypes(self):
        if self.num_prototypes > self.queue_capacity:
            raise ValueError("num_prototypes cannot exceed queue_capacity")
        return self

    def with_baseline(self, baseline: Union["BaselineKind", str]) -> "AdaptationConfig":
        return self.model_copy(update={"flags": BaselineKind(baseline).flags()})


def load_config_file(path: Union[str, Path], model: Type[T]) -> T:
    """Read a TOML or JSON file into `model`, raising ConfigError on any problem."""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            with path.open("rb") as f:
                raw = tomllib.load(f)
        elif path.suffix == ".json":
            raw = json.loads(path.read_text())
        else:
            raise ConfigError(f"{path}: unsupported config format {path.suffix!r} (use .toml or .json)")
        return model.model_validate(raw)
    except (OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid {model.__name__}: {e}") from e
