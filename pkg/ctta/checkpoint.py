"""
Checkpoint files: UTF-8 JSON, one document per model.

    {
      "format": "ctta-checkpoint",
      "version": 1,
      "model": {...ModelConfig...},
      "task": {...BaseTask...},
      "seed": 0,
      "source_error": 0.012,
      "groups": {
        "encoder": {"layer0.w": {"shape": [16, 64], "data": [...row-major floats...]}, ...},
        "amplifier": {...}, "extractor": {...}, "discriminator": {...}, "teacher": {...}
      }
    }

Floats are written with shortest round-trip repr, so a reload is bit-exact.
"""
import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from .errors import ConfigError
from .model_config import ModelConfig
from .model_scenario import BaseTask
from .networks import TestDGModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ctta-checkpoint"
CHECKPOINT_VERSION = 1


class ArrayRecord(BaseModel):
    shape: List[int]
    data: List[float]

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ArrayRecord":
        return cls(shape=list(array.shape), data=array.ravel().tolist())

    def to_array(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.float64).reshape(self.shape)


class Checkpoint(BaseModel):
    format: Literal["ctta-checkpoint"] = CHECKPOINT_FORMAT
    version: Literal[1] = CHECKPOINT_VERSION
    model: ModelConfig
    task: BaseTask
    seed: int
    source_error: Optional[float] = None
    groups: Dict[str, Dict[str, ArrayRecord]]

    def arrays(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {g: {name: rec.to_array() for name, rec in params.items()} for g, params in self.groups.items()}


def to_checkpoint(model: TestDGModel, task: BaseTask, seed: int, source_error: Optional[float] = None) -> Checkpoint:
    return Checkpoint(
        model=model.cfg,
        task=task,
        seed=seed,
        source_error=source_error,
        groups={g: {name: ArrayRecord.from_array(a) for name, a in arrays.items()}
                for g, arrays in model.snapshot().items()},
    )


def save_checkpoint(model: TestDGModel, path: Union[str, Path], task: BaseTask, seed: int,
                    source_error: Optional[float] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_checkpoint(model, task, seed, source_error).model_dump_json())
    logger.info("checkpoint written to %s", path)
    return path


def restore_model(ckpt: Checkpoint) -> TestDGModel:
    model = TestDGModel.init(ckpt.model, ckpt.seed)
    model.load(ckpt.arrays())
    return model


def load_checkpoint(path: Union[str, Path]) -> Tuple[TestDGModel, Checkpoint]:
    path = Path(path)
    try:
        ckpt = Checkpoint.model_validate_json(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"{path} is not a valid checkpoint: {e}") from e
    return restore_model(ckpt), ckpt


def fingerprint(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
