from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .model_config import load_config_file
from .numerics import make_rng

SCENARIO_SCHEMA_VERSION = 1

TransformFamily = Literal[
    "additive-noise",
    "coordinate-rotation",
    "anisotropic-scale",
    "affine-contrast",
    "coordinate-dropout",
]
TRANSFORM_FAMILIES: List[str] = list(TransformFamily.__args__)


class BaseTask(BaseModel):
    """Gaussian class clusters standing in for a clean source dataset."""

    num_classes: int = Field(4, ge=2)
    dim: int = Field(16, ge=2)
    class_separation: float = Field(4.0, gt=0)  # norm of every class mean
    noise_scale: float = Field(1.0, gt=0)  # shared isotropic std
    seed: int = 0

    def class_means(self) -> np.ndarray:
        rng = make_rng(self.seed, "class-means")
        while True:
            raw = rng.normal(size=(self.num_classes, self.dim))
            means = self.class_separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)
            gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
            if np.all(gaps[np.triu_indices(self.num_classes, k=1)] > 1e-6):
                return means


class DomainSpec(BaseModel):
    family: str
    severity: int = Field(5, ge=0, le=5)
    name: str = ""
    seed: int = 0

    @model_validator(mode="after")
    def _default_name(self):
        if not self.name:
            self.name = self.family
        return self

    @property
    def tag(self) -> str:
        return f"{self.name}@{self.severity}"

    def at_severity(self, severity: int) -> "DomainSpec":
        return self.model_copy(update={"severity": severity})


class DomainSegment(BaseModel):
    domain: DomainSpec
    batches: int = Field(10, ge=1)


class ScenarioConfig(BaseModel):
    schema_version: Literal[1] = SCENARIO_SCHEMA_VERSION
    name: str = "scenario"
    task: BaseTask = Field(default_factory=BaseTask)
    domains: List[DomainSegment]
    batch_size: int = Field(64, ge=1)
    mode: Literal["sequential", "gradual", "leave-one-out"] = "sequential"
    held_out: List[DomainSpec] = Field(default_factory=list)
    heldout_batches: int = Field(10, ge=1)
    rounds: int = Field(1, ge=1)
    detection_tolerance: int = Field(1, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _non_empty(self):
        if not self.domains:
            raise ValueError("scenario needs at least one domain segment")
        return self


class ScheduledSegment(BaseModel):
    domain: DomainSpec
    batches: int
    round: int


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    return load_config_file(path, ScenarioConfig)


def standard_scenario(severity: int = 5, batches: int = 10, seed: int = 0, batch_size: int = 64,
                      held_out: Optional[List[DomainSpec]] = None) -> ScenarioConfig:
    """All five families in order at one severity."""
    return ScenarioConfig(
        name=f"standard-s{severity}",
        domains=[DomainSegment(domain=DomainSpec(family=f, severity=severity), batches=batches)
                 for f in TRANSFORM_FAMILIES],
        batch_size=batch_size,
        held_out=held_out or [],
        mode="leave-one-out" if held_out else "sequential",
        seed=seed,
    )
