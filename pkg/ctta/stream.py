"""
Synthetic domain-shifted classification streams.

Clean samples come from Gaussian class clusters (`BaseTask`). A `DomainSpec`
applies one of five label-preserving input transforms whose strength ramps
linearly with severity 1..5; severity 0 is the identity. Per-family constants:

    additive-noise       noise std        0.5 * s
    coordinate-rotation  plane angle      12 deg * s, in every coordinate pair
    anisotropic-scale    log scale        +/- 0.25 * s per coordinate
    affine-contrast      contrast / shift 1 - 0.15 * s  /  0.6 * s along a unit direction
    coordinate-dropout   drop probability 0.12 * s per coordinate
"""
import logging
from typing import Iterator, List, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, ContractError
from .model_scenario import BaseTask, DomainSpec, ScenarioConfig, ScheduledSegment, TRANSFORM_FAMILIES
from .numerics import make_rng

logger = logging.getLogger(__name__)


class LabeledBatch(NamedTuple):
    x: np.ndarray
    y: np.ndarray


class StreamItem(NamedTuple):
    index: int
    batch: LabeledBatch
    domain: DomainSpec
    round: int
    change: bool  # ground truth, never shown to the adaptation engine


def sample_source(task: BaseTask, n: int, rng: Optional[np.random.Generator] = None) -> LabeledBatch:
    if n < 1:
        raise ContractError(f"sample size must be positive, got {n}")
    rng = rng if rng is not None else make_rng(task.seed, "source")
    labels = rng.integers(0, task.num_classes, size=n)
    x = task.class_means()[labels] + task.noise_scale * rng.normal(size=(n, task.dim))
    return LabeledBatch(x, labels)


def planar_rotation(dim: int, i: int, j: int, angle: float) -> np.ndarray:
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, -s, s, c
    return rot


def distortion_magnitude(spec: DomainSpec) -> float:
    """The declared per-family strength; strictly increasing in severity."""
    s = spec.severity
    return {
        "additive-noise": 0.5 * s,
        "coordinate-rotation": np.deg2rad(12.0 * s),
        "anisotropic-scale": 0.25 * s,
        "affine-contrast": 0.15 * s,
        "coordinate-dropout": 0.12 * s,
    }[spec.family]


def _rotation(dim: int, angle: float, seed: int) -> np.ndarray:
    perm = make_rng(seed, "rotation-planes").permutation(dim)
    rot = np.eye(dim)
    for a, b in zip(perm[0::2], perm[1::2]):
        rot = rot @ planar_rotation(dim, a, b, angle)
    return rot


def apply_domain(spec: DomainSpec, batch: LabeledBatch, rng: Optional[np.random.Generator] = None) -> LabeledBatch:
    """Transform inputs only; labels pass through untouched."""
    if spec.family not in TRANSFORM_FAMILIES:
        raise ConfigError(f"unknown transform family {spec.family!r}; expected one of {TRANSFORM_FAMILIES}")
    x = np.array(batch.x, dtype=np.float64)
    if spec.severity == 0:
        return LabeledBatch(x, batch.y)
    rng = rng if rng is not None else make_rng(spec.seed, "apply", spec.family)
    dim = x.shape[1]
    mag = distortion_magnitude(spec)
    fixed = make_rng(spec.seed, "domain-params", spec.family)

    if spec.family == "additive-noise":
        x = x + mag * rng.normal(size=x.shape)
    elif spec.family == "coordinate-rotation":
        x = x @ _rotation(dim, mag, spec.seed).T
    elif spec.family == "anisotropic-scale":
        signs = np.where(fixed.random(dim) < 0.5, -1.0, 1.0)
        x = x * np.exp(signs * mag)
    elif spec.family == "affine-contrast":
        direction = fixed.normal(size=dim)
        direction /= np.linalg.norm(direction)
        x = (1.0 - mag) * x + 4.0 * mag * direction
    elif spec.family == "coordinate-dropout":
        x = x * (rng.random(x.shape) >= mag)
    return LabeledBatch(x, batch.y)


def schedule(scenario: ScenarioConfig) -> List[ScheduledSegment]:
    """Expand a scenario into the ordered segments the stream walks through."""
    segments: List[ScheduledSegment] = []
    for r in range(scenario.rounds):
        for seg in scenario.domains:
            if scenario.mode == "gradual":
                peak = max(seg.domain.severity, 1)
                ramp = list(range(1, peak + 1)) + list(range(peak - 1, 0, -1))
                segments.extend(ScheduledSegment(domain=seg.domain.at_severity(s), batches=seg.batches, round=r)
                                for s in ramp)
            else:
                segments.append(ScheduledSegment(domain=seg.domain, batches=seg.batches, round=r))
    return segments


def stream(scenario: ScenarioConfig, task: Optional[BaseTask] = None) -> Iterator[StreamItem]:
    task = task or scenario.task
    index = 0
    previous: Optional[DomainSpec] = None
    for seg in schedule(scenario):
        for b in range(seg.batches):
            clean = sample_source(task, scenario.batch_size, make_rng(scenario.seed, "stream", index))
            batch = apply_domain(seg.domain, clean, make_rng(scenario.seed, "corrupt", index))
            change = previous is not None and b == 0 and seg.domain != previous
            yield StreamItem(index, batch, seg.domain, seg.round, change)
            index += 1
        previous = seg.domain


def heldout_batches(scenario: ScenarioConfig, spec: DomainSpec, task: Optional[BaseTask] = None) -> Iterator[LabeledBatch]:
    task = task or scenario.task
    for b in range(scenario.heldout_batches):
        key = f"heldout-{spec.tag}"
        clean = sample_source(task, scenario.batch_size, make_rng(scenario.seed, key, b))
        yield apply_domain(spec, clean, make_rng(scenario.seed, key + "-corrupt", b))
