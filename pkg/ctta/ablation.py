"""
Multi-run experiments over a fixed checkpoint and scenario: the component
ablation (every BaselineKind row) and the threshold / queue-capacity sweeps.

Every run restores the checkpoint afresh, so rows never share adapted weights.
With `workers > 1` the (row, seed) runs are spread over a process pool; the
worker receives only JSON and a checkpoint path, so in-memory models always run
in-process.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np

from .model_config import ABLATION_ROWS, AdaptationConfig, BaselineKind
from .model_report import AblationRow, AblationTable, SweepRow, SweepTable
from .model_scenario import ScenarioConfig
from .networks import TestDGModel
from .run_scenario import ModelSource, run_scenario

logger = logging.getLogger(__name__)

SweepParameter = Literal["threshold", "queue_capacity"]

THRESHOLD_GRID = [0.02, 0.05, 0.1, 0.15, 0.2]
QUEUE_CAPACITY_GRID = [16, 32, 64, 128]

# (checkpoint path, scenario json, config json, baseline, seed)
Job = Tuple[str, str, str, str, int]


def _mean_error_job(job: Job) -> float:
    path, scenario_json, cfg_json, baseline, seed = job
    report = run_scenario(path, ScenarioConfig.model_validate_json(scenario_json),
                          AdaptationConfig.model_validate_json(cfg_json), baseline, seed, analyses=False)
    return report.mean_error


def _run_all(checkpoint: ModelSource, runs: List[Tuple[ScenarioConfig, AdaptationConfig, BaselineKind, int]],
             workers: int) -> List[float]:
    if isinstance(checkpoint, TestDGModel):
        source = checkpoint.snapshot()
        out = []
        for scenario, cfg, baseline, seed in runs:
            model = TestDGModel.init(checkpoint.cfg, 0)
            model.load(source)
            out.append(run_scenario(model, scenario, cfg, baseline, seed, analyses=False).mean_error)
        return out

    jobs: List[Job] = [(str(Path(checkpoint)), s.model_dump_json(), c.model_dump_json(), b.value, seed)
                       for s, c, b, seed in runs]
    if workers <= 1:
        return [_mean_error_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_mean_error_job, jobs))


def _per_seed(values: Sequence[float], seeds: Sequence[int]) -> Dict[int, float]:
    return {seed: float(v) for seed, v in zip(seeds, values)}


def run_ablation(checkpoint: ModelSource, scenario: ScenarioConfig, cfg: AdaptationConfig,
                 seeds: Sequence[int] = (0, 1, 2, 3, 4), rows: Sequence[BaselineKind] = ABLATION_ROWS,
                 workers: int = 1) -> AblationTable:
    """Run every ablation row over every seed and tabulate mean error."""
    seeds = list(seeds)
    runs = [(scenario, cfg, BaselineKind(row), seed) for row in rows for seed in seeds]
    errors = _run_all(checkpoint, runs, workers)

    table_rows = []
    for k, row in enumerate(rows):
        chunk = errors[k * len(seeds):(k + 1) * len(seeds)]
        table_rows.append(AblationRow(baseline=row, errors=_per_seed(chunk, seeds), mean_error=float(np.mean(chunk))))
        logger.info("ablation %s: mean error %.4f", BaselineKind(row).value, table_rows[-1].mean_error)
    return AblationTable(scenario=scenario.name, seeds=seeds, rows=table_rows)


def sweep_grid(parameter: SweepParameter) -> List[float]:
    return list(THRESHOLD_GRID if parameter == "threshold" else QUEUE_CAPACITY_GRID)


def _with_value(cfg: AdaptationConfig, parameter: SweepParameter, value: float) -> AdaptationConfig:
    if parameter == "threshold":
        return cfg.model_copy(update={"threshold": float(value)})
    capacity = int(value)
    # num_prototypes may not exceed the queue
    return AdaptationConfig.model_validate({
        **cfg.model_dump(),
        "queue_capacity": capacity,
        "num_prototypes": min(cfg.num_prototypes, capacity),
    })


def run_sweep(checkpoint: ModelSource, scenario: ScenarioConfig, cfg: AdaptationConfig,
              parameter: SweepParameter, values: Sequence[float] = (), seeds: Sequence[int] = (0, 1, 2),
              workers: int = 1) -> SweepTable:
    """Full-method mean error for each value of one hyperparameter."""
    if parameter not in ("threshold", "queue_capacity"):
        raise ValueError(f"cannot sweep {parameter!r}")
    values = list(values) or sweep_grid(parameter)
    seeds = list(seeds)
    runs = [(scenario, _with_value(cfg, parameter, v), BaselineKind.FULL, seed) for v in values for seed in seeds]
    errors = _run_all(checkpoint, runs, workers)

    rows = []
    for k, value in enumerate(values):
        chunk = errors[k * len(seeds):(k + 1) * len(seeds)]
        rows.append(SweepRow(value=float(value), errors=_per_seed(chunk, seeds), mean_error=float(np.mean(chunk))))
        logger.info("sweep %s=%s: mean error %.4f", parameter, value, rows[-1].mean_error)
    return SweepTable(scenario=scenario.name, parameter=parameter, seeds=seeds, rows=rows)
