import logging
import time
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from . import settings
from .adaptation import AdaptationState, adapt_batch, batch_confidence
from .analysis import distinct_domains, domain_gap, gap_report, linear_probe, probe_batches
from .checkpoint import load_checkpoint
from .errors import AdaptationError
from .metrics import detection_summary, forgetting, mean_error, per_domain_error, per_round_error
from .model_config import AdaptationConfig, BaselineKind
from .model_report import BatchRecord, DriftSummary, RunReport
from .model_scenario import ScenarioConfig
from .networks import TestDGModel, classify
from .numerics import Tensor
from .stream import stream

logger = logging.getLogger(__name__)

PROBE_BATCH = 256

ModelSource = Union[str, Path, TestDGModel]


def resolve_model(source: ModelSource) -> TestDGModel:
    if isinstance(source, TestDGModel):
        return source
    model, _ = load_checkpoint(source)
    return model


def prepare(cfg: AdaptationConfig, scenario: ScenarioConfig, baseline: Union[BaselineKind, str],
            seed: Optional[int]) -> Tuple[AdaptationConfig, ScenarioConfig]:
    """Apply the baseline's flags and, when given, the run seed to both configs."""
    cfg = cfg.with_baseline(baseline)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
        scenario = scenario.model_copy(update={"seed": seed})
    return cfg, scenario


def predict(model: TestDGModel, x: np.ndarray, amplifier_on: bool) -> np.ndarray:
    with Tensor.no_grad():
        return classify(model.encoder, model.features(x, amplifier_on=amplifier_on)).data


def execute(model: TestDGModel, scenario: ScenarioConfig, cfg: AdaptationConfig,
            baseline: BaselineKind, analyses: bool = True) -> RunReport:
    """Online protocol: predict each batch, score it, then (maybe) adapt on it."""
    started = time.perf_counter()
    flags = cfg.flags
    model.amplifier.enabled = flags.amplifier
    domains = distinct_domains(scenario)
    probes = probe_batches(scenario, domains, PROBE_BATCH) if analyses and len(domains) >= 2 else []
    gap_start = domain_gap(model, probes) if probes else None

    state: Optional[AdaptationState] = None
    records = []
    for item in stream(scenario):
        x, y = item.batch
        try:
            if flags.adapt:
                if state is None:
                    state = AdaptationState.start(model, cfg, x)
                probs, rec = adapt_batch(state, x, item.index)
            else:
                probs = predict(model, x, cfg.predict_with_amplifier and flags.amplifier)
                rec = BatchRecord(index=item.index, confidence=batch_confidence(probs), batch_size=len(y))
        except (ValueError, ArithmeticError) as e:
            raise AdaptationError(item.index, e) from e
        wrong = int(np.sum(probs.argmax(axis=1) != y))
        records.append(rec.model_copy(update={
            "domain": item.domain.tag,
            "severity": item.domain.severity,
            "round": item.round,
            "change": item.change,
            "errors": wrong,
            "error_rate": wrong / len(y),
        }))

    errors, batches = per_domain_error(records)
    rounds = per_round_error(records)
    drift = [r for r in records if r.drift_mmd_before is not None]
    report = RunReport(
        scenario=scenario.name,
        baseline=baseline,
        seed=cfg.seed,
        config=cfg,
        scenario_config=scenario,
        records=records,
        per_domain_error=errors,
        per_domain_batches=batches,
        per_round_error=rounds,
        mean_error=mean_error(errors, batches),
        forgetting=forgetting(rounds),
        detection=detection_summary(records, scenario.detection_tolerance),
        prototype_drift=DriftSummary(
            steps=len(drift),
            mean_mmd_before=float(np.mean([r.drift_mmd_before for r in drift])),
            mean_mmd_after=float(np.mean([r.drift_mmd_after for r in drift])),
        ) if drift else None,
        domain_gap=gap_report(domains, gap_start, domain_gap(model, probes)) if probes else None,
        probe=linear_probe(model, probes, cfg.seed) if probes and flags.adapt else None,
    )
    if settings.REPORT_TIMING:
        report.wall_clock_seconds = time.perf_counter() - started
    logger.info("scenario %s [%s, seed %d]: mean error %.4f over %d batches",
                scenario.name, baseline.value, cfg.seed, report.mean_error, len(records))
    return report


def run_scenario(checkpoint: ModelSource, scenario: ScenarioConfig, cfg: AdaptationConfig,
                 baseline: Union[BaselineKind, str] = BaselineKind.FULL, seed: Optional[int] = None,
                 analyses: bool = True) -> RunReport:
    baseline = BaselineKind(baseline)
    cfg, scenario = prepare(cfg, scenario, baseline, seed)
    return execute(resolve_model(checkpoint), scenario, cfg, baseline, analyses)
