import logging
from typing import Optional, Union

import numpy as np

from .errors import ContractError
from .model_config import AdaptationConfig, BaselineKind
from .model_report import RunReport
from .model_scenario import ScenarioConfig
from .run_scenario import ModelSource, execute, predict, prepare, resolve_model
from .stream import heldout_batches

logger = logging.getLogger(__name__)


def run_generalization(checkpoint: ModelSource, scenario: ScenarioConfig, cfg: AdaptationConfig,
                       baseline: Union[BaselineKind, str] = BaselineKind.FULL, seed: Optional[int] = None,
                       analyses: bool = True) -> RunReport:
    """Adapt over the seen domains, then score every held-out domain with all parameters frozen."""
    baseline = BaselineKind(baseline)
    cfg, scenario = prepare(cfg, scenario, baseline, seed)
    model = resolve_model(checkpoint)
    report = execute(model, scenario, cfg, baseline, analyses)

    frozen = model.snapshot()
    amplifier_on = cfg.predict_with_amplifier and cfg.flags.amplifier
    table = {}
    for spec in scenario.held_out:
        rates = [float(np.mean(predict(model, b.x, amplifier_on).argmax(axis=1) != b.y))
                 for b in heldout_batches(scenario, spec)]
        table[spec.tag] = float(np.mean(rates))
    after = model.snapshot()
    for group, arrays in frozen.items():
        for name, value in arrays.items():
            if not np.array_equal(value, after[group][name]):
                raise ContractError(f"held-out evaluation changed {group}.{name}")

    report.operation = "generalize"
    report.generalization = table
    report.generalization_mean = float(np.mean(list(table.values()))) if table else None
    if table:
        logger.info("held-out mean error %.4f over %d domains", report.generalization_mean, len(table))
    return report
