"""
Aggregate metrics over a stream of BatchRecords.

Error is per-batch misclassification rate; a domain's error is the mean over
its batches and the run's mean error weights domains by their batch counts.
Forgetting follows the usual continual-learning definition, in error terms:
for every domain seen in more than one round, last-round error minus the best
earlier-round error, averaged over those domains.
"""
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .model_report import BatchRecord, DetectionSummary


def per_domain_error(records: Sequence[BatchRecord]) -> tuple[Dict[str, float], Dict[str, int]]:
    rates: Dict[str, List[float]] = defaultdict(list)
    for rec in records:
        rates[rec.domain].append(rec.error_rate)
    return ({d: float(np.mean(r)) for d, r in rates.items()},
            {d: len(r) for d, r in rates.items()})


def mean_error(errors: Dict[str, float], batches: Dict[str, int]) -> float:
    total = sum(batches.values())
    if total == 0:
        return 0.0
    return float(sum(errors[d] * batches[d] for d in errors) / total)


def per_round_error(records: Sequence[BatchRecord]) -> Dict[str, List[float]]:
    table: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        table[rec.domain][rec.round].append(rec.error_rate)
    return {d: [float(np.mean(rounds[r])) for r in sorted(rounds)] for d, rounds in table.items()}


def forgetting(round_errors: Dict[str, List[float]]) -> Optional[float]:
    drops = [errs[-1] - min(errs[:-1]) for errs in round_errors.values() if len(errs) > 1]
    return float(np.mean(drops)) if drops else None


def detection_summary(records: Sequence[BatchRecord], tolerance: int = 1) -> DetectionSummary:
    """Match detections to true change points; a detection may lag a change by up to `tolerance` batches."""
    changes = [r.index for r in records if r.change]
    detections = [r.index for r in records if r.detected]
    hit_detections = sum(1 for d in detections if any(0 <= d - c <= tolerance for c in changes))
    hit_changes = sum(1 for c in changes if any(0 <= d - c <= tolerance for d in detections))
    return DetectionSummary(
        changes=len(changes),
        detections=len(detections),
        true_positives=hit_detections,
        precision=hit_detections / len(detections) if detections else None,
        recall=hit_changes / len(changes) if changes else None,
    )
