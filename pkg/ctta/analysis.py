"""Post-hoc probes of the embedding space: inter-domain gap and linear probing."""
import logging
from typing import List, Optional, Sequence

import numpy as np

from .model_report import DomainGap, ProbeSummary
from .model_scenario import DomainSpec, ScenarioConfig
from .networks import TestDGModel
from .numerics import ParamSet, Tensor, backward, make_rng, optimizer_step, xavier
from .set_kernels import chamfer_distance
from .stream import LabeledBatch, apply_domain, sample_source, schedule

logger = logging.getLogger(__name__)

PROBE_STEPS = 200
PROBE_LR = 0.05


def distinct_domains(scenario: ScenarioConfig) -> List[DomainSpec]:
    seen: List[DomainSpec] = []
    for seg in schedule(scenario):
        if seg.domain not in seen:
            seen.append(seg.domain)
    return seen


def probe_batches(scenario: ScenarioConfig, domains: Sequence[DomainSpec], n: int) -> List[LabeledBatch]:
    """One fixed batch per domain, drawn from streams the run itself never sees."""
    out = []
    for k, spec in enumerate(domains):
        clean = sample_source(scenario.task, n, make_rng(scenario.seed, "probe", k))
        out.append(apply_domain(spec, clean, make_rng(scenario.seed, "probe-corrupt", k)))
    return out


def embed(model: TestDGModel, x: np.ndarray) -> np.ndarray:
    with Tensor.no_grad():
        return model.embed(x).data


def domain_gap(model: TestDGModel, batches: Sequence[LabeledBatch]) -> float:
    """Chamfer distance between the embeddings of the first two probe batches."""
    return chamfer_distance(embed(model, batches[0].x), embed(model, batches[1].x))


def _probe_accuracy(features: np.ndarray, labels: np.ndarray, num_labels: int, seed: int) -> float:
    rng = make_rng(seed, "linear-probe", num_labels)
    order = rng.permutation(len(labels))
    split = len(labels) // 2
    train, test = order[:split], order[split:]
    mu, sd = features[train].mean(axis=0), features[train].std(axis=0) + 1e-8
    z = (features - mu) / sd

    params = ParamSet({"w": Tensor(xavier(rng, z.shape[1], num_labels)), "b": Tensor(np.zeros((1, num_labels)))})
    onehot = np.eye(num_labels)[labels[train]]
    for _ in range(PROBE_STEPS):
        params.zero_grad()
        out = Tensor(z[train]) @ params["w"] + params["b"]
        loss = -(out.log_softmax(axis=-1) * Tensor(onehot)).sum(axis=-1).mean()
        backward(loss)
        optimizer_step(params, PROBE_LR, "adaptive-moment")
    pred = (z[test] @ params["w"].data + params["b"].data).argmax(axis=1)
    return float(np.mean(pred == labels[test]))


def linear_probe(model: TestDGModel, batches: Sequence[LabeledBatch], seed: int = 0) -> Optional[ProbeSummary]:
    """Fit linear probes on frozen domain embeddings for domain identity and for class."""
    if len(batches) < 2:
        return None
    feats = np.concatenate([embed(model, b.x) for b in batches])
    domains = np.concatenate([np.full(len(b.y), k) for k, b in enumerate(batches)])
    classes = np.concatenate([b.y for b in batches]).astype(np.int64)
    return ProbeSummary(
        domain_accuracy=_probe_accuracy(feats, domains, len(batches), seed),
        class_accuracy=_probe_accuracy(feats, classes, model.cfg.num_classes, seed),
    )


def gap_report(domains: Sequence[DomainSpec], start: float, end: float) -> DomainGap:
    return DomainGap(domains=[d.tag for d in domains[:2]], start=start, end=end)
