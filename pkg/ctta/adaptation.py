"""
The online adaptation loop.

Every incoming batch goes through one iteration:

    embed (amplifier on) -> confidence -> detect change -> on change: select
    prototypes from the queue and clear it -> enqueue -> step 1 (extractor,
    amplifier, discriminator) -> step 2 (encoder, head) -> EMA teacher ->
    prototype update

Only the most recent previous domain is remembered: the queue holds the
embeddings seen since the last detected change, and the prototypes are a
greedy MMD summary of the queue taken at the moment of the change.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Hashable, List, Optional, Tuple

import numpy as np

from .errors import AdaptationError, ContractError
from .model_config import AdaptationConfig, AugmentationConfig
from .model_report import BatchRecord
from .networks import (
    TestDGModel,
    balance,
    classify,
    domain_embeddings,
    ema_update,
    loss_dis,
    loss_inv,
    loss_self,
    nearest_pairing,
)
from .numerics import ParamSet, Tensor, backward, make_rng, optimizer_step
from .set_kernels import (
    EmbeddingSet,
    KernelConfig,
    chamfer_distance,
    chamfer_tensor,
    greedy_indices,
    median_heuristic_gamma,
    mmd_squared,
)
from .stream import planar_rotation

logger = logging.getLogger(__name__)


@dataclass
class QueueEntry:
    embedding: np.ndarray
    source: Tuple[int, int]  # (batch index, sample index)
    x: np.ndarray


class DomainQueue:
    """Bounded FIFO of domain embeddings from the current test domain."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._entries: Deque[QueueEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def extend(self, embeddings: np.ndarray, inputs: np.ndarray, batch_index: int) -> None:
        for i, (emb, x) in enumerate(zip(embeddings, inputs)):
            self._entries.append(QueueEntry(np.array(emb), (batch_index, i), np.array(x)))

    def clear(self) -> None:
        self._entries.clear()

    def as_set(self) -> EmbeddingSet:
        return EmbeddingSet(np.stack([e.embedding for e in self._entries]), [e.source for e in self._entries])

    def inputs(self) -> np.ndarray:
        return np.stack([e.x for e in self._entries])


@dataclass
class PrototypeState:
    vectors: np.ndarray
    source_ids: List[Hashable]
    source_inputs: np.ndarray
    kernel: KernelConfig = field(default_factory=KernelConfig)
    padded: bool = False

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def as_set(self) -> EmbeddingSet:
        return EmbeddingSet(self.vectors, list(self.source_ids))


@dataclass
class DetectorState:
    threshold: float = 0.1
    last_confidence: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ContractError(f"detection threshold must lie in (0, 1), got {self.threshold}")


def batch_confidence(probs: np.ndarray) -> float:
    """Mean over the batch of the top-class probability."""
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError("batch_confidence needs a non-empty batch of probability vectors")
    return float(probs.max(axis=1).mean())


def detect_change(det: DetectorState, conf_cur: float) -> bool:
    """True when the confidence moved by more than the threshold since the last batch."""
    previous = det.last_confidence
    det.last_confidence = conf_cur
    if previous is None:
        return False
    return abs(conf_cur - previous) > det.threshold


def select_prototypes(F: EmbeddingSet, inputs: np.ndarray, n: int, kernel: KernelConfig,
                      greedy: bool = True, rng: Optional[np.random.Generator] = None) -> PrototypeState:
    """Reduce F to n prototypes, padding round-robin when F is too small."""
    take = min(n, len(F))
    if greedy:
        picks = greedy_indices(F, take, kernel)
    else:
        rng = rng if rng is not None else make_rng(0, "random-selection")
        picks = [int(i) for i in rng.choice(len(F), size=take, replace=False)]
    padded = take < n
    if padded:
        logger.warning("only %d embeddings for %d prototypes; padding by repeating picks", len(F), n)
        picks = [picks[i % take] for i in range(n)]
    return PrototypeState(
        vectors=F.vectors[picks].copy(),
        source_ids=[F.source_ids[i] for i in picks],
        source_inputs=inputs[picks].copy(),
        kernel=kernel,
        padded=padded,
    )


def _kernel_for(F: EmbeddingSet) -> KernelConfig:
    return median_heuristic_gamma(F) if len(F) >= 2 else KernelConfig(gamma=1.0)


def on_domain_change(queue: DomainQueue, cfg: AdaptationConfig,
                     rng: Optional[np.random.Generator] = None) -> PrototypeState:
    """Summarize the queue into fresh prototypes and empty it."""
    if len(queue) == 0:
        raise ContractError("cannot select prototypes from an empty queue")
    F = queue.as_set()
    kernel = _kernel_for(F)
    proto = select_prototypes(F, queue.inputs(), cfg.num_prototypes, kernel, greedy=cfg.flags.selection, rng=rng)
    queue.clear()
    logger.info("domain change: selected %d prototypes from %d embeddings (gamma=%.4g)",
                len(proto), len(F), kernel.gamma)
    return proto


def augment(x: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise plus a small rotation in one random coordinate plane per sample."""
    out = np.array(x, dtype=np.float64)
    dim = out.shape[1]
    max_angle = np.deg2rad(aug.max_rotation_deg)
    for row in range(out.shape[0]):
        i, j = rng.choice(dim, size=2, replace=False)
        angle = rng.uniform(-max_angle, max_angle)
        out[row] = planar_rotation(dim, i, j, angle) @ out[row]
    return out + aug.noise_std * rng.normal(size=out.shape)


def cold_start_prototypes(model: TestDGModel, first_batch: np.ndarray, cfg: AdaptationConfig,
                          rng: Optional[np.random.Generator] = None) -> PrototypeState:
    """Prototypes from augmented copies of the first batch, for when no previous domain exists."""
    rng = rng if rng is not None else make_rng(cfg.seed, "cold-start")
    copies = [augment(first_batch, cfg.augmentation, rng) for _ in range(cfg.augmentation.copies_per_sample)]
    inputs = np.concatenate(copies, axis=0)
    with Tensor.no_grad():
        emb = model.embed(inputs).data
    F = EmbeddingSet(emb, [(-1, i) for i in range(len(emb))])
    return select_prototypes(F, inputs, cfg.num_prototypes, _kernel_for(F), greedy=cfg.flags.selection, rng=rng)


def step1(model: TestDGModel, params: ParamSet, x: np.ndarray, proto: PrototypeState,
          cfg: AdaptationConfig, rng: Optional[np.random.Generator] = None) -> float:
    """One discriminator-loss update of extractor, amplifier and discriminator; encoder untouched."""
    params.zero_grad()
    emb = domain_embeddings(model.extractor, model.features(x, amplifier_on=True))
    loss = loss_dis(model.discriminator, emb, proto.vectors, rng)
    backward(loss)
    optimizer_step(params, cfg.lr_step1, cfg.optimizer)
    return loss.item()


@dataclass
class Step2Result:
    probs: np.ndarray
    loss: float
    loss_self: Optional[float]
    loss_inv: Optional[float]


def step2(model: TestDGModel, x: np.ndarray, proto: PrototypeState, cfg: AdaptationConfig,
          rng: Optional[np.random.Generator] = None) -> Step2Result:
    """One update of encoder and head on L_self + lambda * L_inv, then the EMA teacher."""
    enc = model.encoder
    enc.params.zero_grad()
    feats = model.features(x, amplifier_on=cfg.predict_with_amplifier)
    probs = classify(enc, feats)

    total: Optional[Tensor] = None
    self_value = inv_value = None
    if cfg.flags.self_training:
        with Tensor.no_grad():
            pseudo = classify(model.teacher.encoder,
                              model.features(x, amplifier_on=cfg.predict_with_amplifier, teacher=True)).data
        l_self = loss_self(probs, pseudo, enc.num_classes)
        self_value = l_self.item()
        total = l_self
    if cfg.flags.invariance and cfg.lambda_inv > 0:
        emb_feats = feats if cfg.predict_with_amplifier else model.features(x, amplifier_on=True)
        emb = domain_embeddings(model.extractor, emb_feats)
        rows, _ = balance(emb.shape[0], len(proto), rng)
        if len(rows) != emb.shape[0]:
            emb = emb.take(rows)
        pairing = nearest_pairing(emb.data, proto.vectors)
        l_inv = loss_inv(emb, proto.vectors, pairing)
        inv_value = l_inv.item()
        total = l_inv * cfg.lambda_inv if total is None else total + l_inv * cfg.lambda_inv

    if total is not None:
        backward(total)
        optimizer_step(enc.params, cfg.lr_step2, cfg.optimizer)
    ema_update(model.teacher, enc)
    return Step2Result(probs.data.copy(), total.item() if total is not None else 0.0, self_value, inv_value)


def update_prototypes(proto: PrototypeState, F_cur_before: np.ndarray, F_cur_after: np.ndarray,
                      cfg: AdaptationConfig) -> float:
    """Move prototypes so their Chamfer distance to the current batch survives the model update.

    Returns the final |d_before - d_after| residual. A step that increases the
    residual is undone and ends the update.
    """
    target = chamfer_distance(F_cur_before, proto.vectors)
    after = Tensor(F_cur_after)
    protos = Tensor(proto.vectors, name="prototypes")
    params = ParamSet({"prototypes": protos})

    def residual() -> Tensor:
        return (chamfer_tensor(after, protos) - target).abs()

    with Tensor.no_grad():
        current = residual().item()
    for _ in range(cfg.proto_update_steps):
        if current == 0.0:
            break
        params.zero_grad()
        backward(residual())
        previous = protos.data.copy()
        optimizer_step(params, cfg.lr_proto, cfg.optimizer)
        with Tensor.no_grad():
            candidate = residual().item()
        if candidate > current:
            protos.data = previous
            logger.debug("prototype step rejected (%.6g -> %.6g)", current, candidate)
            break
        current = candidate
    proto.vectors = protos.data.copy()
    return current


class AdaptationState:
    """Everything the online loop carries from one batch to the next."""

    def __init__(self, model: TestDGModel, cfg: AdaptationConfig, prototypes: PrototypeState):
        self.model = model
        self.cfg = cfg
        self.prototypes = prototypes
        self.queue = DomainQueue(cfg.queue_capacity)
        self.detector = DetectorState(cfg.threshold)
        self.rng = make_rng(cfg.seed, "adaptation")
        model.amplifier.enabled = cfg.flags.amplifier
        model.teacher.momentum = cfg.ema_momentum
        model.encoder.params.reset_optimizer()
        step1_tensors = {}
        groups = [("extractor", model.extractor.params), ("discriminator", model.discriminator.params)]
        if cfg.flags.amplifier:
            groups.append(("amplifier", model.amplifier.params))
        for group, params in groups:
            step1_tensors.update({f"{group}.{name}": p for name, p in params.items()})
        self.step1_params = ParamSet(step1_tensors)

    @classmethod
    def start(cls, model: TestDGModel, cfg: AdaptationConfig, first_batch: np.ndarray) -> "AdaptationState":
        model.amplifier.enabled = cfg.flags.amplifier
        return cls(model, cfg, cold_start_prototypes(model, first_batch, cfg))


def adapt_batch(state: AdaptationState, x: np.ndarray, batch_index: int) -> Tuple[np.ndarray, BatchRecord]:
    """Run one full iteration on an unlabeled batch; returns the student's predictions."""
    model, cfg = state.model, state.cfg
    try:
        with Tensor.no_grad():
            probs0 = classify(model.encoder, model.features(x, amplifier_on=cfg.predict_with_amplifier)).data
            F_before = model.embed(x).data
        conf = batch_confidence(probs0)
        detected = detect_change(state.detector, conf)
        selected = False
        if detected:
            if len(state.queue) > 0:
                state.prototypes = on_domain_change(state.queue, cfg, state.rng)
                selected = True
            else:
                logger.info("batch %d: change detected with an empty queue; keeping prototypes", batch_index)
        state.queue.extend(F_before, x, batch_index)

        dis_value = None
        if cfg.flags.discrimination:
            dis_value = step1(model, state.step1_params, x, state.prototypes, cfg, state.rng)
        result = step2(model, x, state.prototypes, cfg, state.rng)

        residual = drift_before = drift_after = None
        if cfg.flags.prototype_update:
            previous = state.prototypes.vectors.copy()
            with Tensor.no_grad():
                F_after = model.embed(x).data
            residual = update_prototypes(state.prototypes, F_before, F_after, cfg)
            if cfg.track_prototype_drift:
                with Tensor.no_grad():
                    targets = model.embed(state.prototypes.source_inputs).data
                drift_before = mmd_squared(targets, previous, state.prototypes.kernel)
                drift_after = mmd_squared(targets, state.prototypes.vectors, state.prototypes.kernel)
    except (ValueError, ArithmeticError) as e:
        raise AdaptationError(batch_index, e) from e

    logger.debug("batch %d: conf=%.4f dis=%s self=%s inv=%s residual=%s", batch_index, conf,
                 dis_value, result.loss_self, result.loss_inv, residual)
    if detected:
        logger.info("batch %d: domain change detected (confidence %.4f)", batch_index, conf)
    record = BatchRecord(
        index=batch_index,
        detected=detected,
        selected=selected,
        padded_prototypes=selected and state.prototypes.padded,
        confidence=conf,
        loss_dis=dis_value,
        loss_self=result.loss_self,
        loss_inv=result.loss_inv,
        update_residual=residual,
        drift_mmd_before=drift_before,
        drift_mmd_after=drift_after,
        batch_size=int(x.shape[0]),
    )
    return result.probs, record
