"""
The learnable parts of the adaptation model.

Data flows input -> encoder layers (each optionally followed by a residual
domain amplifier) -> features. Features feed the classification head for
predictions and the domain information extractor for domain embeddings; the
discriminator scores embeddings as "current domain" vs "previous domain". The
EMA teacher mirrors the encoder and head only.
"""
import logging
from typing import Dict, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError
from .model_config import ModelConfig
from .numerics import ParamSet, Tensor, as_tensor, make_rng, xavier
from .set_kernels import EmbeddingSet

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
DISC_EPS = 1e-7

Batch = Union[np.ndarray, Tensor]


def _linear(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def _add_linear(params: ParamSet, prefix: str, rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False) -> None:
    params.add(f"{prefix}.w", np.zeros((n_in, n_out)) if zero else xavier(rng, n_in, n_out))
    params.add(f"{prefix}.b", np.zeros((1, n_out)))


class EncoderNet:
    """Fully connected encoder plus its linear classification head."""

    def __init__(self, widths: Sequence[int], num_classes: int, params: ParamSet):
        self.widths = list(widths)
        self.num_classes = num_classes
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "EncoderNet":
        widths = cfg.layer_widths()
        params = ParamSet()
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            _add_linear(params, f"layer{i}", rng, n_in, n_out)
        _add_linear(params, "head", rng, cfg.feat_dim, cfg.num_classes)
        return cls(widths, cfg.num_classes, params)

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def feat_dim(self) -> int:
        return self.widths[-1]

    def copy(self) -> "EncoderNet":
        params = ParamSet({name: Tensor(p.data, name=name) for name, p in self.params.items()})
        return EncoderNet(self.widths, self.num_classes, params)


class AmplifierNet:
    """One bottleneck adapter per encoder layer, added residually when enabled."""

    def __init__(self, params: ParamSet, enabled: bool = True):
        self.params = params
        self.enabled = enabled

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, enabled: bool = True) -> "AmplifierNet":
        params = ParamSet()
        for i, width in enumerate(cfg.layer_widths()[1:]):
            _add_linear(params, f"adapter{i}.down", rng, width, cfg.bottleneck)
            # zero up-projection: a fresh adapter leaves the encoder output untouched
            _add_linear(params, f"adapter{i}.up", rng, cfg.bottleneck, width, zero=True)
        return cls(params, enabled)

    def residual(self, layer: int, h: Tensor) -> Tensor:
        down = _linear(self.params, f"adapter{layer}.down", h).relu()
        return _linear(self.params, f"adapter{layer}.up", down)


class ExtractorNet:
    """Two-layer ReLU MLP from features to domain embeddings."""

    def __init__(self, params: ParamSet, dom_dim: int):
        self.params = params
        self.dom_dim = dom_dim

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ExtractorNet":
        params = ParamSet()
        _add_linear(params, "fc1", rng, cfg.feat_dim, cfg.extractor_hidden)
        _add_linear(params, "fc2", rng, cfg.extractor_hidden, cfg.dom_dim)
        return cls(params, cfg.dom_dim)


class DiscriminatorNet:
    """Maps a domain embedding to P(current domain)."""

    def __init__(self, params: ParamSet, hidden: int = 0):
        self.params = params
        self.hidden = hidden

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "DiscriminatorNet":
        params = ParamSet()
        if cfg.discriminator_hidden:
            _add_linear(params, "fc1", rng, cfg.dom_dim, cfg.discriminator_hidden)
            _add_linear(params, "out", rng, cfg.discriminator_hidden, 1)
        else:
            _add_linear(params, "out", rng, cfg.dom_dim, 1)
        return cls(params, cfg.discriminator_hidden)

    def __call__(self, embeddings: Batch) -> Tensor:
        h = as_tensor(embeddings)
        if self.hidden:
            h = _linear(self.params, "fc1", h).gelu()
        return _linear(self.params, "out", h).sigmoid().reshape(h.shape[0])


class TeacherState:
    """EMA copy of the encoder and head."""

    def __init__(self, encoder: EncoderNet, momentum: float):
        self.encoder = encoder
        self.momentum = momentum

    @classmethod
    def from_student(cls, student: EncoderNet, momentum: float) -> "TeacherState":
        return cls(student.copy(), momentum)


class TestDGModel:
    """All four learnable components plus the teacher, built from one seed."""

    __test__ = False  # not a pytest class

    def __init__(self, cfg: ModelConfig, encoder: EncoderNet, amplifier: AmplifierNet,
                 extractor: ExtractorNet, discriminator: DiscriminatorNet, teacher: TeacherState):
        self.cfg = cfg
        self.encoder = encoder
        self.amplifier = amplifier
        self.extractor = extractor
        self.discriminator = discriminator
        self.teacher = teacher

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, momentum: float = 0.99) -> "TestDGModel":
        encoder = EncoderNet.init(cfg, make_rng(seed, "encoder"))
        return cls(
            cfg,
            encoder,
            AmplifierNet.init(cfg, make_rng(seed, "amplifier")),
            ExtractorNet.init(cfg, make_rng(seed, "extractor")),
            DiscriminatorNet.init(cfg, make_rng(seed, "discriminator")),
            TeacherState.from_student(encoder, momentum),
        )

    def groups(self) -> Dict[str, ParamSet]:
        return {
            "encoder": self.encoder.params,
            "amplifier": self.amplifier.params,
            "extractor": self.extractor.params,
            "discriminator": self.discriminator.params,
            "teacher": self.teacher.encoder.params,
        }

    def snapshot(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {group: params.snapshot() for group, params in self.groups().items()}

    def load(self, arrays: Dict[str, Dict[str, np.ndarray]]) -> None:
        for group, params in self.groups().items():
            if group in arrays:
                params.load(arrays[group])

    def reset_teacher(self) -> None:
        self.teacher.encoder.params.load(self.encoder.params.snapshot())

    def features(self, x: Batch, amplifier_on: Optional[bool] = None, teacher: bool = False) -> Tensor:
        on = self.amplifier.enabled if amplifier_on is None else amplifier_on and self.amplifier.enabled
        enc = self.teacher.encoder if teacher else self.encoder
        return forward_features(enc, self.amplifier, x, on)

    def embed(self, x: Batch) -> Tensor:
        """Domain embeddings along the deployed path (amplifier on when enabled)."""
        return domain_embeddings(self.extractor, self.features(x, amplifier_on=True))


def forward_features(enc: EncoderNet, amp: Optional[AmplifierNet], x: Batch, amplifier_on: bool) -> Tensor:
    h = as_tensor(x)
    if h.ndim != 2 or h.shape[1] != enc.input_dim:
        raise DimensionError(f"encoder expects inputs of width {enc.input_dim}, got shape {h.shape}")
    for i in range(enc.num_layers):
        h = _linear(enc.params, f"layer{i}", h).gelu()
        if amplifier_on and amp is not None:
            h = h + amp.residual(i, h)
    return h


def logits(enc: EncoderNet, features: Tensor) -> Tensor:
    features = as_tensor(features)
    if features.shape[-1] != enc.feat_dim:
        raise DimensionError(f"head expects features of width {enc.feat_dim}, got {features.shape}")
    return _linear(enc.params, "head", features)


def classify(enc: EncoderNet, features: Tensor) -> Tensor:
    return logits(enc, features).softmax(axis=-1)


def domain_embeddings(ext: ExtractorNet, features: Tensor) -> Tensor:
    h = _linear(ext.params, "fc1", as_tensor(features)).relu()
    return _linear(ext.params, "fc2", h)


def extract_domain_embeddings(ext: ExtractorNet, features: Tensor) -> EmbeddingSet:
    with Tensor.no_grad():
        emb = domain_embeddings(ext, features)
    return EmbeddingSet(emb.data, list(range(emb.shape[0])))


def _rows(value: Union[Tensor, EmbeddingSet, np.ndarray]) -> Tensor:
    if isinstance(value, EmbeddingSet):
        return Tensor(value.vectors)
    return as_tensor(value)


def balance(n_cur: int, n_pre: int, rng: Optional[np.random.Generator]) -> tuple[np.ndarray, np.ndarray]:
    """Row indices that cut the larger of two sets down to the smaller one's size."""
    n = min(n_cur, n_pre)
    rng = rng if rng is not None else make_rng(0, "balance")
    cur = np.sort(rng.choice(n_cur, size=n, replace=False)) if n_cur > n else np.arange(n_cur)
    pre = np.sort(rng.choice(n_pre, size=n, replace=False)) if n_pre > n else np.arange(n_pre)
    return cur, pre


def loss_dis(disc: DiscriminatorNet, F_cur, P_pre, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Binary cross-entropy of the discriminator: current embeddings -> 1, prototypes -> 0."""
    f, p = _rows(F_cur), _rows(P_pre)
    if f.shape[0] == 0 or p.shape[0] == 0:
        raise ContractError("loss_dis needs non-empty current and previous sets")
    cur_idx, pre_idx = balance(f.shape[0], p.shape[0], rng)
    if len(cur_idx) != f.shape[0]:
        f = f.take(cur_idx)
    if len(pre_idx) != p.shape[0]:
        p = p.take(pre_idx)
    n = f.shape[0]
    d_cur = disc(f).clip(DISC_EPS, 1.0 - DISC_EPS)
    d_pre = disc(p).clip(DISC_EPS, 1.0 - DISC_EPS)
    return -(d_cur.log().sum() + (1.0 - d_pre).log().sum()) * (1.0 / n)


def nearest_pairing(F_cur: np.ndarray, P_pre: np.ndarray) -> np.ndarray:
    """Index of the L1-nearest prototype for every current embedding."""
    dist = np.abs(F_cur[:, None, :] - P_pre[None, :, :]).sum(axis=2)
    return np.argmin(dist, axis=1)


def loss_inv(F_cur, P_pre, pairing: Sequence[int]) -> Tensor:
    """Mean L1 distance between paired embeddings; prototypes act as constants."""
    f = _rows(F_cur)
    protos = P_pre.vectors if isinstance(P_pre, EmbeddingSet) else np.asarray(
        P_pre.data if isinstance(P_pre, Tensor) else P_pre, dtype=np.float64)
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.size == 0 or f.shape[0] == 0:
        raise ContractError("loss_inv needs at least one pair")
    if pairing.shape[0] != f.shape[0]:
        raise ContractError(f"pairing has {pairing.shape[0]} entries for {f.shape[0]} embeddings")
    target = Tensor(protos[pairing])
    return (f - target).abs().sum(axis=1).mean()


def loss_self(y_hat: Tensor, y_tilde, num_classes: int) -> Tensor:
    """-(1/C) sum_c y~_c log y^_c, averaged over the batch when given one."""
    y_hat = as_tensor(y_hat)
    target = np.asarray(y_tilde.data if isinstance(y_tilde, Tensor) else y_tilde, dtype=np.float64)
    if y_hat.shape != target.shape or y_hat.shape[-1] != num_classes:
        raise DimensionError(f"loss_self: shapes {y_hat.shape} and {target.shape} for C={num_classes}")
    per_row = (y_hat.clip(PROB_EPS, 1.0).log() * Tensor(target)).sum(axis=-1) * (-1.0 / num_classes)
    return per_row.mean() if per_row.ndim else per_row


def cross_entropy(logit_batch: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    onehot = np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]
    return -(logit_batch.log_softmax(axis=-1) * Tensor(onehot)).sum(axis=-1).mean()


def ema_update(teacher: TeacherState, student: EncoderNet, momentum: Optional[float] = None) -> None:
    mu = teacher.momentum if momentum is None else momentum
    if not 0.0 <= mu <= 1.0:
        raise ContractError(f"EMA momentum must lie in [0, 1], got {mu}")
    for name, t in teacher.encoder.params.items():
        s = student.params[name]
        if s.shape != t.shape:
            raise DimensionError(f"teacher/student mismatch on {name}: {t.shape} vs {s.shape}")
        t.data = mu * t.data + (1.0 - mu) * s.data
