"""
Set-level distances between domain embeddings: RBF kernel, squared MMD, the
prototype score J, greedy prototype selection and the Chamfer distance.
"""
from dataclasses import dataclass, field
from typing import Hashable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .errors import ContractError, DimensionError, NonFiniteError
from .numerics import Tensor, as_tensor


class KernelConfig(BaseModel):
    gamma: float = Field(1.0, gt=0)


@dataclass
class EmbeddingSet:
    """Ordered fixed-dimension vectors, each tagged with where it came from."""

    vectors: np.ndarray
    source_ids: List[Hashable] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.vectors.ndim == 1 and self.vectors.size == 0:
            self.vectors = self.vectors.reshape(0, 0)
        if self.vectors.ndim != 2:
            raise DimensionError(f"embedding set needs a 2-D array, got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise NonFiniteError("embedding set contains non-finite values")
        if not self.source_ids:
            self.source_ids = list(range(len(self.vectors)))
        if len(self.source_ids) != len(self.vectors):
            raise ContractError(f"{len(self.source_ids)} source ids for {len(self.vectors)} vectors")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def subset(self, indices: Sequence[int]) -> "EmbeddingSet":
        idx = list(indices)
        return EmbeddingSet(self.vectors[idx], [self.source_ids[i] for i in idx])


def _as_set(value) -> EmbeddingSet:
    return value if isinstance(value, EmbeddingSet) else EmbeddingSet(value)


def _check_pair(a: EmbeddingSet, b: EmbeddingSet, op: str) -> None:
    if len(a) == 0 or len(b) == 0:
        raise ContractError(f"{op} needs two non-empty sets")
    if a.dim != b.dim:
        raise DimensionError(f"{op}: dimensions differ ({a.dim} vs {b.dim})")


def pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return (diff**2).sum(axis=2)


def kernel_matrix(x: np.ndarray, y: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    return np.exp(-cfg.gamma * pairwise_sq_dists(x, y))


def rbf_kernel(x: Sequence[float], y: Sequence[float], cfg: KernelConfig) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"rbf_kernel: lengths differ ({x.shape} vs {y.shape})")
    d = x - y
    return float(np.exp(-cfg.gamma * np.dot(d, d)))


def mmd_squared(F: EmbeddingSet, P: EmbeddingSet, cfg: KernelConfig) -> float:
    """Biased (V-statistic) squared MMD; self-pairs are included."""
    F, P = _as_set(F), _as_set(P)
    _check_pair(F, P, "mmd_squared")
    k_ff = kernel_matrix(F.vectors, F.vectors, cfg).mean()
    k_fp = kernel_matrix(F.vectors, P.vectors, cfg).mean()
    k_pp = kernel_matrix(P.vectors, P.vectors, cfg).mean()
    return float(k_ff - 2.0 * k_fp + k_pp)


def score_J(F: EmbeddingSet, P: Optional[EmbeddingSet], cfg: KernelConfig) -> float:
    """MMD^2(F, empty) - MMD^2(F, P), which is exactly 0 for the empty set."""
    F = _as_set(F)
    if len(F) == 0:
        raise ContractError("score_J needs a non-empty reference set")
    if P is None or len(P) == 0:
        return 0.0
    P = _as_set(P)
    if F.dim != P.dim:
        raise DimensionError(f"score_J: dimensions differ ({F.dim} vs {P.dim})")
    k_fp = kernel_matrix(F.vectors, P.vectors, cfg).mean()
    k_pp = kernel_matrix(P.vectors, P.vectors, cfg).mean()
    return float(2.0 * k_fp - k_pp)


def greedy_indices(F: EmbeddingSet, n: int, cfg: KernelConfig) -> List[int]:
    """Positions in F picked by greedy maximization of J, in pick order."""
    F = _as_set(F)
    if n < 1:
        raise ContractError(f"n must be positive, got {n}")
    if n > len(F):
        raise ContractError(f"cannot select {n} prototypes from {len(F)} embeddings")

    K = kernel_matrix(F.vectors, F.vectors, cfg)
    col_mean = K.mean(axis=0)
    diag = np.diag(K)
    chosen: List[int] = []
    available = np.ones(len(F), dtype=bool)
    sum_a = 0.0
    sum_k = 0.0
    row_sum = np.zeros(len(F))  # sum_{p in chosen} K[p, c] for every candidate c

    for k in range(n):
        size = k + 1
        gain = 2.0 * (sum_a + col_mean) / size - (sum_k + 2.0 * row_sum + diag) / size**2
        gain = np.where(available, gain, -np.inf)
        best = int(np.argmax(gain))  # first maximum = lowest index on ties
        chosen.append(best)
        available[best] = False
        sum_a += col_mean[best]
        sum_k += 2.0 * row_sum[best] + diag[best]
        row_sum += K[best]
    return chosen


def greedy_select(F: EmbeddingSet, n: int, cfg: KernelConfig) -> EmbeddingSet:
    F = _as_set(F)
    return F.subset(greedy_indices(F, n, cfg))


def chamfer_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable Chamfer distance between the rows of `a` and `b`."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError(f"chamfer distance needs two non-empty 2-D sets, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"chamfer distance: dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    m, d = a.shape
    n = b.shape[0]
    sq = (a.reshape(m, 1, d) - b.reshape(1, n, d)).square().sum(axis=2)
    return sq.min(axis=1).sum() + sq.min(axis=0).sum()


def chamfer_distance(A: EmbeddingSet, B: EmbeddingSet) -> float:
    A, B = _as_set(A), _as_set(B)
    _check_pair(A, B, "chamfer_distance")
    sq = pairwise_sq_dists(A.vectors, B.vectors)
    return float(sq.min(axis=1).sum() + sq.min(axis=0).sum())


def median_heuristic_gamma(F: EmbeddingSet) -> KernelConfig:
    """gamma = 1 / (2 * median pairwise squared distance), or 1 when that median is 0."""
    F = _as_set(F)
    if len(F) < 2:
        raise ContractError("median heuristic needs at least two embeddings")
    sq = pairwise_sq_dists(F.vectors, F.vectors)
    upper = sq[np.triu_indices(len(F), k=1)]
    median = float(np.median(upper))
    if median <= 0.0:
        return KernelConfig(gamma=1.0)
    return KernelConfig(gamma=1.0 / (2.0 * median))
