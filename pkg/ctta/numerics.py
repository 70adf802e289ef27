"""
Dense float64 arrays with reverse-mode differentiation.

A `Tensor` wraps a numpy array and records the operation that produced it, so
that `backward` can accumulate gradients into every reachable input. The
networks in this package are a few hundred parameters wide, which keeps a
numpy-backed tape both fast enough and easy to check against finite
differences.
"""
import logging
import zlib
from contextvars import ContextVar
from typing import Callable, Dict, Iterator, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]
OptimizerMode = Literal["sgd", "adaptive-moment"]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_GELU_K = float(np.sqrt(2.0 / np.pi))
_GELU_C = 0.044715

# One flag per thread and per asyncio task.
_grad_disabled: ContextVar[bool] = ContextVar("ctta_grad_disabled", default=False)


def grad_enabled() -> bool:
    return not _grad_disabled.get()


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def topological_sort(root: "Tensor") -> list["Tensor"]:
    """Return the graph below `root` in dependency order (inputs first)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in reversed(node._prev):
            if id(child) not in visited:
                stack.append((child, False))
    return order


class Tensor:
    class no_grad:
        """Context manager that stops graph recording in the current context."""

        def __enter__(self):
            self._token = _grad_disabled.set(True)

        def __exit__(self, *args):
            _grad_disabled.reset(self._token)

    def __init__(self, data: ArrayLike, _children: Tuple["Tensor", ...] = (), op: str = "", name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self._backward: Optional[Callable[[], None]] = None
        self._prev: Tuple[Tensor, ...] = tuple(_children) if grad_enabled() else ()
        self.op = op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op or 'leaf'})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def _result(self, data: np.ndarray, children: Tuple["Tensor", ...], op: str) -> "Tensor":
        return Tensor(_check_finite(data, op), children, op)

    def _attach(self, out: "Tensor", fn: Callable[[], None]) -> "Tensor":
        if grad_enabled():
            out._backward = fn
        return out

    # -- binary arithmetic ------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        out = self._result(self.data + other.data, (self, other), "add")

        def _backward():
            self.grad += _unbroadcast(out.grad, self.shape)
            other.grad += _unbroadcast(out.grad, other.shape)

        return self._attach(out, _backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = self._result(-self.data, (self,), "neg")

        def _backward():
            self.grad += -out.grad

        return self._attach(out, _backward)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        out = self._result(self.data * other.data, (self, other), "mul")

        def _backward():
            self.grad += _unbroadcast(out.grad * other.data, self.shape)
            other.grad += _unbroadcast(out.grad * self.data, other.shape)

        return self._attach(out, _backward)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        if np.any(other.data == 0):
            raise DomainError("division by zero")
        out = self._result(self.data / other.data, (self, other), "div")

        def _backward():
            self.grad += _unbroadcast(out.grad / other.data, self.shape)
            other.grad += _unbroadcast(-out.grad * self.data / other.data**2, other.shape)

        return self._attach(out, _backward)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.ndim != 2 or other.ndim != 2:
            raise DimensionError(f"matmul expects 2-D operands, got {self.shape} and {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {self.shape} x {other.shape}")
        out = self._result(self.data @ other.data, (self, other), "matmul")

        def _backward():
            self.grad += out.grad @ other.data.T
            other.grad += self.data.T @ out.grad

        return self._attach(out, _backward)

    # -- elementwise ------------------------------------------------------

    def square(self) -> "Tensor":
        out = self._result(self.data**2, (self,), "square")

        def _backward():
            self.grad += 2.0 * self.data * out.grad

        return self._attach(out, _backward)

    def abs(self) -> "Tensor":
        out = self._result(np.abs(self.data), (self,), "abs")

        def _backward():
            # np.sign gives the subgradient 0 at 0
            self.grad += np.sign(self.data) * out.grad

        return self._attach(out, _backward)

    def relu(self) -> "Tensor":
        out = self._result(np.maximum(self.data, 0.0), (self,), "relu")

        def _backward():
            self.grad += (self.data > 0) * out.grad

        return self._attach(out, _backward)

    def gelu(self) -> "Tensor":
        x = self.data
        inner = _GELU_K * (x + _GELU_C * x**3)
        t = np.tanh(inner)
        out = self._result(0.5 * x * (1.0 + t), (self,), "gelu")

        def _backward():
            d_inner = _GELU_K * (1.0 + 3.0 * _GELU_C * x**2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
            self.grad += local * out.grad

        return self._attach(out, _backward)

    def sigmoid(self) -> "Tensor":
        out = self._result(0.5 * (1.0 + np.tanh(0.5 * self.data)), (self,), "sigmoid")

        def _backward():
            self.grad += out.data * (1.0 - out.data) * out.grad

        return self._attach(out, _backward)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise DomainError("log of a non-positive input")
        out = self._result(np.log(self.data), (self,), "log")

        def _backward():
            self.grad += out.grad / self.data

        return self._attach(out, _backward)

    def exp(self) -> "Tensor":
        out = self._result(np.exp(self.data), (self,), "exp")

        def _backward():
            self.grad += out.data * out.grad

        return self._attach(out, _backward)

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = self._result(np.clip(self.data, lo, hi), (self,), "clip")

        def _backward():
            inside = (self.data >= lo) & (self.data <= hi)
            self.grad += inside * out.grad

        return self._attach(out, _backward)

    # -- reductions and reshaping ----------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        out = self._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def _backward():
            self.grad += _expand_reduced(out.grad, self.shape, axis, keepdims)

        return self._attach(out, _backward)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def min(self, axis: int) -> "Tensor":
        """Minimum along `axis`; the gradient flows to the first minimizing index."""
        idx = np.argmin(self.data, axis=axis)
        out = self._result(np.take_along_axis(self.data, np.expand_dims(idx, axis), axis).squeeze(axis), (self,), "min")

        def _backward():
            routed = np.zeros_like(self.data)
            np.put_along_axis(routed, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis)
            self.grad += routed

        return self._attach(out, _backward)

    def reshape(self, *shape: int) -> "Tensor":
        out = self._result(self.data.reshape(shape), (self,), "reshape")

        def _backward():
            self.grad += out.grad.reshape(self.shape)

        return self._attach(out, _backward)

    @property
    def T(self) -> "Tensor":
        out = self._result(self.data.T, (self,), "transpose")

        def _backward():
            self.grad += out.grad.T

        return self._attach(out, _backward)

    def take(self, indices: Sequence[int]) -> "Tensor":
        """Gather rows; repeated indices accumulate their gradients."""
        idx = np.asarray(indices, dtype=np.int64)
        out = self._result(self.data[idx], (self,), "take")

        def _backward():
            np.add.at(self.grad, idx, out.grad)

        return self._attach(out, _backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = self._result(shifted - lse, (self,), "log_softmax")

        def _backward():
            soft = np.exp(out.data)
            self.grad += out.grad - soft * out.grad.sum(axis=axis, keepdims=True)

        return self._attach(out, _backward)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = np.exp(self.data - self.data.max(axis=axis, keepdims=True))
        out = self._result(shifted / shifted.sum(axis=axis, keepdims=True), (self,), "softmax")

        def _backward():
            inner = (out.grad * out.data).sum(axis=axis, keepdims=True)
            self.grad += out.data * (out.grad - inner)

        return self._attach(out, _backward)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return as_tensor(a) @ as_tensor(b)


_UNARY: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": Tensor.relu,
    "gelu": Tensor.gelu,
    "sigmoid": Tensor.sigmoid,
    "log": Tensor.log,
    "abs": Tensor.abs,
    "square": Tensor.square,
}


def elementwise(op: str, *inputs: Union[Tensor, ArrayLike]) -> Tensor:
    """Apply one of add, mul, relu, gelu, sigmoid, log, abs, square."""
    tensors = [as_tensor(x) for x in inputs]
    if op in ("add", "mul"):
        if len(tensors) < 2:
            raise ContractError(f"{op} needs at least two inputs")
        try:
            np.broadcast_shapes(*(t.shape for t in tensors))
        except ValueError as e:
            raise DimensionError(f"{op}: shapes do not broadcast: {[t.shape for t in tensors]}") from e
        out = tensors[0]
        for t in tensors[1:]:
            out = out + t if op == "add" else out * t
        return out
    if op not in _UNARY:
        raise ContractError(f"unknown elementwise op: {op}")
    if len(tensors) != 1:
        raise ContractError(f"{op} takes exactly one input")
    return _UNARY[op](tensors[0])


def backward(root: Tensor) -> None:
    """Reverse-mode accumulation of d(root)/d(node) into every reachable node."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not grad_enabled():
        raise ContractError("backward called inside no_grad")
    root.grad = np.ones_like(root.data)
    for node in reversed(topological_sort(root)):
        if node._backward is not None:
            node._backward()


class ParamSet:
    """Named trainable tensors plus their adaptive-moment buffers."""

    def __init__(self, params: Optional[Mapping[str, Tensor]] = None):
        self.params: Dict[str, Tensor] = dict(params or {})
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name: str, value: ArrayLike) -> Tensor:
        tensor = Tensor(value, name=name)
        self.params[name] = tensor
        return tensor

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ContractError(f"missing parameter {name}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"parameter {name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()
            p.grad = np.zeros_like(p.data)

    def reset_optimizer(self) -> None:
        self.first_moment.clear()
        self.second_moment.clear()
        self.step_count = 0


def optimizer_step(params: ParamSet, lr: float, mode: OptimizerMode = "adaptive-moment") -> None:
    """Update every parameter in place from its populated gradient."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if mode == "sgd":
        for p in params.params.values():
            p.data -= lr * p.grad
        return
    if mode != "adaptive-moment":
        raise ContractError(f"unknown optimizer mode: {mode}")

    params.step_count += 1
    t = params.step_count
    for name, p in params.params.items():
        m = params.first_moment.setdefault(name, np.zeros_like(p.data))
        v = params.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * p.grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * p.grad**2
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def make_rng(seed: int, *streams: Union[int, str]) -> np.random.Generator:
    """Counter-based generator for an independent named stream under `seed`."""
    keys = tuple(s if isinstance(s, int) else zlib.crc32(s.encode()) for s in streams)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=keys)))


def xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, (n_in, n_out))
