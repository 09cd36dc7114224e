# ==================================================
# File: autodiff.py
# Reverse-mode differentiation over dense numpy tensors
# ==================================================
"""
Minimal tape-free autodiff.

Every op returns a new immutable ``Tensor`` that remembers its parents and a
closure mapping the output gradient to parent gradients. Node ids come from a
process-wide counter, so sorting reachable nodes by id gives a valid
topological order (insertion order). ``backward`` returns a ``Gradients``
mapping instead of writing into tensors, which keeps parameters shareable
between graphs built on different threads.
"""

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from errors import DimensionError, GradientCheckError, NonFiniteError, TargetIndexError
from pipeline_config import Config

_node_ids = itertools.count(1)
_check_finite = contextvars.ContextVar("check_finite", default=False)

ArrayLike = Union[np.ndarray, float, int, Sequence]


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Reject NaN/Inf at every op boundary inside the block"""
    token = _check_finite.set(enabled)
    try:
        yield
    finally:
        _check_finite.reset(token)


class Tensor:
    """Immutable dense array plus the graph edge that produced it"""

    __slots__ = ("data", "requires_grad", "node_id", "op", "parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        array = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data), copy=True)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self.parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a one-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, node={self.node_id}, requires_grad={self.requires_grad})"


def _default_dtype(data) -> np.dtype:
    if isinstance(data, np.ndarray) and data.dtype.kind == 'f':
        return data.dtype
    return np.dtype(np.float64)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    data.setflags(write=False)
    out.data = data
    out.node_id = next(_node_ids)
    out.op = op
    if _check_finite.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}", out.node_id)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out._backward = backward
    else:
        out.parents = ()
        out._backward = None
    return out


# --------------------------------------------------
# Elementwise and linear ops
# --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape addition, or row-wise bias when b is 1-D and a is 2-D"""
    a, b = as_tensor(a), as_tensor(b)
    bias = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not bias:
        raise DimensionError("add", a.shape, b.shape)

    def backward(g):
        return g, (g.sum(axis=0) if bias else g)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("sub", a.shape, b.shape)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return _make("scale", x.data * factor, (x,), lambda g: (g * factor,))


def mul_scalar(s: Tensor, x: Tensor) -> Tensor:
    """Scalar tensor (one element) times any tensor"""
    if s.data.size != 1:
        raise DimensionError("mul_scalar expects a one-element scale", s.shape)
    value = s.data.reshape(())

    def backward(g):
        return (np.reshape(np.sum(g * x.data), s.shape).astype(s.dtype), g * value)

    return _make("mul_scalar", value * x.data, (s, x), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("transpose expects a matrix", x.shape)
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", original, shape) from None
    return _make("reshape", data.copy(), (x,), lambda g: (g.reshape(original),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)"""
    z = x.data
    cdf = 0.5 * (1.0 + special.erf(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return _make("gelu", (z * cdf).astype(x.dtype), (x,),
                 lambda g: ((g * (cdf + z * pdf)).astype(x.dtype),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor"""
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    count = x.data.size if axis is None else shape[axis]

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return _make("mean", np.asarray(x.data.mean(axis=axis), dtype=x.dtype), (x,), backward)


# --------------------------------------------------
# Normalisations
# --------------------------------------------------

def l2_normalize(x: Tensor, eps: float = Config.NORM_EPS) -> Tensor:
    """Unit L2 norm along the last axis; sub-eps rows pass through unchanged"""
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    live = norms > eps
    safe = np.where(live, norms, 1.0)
    out = np.where(live, x.data / safe, x.data).astype(x.dtype)

    def backward(g):
        proj = np.sum(out * g, axis=-1, keepdims=True)
        gx = np.where(live, (g - out * proj) / safe, g)
        return (gx.astype(x.dtype),)

    return _make("l2_normalize", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = Config.LAYER_NORM_EPS) -> Tensor:
    """Row-wise layer normalisation of a (n, d) matrix"""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
    n = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return (dx.astype(x.dtype), (g * xhat).sum(axis=0).astype(gamma.dtype),
                g.sum(axis=0).astype(beta.dtype))

    return _make("layer_norm", out, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis"""
    out = special.softmax(x.data, axis=-1).astype(x.dtype)

    def backward(g):
        return ((out * (g - np.sum(g * out, axis=-1, keepdims=True))).astype(x.dtype),)

    return _make("softmax", out, (x,), backward)


# --------------------------------------------------
# Structural ops
# --------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make("concat", data, tensors, backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a matrix"""
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice [{start}:{stop}]", x.shape)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make("slice", x.data[:, start:stop].copy(), (x,), backward)


def index_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Row gather (embedding-row-select); repeated rows accumulate gradient"""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise DimensionError("row index out of range", x.shape)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make("index_rows", x.data[idx].copy(), (x,), backward)


def index_cols(x: Tensor, indices: Sequence[int]) -> Tensor:
    return transpose(index_rows(transpose(x), indices))


# --------------------------------------------------
# Losses
# --------------------------------------------------

def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector"""
    if logits.ndim != 1:
        raise DimensionError("softmax_cross_entropy expects a vector", logits.shape)
    n = logits.shape[0]
    if not 0 <= target < n:
        raise TargetIndexError(f"target {target} outside [0, {n})")
    z = logits.data
    loss = special.logsumexp(z) - z[target]

    def backward(g):
        grad = special.softmax(z)
        grad[target] -= 1.0
        return ((grad * g).astype(logits.dtype),)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of the per-row softmax cross-entropy"""
    if logits.ndim != 2 or len(targets) != logits.shape[0]:
        raise DimensionError("cross_entropy", logits.shape, (len(targets),))
    rows, cols = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.size and (t.min() < 0 or t.max() >= cols):
        raise TargetIndexError(f"targets outside [0, {cols})")
    z = logits.data
    lse = special.logsumexp(z, axis=1)
    loss = np.mean(lse - z[np.arange(rows), t])

    def backward(g):
        grad = special.softmax(z, axis=1)
        grad[np.arange(rows), t] -= 1.0
        return ((grad * (g / rows)).astype(logits.dtype),)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# --------------------------------------------------
# Graph and backward
# --------------------------------------------------

@dataclass(frozen=True)
class OpRecord:
    node_id: int
    op: str
    inputs: Tuple[int, ...]


class Gradients:
    """Gradient arrays keyed by tensor; absent means no path to the output"""

    def __init__(self, grads: Dict[int, np.ndarray]):
        self._grads = grads

    def get(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self._grads.get(tensor.node_id)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(tensor.node_id)
        if grad is None:
            return np.zeros(tensor.shape, dtype=tensor.dtype)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.node_id in self._grads


class Graph:
    """The ordered op records reachable from one output"""

    def __init__(self, output: Tensor):
        self.output = output
        seen: Dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen[node.node_id] = node
            stack.extend(node.parents)
        self._nodes = [seen[i] for i in sorted(seen)]

    @property
    def nodes(self) -> List[OpRecord]:
        return [OpRecord(n.node_id, n.op, tuple(p.node_id for p in n.parents)) for n in self._nodes]

    def backward(self, seed: Optional[np.ndarray] = None) -> Gradients:
        out = self.output
        grads: Dict[int, np.ndarray] = {}
        if not out.requires_grad:
            return Gradients(grads)
        checking = _check_finite.get()
        grads[out.node_id] = (np.ones(out.shape, dtype=out.dtype) if seed is None
                              else np.asarray(seed, dtype=out.dtype))
        for node in reversed(self._nodes):
            g = grads.get(node.node_id)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if checking and not np.all(np.isfinite(pg)):
                    raise NonFiniteError(f"non-finite gradient flowing out of {node.op}", node.node_id)
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = np.asarray(pg, dtype=parent.dtype)
        return Gradients(grads)


def backward(output: Tensor) -> Gradients:
    if output.data.size != 1:
        raise DimensionError("backward needs a scalar output", output.shape)
    return Graph(output).backward()


# --------------------------------------------------
# Parameters
# --------------------------------------------------

class ParameterSet:
    """Named parameter arrays; each forward pass gets fresh leaf tensors"""

    def __init__(self, arrays: Dict[str, np.ndarray], trainable: Optional[Dict[str, bool]] = None):
        self.arrays = {name: _readonly(a) for name, a in arrays.items()}
        self.trainable = {name: True for name in self.arrays}
        if trainable:
            self.trainable.update(trainable)

    def leaves(self, dtype=None) -> Dict[str, Tensor]:
        return {name: Tensor(a, requires_grad=self.trainable[name],
                             dtype=dtype if dtype is not None else a.dtype)
                for name, a in self.arrays.items()}

    def with_trainable(self, trainable: Dict[str, bool]) -> "ParameterSet":
        """Same arrays (shared, read-only) under different trainable flags"""
        shared = ParameterSet.__new__(ParameterSet)
        shared.arrays = self.arrays
        shared.trainable = {name: bool(trainable.get(name, False)) for name in self.arrays}
        return shared

    def replace(self, name: str, value: np.ndarray):
        if value.shape != self.arrays[name].shape:
            raise DimensionError(f"parameter {name}", value.shape, self.arrays[name].shape)
        self.arrays[name] = _readonly(value)

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


# --------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    worst_error: float = 0.0
    worst_param: int = -1
    worst_index: Tuple[int, ...] = ()
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0
    errors: List[float] = field(default_factory=list, repr=False)


def grad_check(f: Callable[[List[Tensor]], Tensor], params: Sequence[ArrayLike],
               tol: float = 1e-6, step: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of a scalar f with central differences.

    Error per entry is |analytic - numeric| / max(1, |numeric|).
    """
    arrays = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(leaves)
    if out.data.size != 1:
        raise GradientCheckError(f"grad_check needs a scalar function, got shape {out.shape}")
    with check_finite():
        grads = backward(out)

    report = GradCheckReport(passed=True, tol=tol)
    for p_idx, (leaf, base) in enumerate(zip(leaves, arrays)):
        analytic = grads[leaf]
        if not np.all(np.isfinite(analytic)):
            raise GradientCheckError(f"non-finite analytic gradient for parameter {p_idx} (node {leaf.node_id})")
        for index in np.ndindex(base.shape):
            numeric = _central_difference(f, arrays, p_idx, index, step)
            error = abs(analytic[index] - numeric) / max(1.0, abs(numeric))
            report.errors.append(error)
            report.checked += 1
            if error > report.worst_error or report.worst_param < 0:
                report.worst_error = error
                report.worst_param = p_idx
                report.worst_index = tuple(int(i) for i in index)
                report.analytic = float(analytic[index])
                report.numeric = float(numeric)
    report.passed = report.worst_error <= tol
    return report


def _central_difference(f, arrays: List[np.ndarray], p_idx: int, index, step: float) -> float:
    def evaluate(delta: float) -> float:
        shifted = [a.copy() for a in arrays]
        shifted[p_idx][index] += delta
        return float(f([Tensor(a) for a in shifted]).data.reshape(-1)[0])

    return (evaluate(step) - evaluate(-step)) / (2.0 * step)
