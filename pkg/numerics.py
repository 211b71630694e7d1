"""
Dense tensor arithmetic with tape-based reverse-mode differentiation
Holds the shared neural primitives (MLP, layer norm, softmax, GELU, ReLU,
cross-entropy), the parameter registry, SGD with momentum and the
finite-difference gradient verifier
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from errors import DimensionError, LabelError, NonFiniteError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
ACTIVATIONS = ("relu", "gelu", "none")

_dtype = np.float32
_verify_finite = False
# op names whose backward rule is deliberately corrupted (verification self-test)
_faults = set()


def default_dtype():
    """Real type used for new tensors and parameters"""
    return _dtype


@contextmanager
def precision(name: str = "float64", verify_finite: bool = True):
    """Switch the default real type, optionally raising on NaN/Inf results"""
    global _dtype, _verify_finite
    previous = (_dtype, _verify_finite)
    _dtype = np.dtype(name).type
    _verify_finite = verify_finite
    try:
        yield
    finally:
        _dtype, _verify_finite = previous


@contextmanager
def inject_fault(op: str):
    """Corrupt the backward rule of one op while the context is active"""
    _faults.add(op)
    try:
        yield
    finally:
        _faults.discard(op)


class Tensor:
    """N-dimensional real array that records how it was computed"""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis: int):
        return max_(self, axis)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad"""
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            if node.op in _faults:
                parent_grads = tuple(None if pg is None else pg * 1.5 for pg in parent_grads)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


class Parameter(Tensor):
    """Learned tensor registered by its owning Module"""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def record_op(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    if _verify_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


@njit(cache=True)
def _scatter_add_rows(out, index, src):
    # sequential so repeated indices accumulate in a fixed order
    for i in range(index.shape[0]):
        row = index[i]
        for j in range(src.shape[1]):
            out[row, j] += src[i, j]


def scatter_add_rows(num_rows: int, index: np.ndarray, src: np.ndarray) -> np.ndarray:
    """out[index[i]] += src[i] for 1-D index, rows of any trailing shape"""
    tail = src.shape[index.ndim:]
    out = np.zeros((num_rows,) + tail, dtype=src.dtype)
    flat_index = np.ascontiguousarray(index.reshape(-1), dtype=np.int64)
    _scatter_add_rows(out.reshape(num_rows, -1), flat_index,
                      np.ascontiguousarray(src.reshape(flat_index.shape[0], -1)))
    return out


# elementwise / linear algebra ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """(..., k) @ (k, n) -> (..., n)"""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")

    # leading axes folded into rows so each direction is a single 2-D product
    rows = a.data.reshape(-1, b.shape[0])
    out_shape = a.shape[:-1] + (b.shape[1],)

    def backward(g):
        g_rows = g.reshape(-1, b.shape[1])
        return (g_rows @ b.data.T).reshape(a.shape), rows.T @ g_rows

    return record_op((rows @ b.data).reshape(out_shape), (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return record_op(a.data.reshape(shape), (a,), backward, "reshape")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def max_(a: Tensor, axis: int) -> Tensor:
    """Elementwise max along one axis; the gradient goes to the first maximum"""
    winners = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, winners, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return record_op(np.max(a.data, axis=axis), (a,), backward, "max")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows: result[...] = a[index[...]]"""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        return (scatter_add_rows(a.shape[0], index, g),)

    return record_op(a.data[index], (a,), backward, "take")


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of a that share a segment id"""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)

    def backward(g):
        return (g[segment_ids],)

    data = scatter_add_rows(num_segments, segment_ids, a.data)
    return record_op(data, (a,), backward, "segment_sum")


# activations -----------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    def backward(g):
        return (g * (a.data > 0),)

    return record_op(np.maximum(a.data, 0), (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU"""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner),)

    return record_op(0.5 * x * (1.0 + th), (a,), backward, "gelu")


def activation(a: Tensor, name: str) -> Tensor:
    if name == "relu":
        return relu(a)
    if name == "gelu":
        return gelu(a)
    return a


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted softmax; masked-out entries get exactly zero weight"""
    a = as_tensor(a)
    z = a.data if mask is None else np.where(mask, a.data, -np.inf)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op(y, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record_op(y, (a,), backward, "log_softmax")


def _normalize(a: Tensor, eps: float) -> Tensor:
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gx = g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * gx,)

    return record_op(xhat, (a,), backward, "layer_norm")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row zero mean / unit variance over the last axis, then affine"""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs at least one channel")
    return add(mul(_normalize(x, eps), gain), bias)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]"""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"{labels.shape[0]} labels for {batch} rows of logits")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    rows = np.arange(batch)
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = np.asarray(-log_p[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(log_p)
        p[rows, labels] -= 1.0
        return (g * p / batch,)

    return record_op(loss, (logits,), backward, "cross_entropy")


# modules ---------------------------------------------------------------------

class Module:
    """Parameter registry: Parameters and sub-Modules found in attributes, in definition order"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise DimensionError(f"parameter names differ: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.data.dtype)
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_features))

    def zero_(self):
        self.weight.data[...] = 0
        self.bias.data[...] = 0
        return self

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


@dataclass(frozen=True)
class MlpSpec:
    """layer_widths lists the input width followed by each affine layer's output width"""

    layer_widths: Tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise DimensionError("an MLP needs at least one affine layer")
        if any(w < 1 for w in self.layer_widths):
            raise DimensionError(f"MLP widths must be positive: {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise DimensionError(f"unknown activation {self.activation!r}")

    @property
    def in_features(self) -> int:
        return self.layer_widths[0]

    @property
    def out_features(self) -> int:
        return self.layer_widths[-1]


def mlp_forward(x: Tensor, spec: MlpSpec, params: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """Affine layers interleaved with the configured activation (none after the last)"""
    x = as_tensor(x)
    if x.shape[-1] != spec.in_features:
        raise DimensionError(f"MLP expects last extent {spec.in_features}, got {x.shape}")
    if len(params) != len(spec.layer_widths) - 1:
        raise DimensionError("parameter list does not match the layer widths")
    for i, (weight, bias) in enumerate(params):
        x = add(matmul(x, weight), bias)
        if i < len(params) - 1:
            x = activation(x, spec.activation)
    return x


class Mlp(Module):
    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers = [Linear(a, b, rng) for a, b in zip(spec.layer_widths[:-1], spec.layer_widths[1:])]

    @classmethod
    def build(cls, in_features: int, out_features: int, rng: np.random.Generator,
              hidden: Optional[int] = None, activation: str = "relu") -> "Mlp":
        """Default two-layer MLP: in -> hidden (defaults to out) -> out"""
        return cls(MlpSpec((in_features, hidden or out_features, out_features), activation), rng)

    def zero_last_(self):
        self.layers[-1].zero_()
        return self

    def forward(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self.spec, [(layer.weight, layer.bias) for layer in self.layers])


# optimizer -------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    momentum_buffers: List[np.ndarray] = field(default_factory=list)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> List[np.ndarray]:
    """buf <- momentum * buf + grad; param <- param - lr * buf"""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.momentum_buffers:
        state.momentum_buffers = [np.zeros_like(p) for p in params]
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        buf = state.momentum_buffers[i]
        if p.shape != g.shape or p.shape != buf.shape:
            raise DimensionError(f"shape mismatch at parameter {i}: {p.shape}, {g.shape}, {buf.shape}")
        buf = state.momentum * buf + g
        state.momentum_buffers[i] = buf
        updated.append(p - state.lr * buf)
    return updated


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, momentum=momentum,
                                    momentum_buffers=[np.zeros_like(p.data) for p in self.params])

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def step(self):
        grads = [p.grad.astype(p.data.dtype) if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        for p, new in zip(self.params, sgd_step([p.data for p in self.params], grads, self.state)):
            p.data = new

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# verification ----------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences (f(x+e) - f(x-e)) / 2e per coordinate, at 64-bit"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + eps
        f_plus = float(f(x))
        x.flat[i] = original - eps
        f_minus = float(f(x))
        x.flat[i] = original
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"function is not finite around coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def scaled_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest difference over max(1, largest magnitude): absolute for gradients below one"""
    if analytic.size == 0:
        return 0.0
    scale = max(1.0, float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / scale


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest difference over the largest magnitude; 0 when both gradients vanish"""
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    diff = float(np.max(np.abs(analytic - numeric)))
    return diff / scale if scale > 0 else diff


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                    max_coords: Optional[int] = None, seed: int = 0,
                    metric: Callable[[np.ndarray, np.ndarray], Any] = scaled_error) -> List[Any]:
    """Compare reverse-mode gradients of the scalar fn() against central differences

    fn must read the current .data of every tensor in inputs. Returns
    metric(analytic, numeric) per input, the scaled error by default;
    max_coords samples that many coordinates per input.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    rng = np.random.default_rng(seed)
    errors = []
    for t, grad in zip(inputs, analytic):
        if max_coords is None or t.size <= max_coords:
            coords = np.arange(t.size)
        else:
            coords = np.sort(rng.choice(t.size, max_coords, replace=False))
        numeric = np.zeros(len(coords))
        for n, c in enumerate(coords):
            original = t.data.flat[c]
            t.data.flat[c] = original + eps
            f_plus = float(fn().data)
            t.data.flat[c] = original - eps
            f_minus = float(fn().data)
            t.data.flat[c] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss while perturbing coordinate {c}")
            numeric[n] = (f_plus - f_minus) / (2 * eps)
        errors.append(metric(grad.flat[coords], numeric))
    for t in inputs:
        t.grad = None
    return errors


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream ids...); the same key always yields the same draws"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(s) for s in stream)]))
