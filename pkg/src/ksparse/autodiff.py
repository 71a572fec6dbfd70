"""Define-by-run reverse-mode differentiation over dense numpy arrays.

Every primitive records its inputs and a backward closure on the output
tensor; ``backward(loss)`` topologically sorts the recorded graph and runs
the closures once each, in reverse. The graph is rebuilt on every forward
pass, so there is no cache invalidation to reason about.

Two precision modes are supported by convention rather than machinery:
verification code builds float64 tensors, training code float32. Operations
preserve the dtype of their inputs.

A global multiply-add counter is incremented by every matmul forward
(2*n*m*p per stacked matrix product); higher layers snapshot it to
attribute cost to specific code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeMismatchError

_LN_EPS = 1e-5
_NORM_FLOOR = 1e-12

_madds = 0


def madds_total() -> int:
    """Total multiply-adds executed by matmul forwards since the last reset."""
    return _madds


def reset_madds() -> None:
    global _madds
    _madds = 0


class Tensor:
    """A dense array with an optional gradient slot.

    Tensors produced by primitives carry the graph edges needed for
    reverse-mode differentiation; leaf tensors carry none.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Sugar for readable model code; everything routes through the primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    # Constant subgraphs are pruned so backward never visits dead nodes.
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None
    out = _make(data, (a, b), "add")

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape) from None
    out = _make(data, (a, b), "mul")

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def scale(a: Tensor, c: float) -> Tensor:
    # A python float stays weakly typed; a numpy scalar would upcast float32.
    c = float(c)
    out = _make(a.data * c, (a,), "scale")

    def backward():
        _accum(a, out.grad * c)

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics on the leading axes."""
    global _madds
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None
    n, p = data.shape[-2], data.shape[-1]
    m = a.data.shape[-1]
    stacks = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
    _madds += 2 * stacks * n * m * p
    out = _make(data, (a, b), "matmul")

    def backward():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None,
           relu_after: bool = False) -> Tensor:
    """Fused x @ w (+ b) (+ relu): one output buffer, one backward pass.

    Semantically identical to composing matmul/add/relu; fused because the
    row-wise layers dominate the training step and the separate graph nodes
    cost a full array pass each. x must be 2-D.
    """
    global _madds
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatchError("linear", x.shape, w.shape)
    data = x.data @ w.data
    _madds += 2 * data.shape[0] * x.data.shape[1] * data.shape[1]
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeMismatchError("linear bias", b.shape, w.shape)
        data += b.data
    if relu_after:
        np.maximum(data, 0.0, out=data)
    parents = (x, w) if b is None else (x, w, b)
    out = _make(data, parents, "linear")

    def backward():
        g = out.grad
        if relu_after:
            g = g * (out.data > 0)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)

    out._backward = backward if out.requires_grad else None
    return out


def sqdiff(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise squared difference (a - b)**2."""
    try:
        diff = a.data - b.data
    except ValueError:
        raise ShapeMismatchError("sqdiff", a.shape, b.shape) from None
    out = _make(diff * diff, (a, b), "sqdiff")

    def backward():
        g = out.grad * 2.0 * diff
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,), "relu")

    def backward():
        # Subgradient convention: derivative at exactly 0 is 0.
        _accum(a, out.grad * (a.data > 0))

    out._backward = backward if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    out = _make(data, (a,), "exp")

    def backward():
        _accum(a, out.grad * data)

    out._backward = backward if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    out = _make(np.log(a.data), (a,), "log")

    def backward():
        _accum(a, out.grad / a.data)

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _make(data, (a,), "sigmoid")

    def backward():
        _accum(a, out.grad * data * (1.0 - data))

    out._backward = backward if out.requires_grad else None
    return out


def absval(a: Tensor) -> Tensor:
    out = _make(np.abs(a.data), (a,), "abs")

    def backward():
        _accum(a, out.grad * np.sign(a.data))

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------

def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeMismatchError("transpose", a.shape)
    out = _make(np.swapaxes(a.data, -1, -2), (a,), "transpose")

    def backward():
        _accum(a, np.swapaxes(out.grad, -1, -2))

    out._backward = backward if out.requires_grad else None
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")

    def backward():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors), "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward():
        pieces = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, pieces):
            _accum(t, g)

    out._backward = backward if out.requires_grad else None
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2 by integer index.

    Two index layouts are supported: a 1-D ``idx`` shared across all leading
    axes, and a per-batch ``idx`` of shape ``(B, K)`` for 3-D inputs.
    Backward scatter-adds into the source, so repeated indices accumulate.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[-2]):
        raise ShapeMismatchError("gather_rows: index out of range", a.shape, idx.shape)
    if idx.ndim == 1:
        data = np.take(a.data, idx, axis=-2)
        out = _make(data, (a,), "gather_rows")

        def backward():
            g = np.zeros_like(a.data)
            np.add.at(np.swapaxes(g, 0, -2), idx, np.swapaxes(out.grad, 0, -2))
            _accum(a, g)

    elif a.data.ndim == 3 and idx.ndim == 2 and idx.shape[0] == a.data.shape[0]:
        data = np.take_along_axis(a.data, idx[:, :, None], axis=1)
        out = _make(data, (a,), "gather_rows")

        def backward():
            g = np.zeros_like(a.data)
            batch = np.arange(a.data.shape[0])[:, None]
            np.add.at(g, (batch, idx), out.grad)
            _accum(a, g)

    else:
        raise ShapeMismatchError("gather_rows", a.shape, idx.shape)

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = _make(np.asarray(a.data.sum()), (a,), "sum_all")

    def backward():
        _accum(a, np.broadcast_to(out.grad, a.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _make(np.asarray(a.data.mean()), (a,), "mean_all")

    def backward():
        _accum(a, np.broadcast_to(out.grad / n, a.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = _make(a.data.sum(axis=axis), (a,), "sum_axis")

    def backward():
        _accum(a, np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    out = _make(a.data.mean(axis=axis), (a,), "mean_axis")

    def backward():
        _accum(a, np.broadcast_to(np.expand_dims(out.grad / n, axis), a.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# Normalization primitives
# ---------------------------------------------------------------------------

def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (a,), "row_softmax")

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    out._backward = backward if out.requires_grad else None
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply a learned affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = _make(xhat * gamma.data + beta.data, (a, gamma, beta), "layer_norm")

    def backward():
        g = out.grad
        gg = g * gamma.data
        if a.requires_grad:
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accum(a, (gg - m1 - xhat * m2) * inv)
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms < _NORM_FLOOR):
        raise DomainError("l2_normalize_rows: zero-norm row")
    y = a.data / norms
    out = _make(y, (a,), "l2_normalize")

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, (g - y * dot) / norms)

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor reachable from a scalar loss.

    The graph is visited in reverse topological order, each node exactly
    once. Tensors not reachable from the loss keep their grad untouched.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError("backward: loss must be scalar", loss.shape)
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    name: str
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""
    worst_index: int = -1
    max_rel_err: float = 0.0
    passed: bool = True
    failure: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" [{self.failure}]" if self.failure else ""
        return f"{status} {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}){extra}"


def grad_check(build_loss: Callable[[], Tensor], params: dict[str, Tensor],
               tol: float = 1e-4, h: float = 1e-5, name: str = "grad_check") -> GradCheckReport:
    """Check analytic gradients of ``build_loss`` against central differences.

    ``build_loss`` must be deterministic and rebuild the graph from the
    current parameter values on every call. Parameters should be float64 and
    positioned away from non-differentiable points (relu inputs within 1e-6
    of zero, abs at zero); the caller owns that condition.

    The relative error per coordinate is |g_analytic - g_fd| / (|g_fd| + 1e-8).
    """
    report = GradCheckReport(name=name, tol=tol)
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = {k: p.grad_or_zeros().copy() for k, p in params.items()}
    for pname, g in analytic.items():
        if not np.all(np.isfinite(g)):
            report.passed = False
            report.failure = f"non-finite analytic gradient in {pname}"
            report.max_rel_err = float("inf")
            report.worst_param = pname
            return report
    for pname, p in params.items():
        ga_flat = analytic[pname].reshape(-1)
        worst = 0.0
        it = np.nditer(p.data, flags=["multi_index"])
        flat_index = 0
        while not it.finished:
            ix = it.multi_index
            orig = p.data[ix]
            p.data[ix] = orig + h
            f_plus = float(build_loss().data)
            p.data[ix] = orig - h
            f_minus = float(build_loss().data)
            p.data[ix] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ga_flat[flat_index] - fd) / (abs(fd) + 1e-8)
            if rel > worst:
                worst = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = pname
                report.worst_index = flat_index
            flat_index += 1
            it.iternext()
        report.per_param[pname] = worst
    report.passed = report.max_rel_err < tol
    return report


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and bias correction.

    The decay multiplies the parameter by (1 - lr * weight_decay) before the
    moment-based update; it never touches the gradient moments.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("AdamW: lr must be positive")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params."""
        grads = {k: p.grad_or_zeros() for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DomainError(f"AdamW: non-finite gradient in '{k}', step aborted")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay != 0.0:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
