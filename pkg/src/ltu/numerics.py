"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. Tensors
are stamped with a monotonically increasing id at creation, so sorting the
reachable graph by id (descending) gives a deterministic reverse topological
order: the insertion order of the tape.

Ops are deliberately coarse (fused layer norm, fused causal softmax, fused
masked cross-entropy) so a small transformer trains at reasonable speed on a
single CPU core.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """An input or result contains NaN or Inf."""


class GradientError(RuntimeError):
    """Misuse of backward (e.g. accumulating into gradients that were not reset)."""


class EmptyLossError(ValueError):
    """A masked loss was requested with no active positions."""


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    """Wrap an op output, recording it on the tape only when needed."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
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
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {list(a.shape)} and {list(b.shape)}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {list(a.shape)} and {list(b.shape)}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum()), (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward)


def transpose(a, axes=None):
    a = _as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(out, (a,), backward)


def index(a, key):
    """Differentiable numpy indexing ``a[key]`` (basic or advanced)."""
    a = _as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out), (a,), backward)


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for table of {weight.shape[0]} rows")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _result(out, (weight,), backward)


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    x = _as_tensor(x)
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * d,)

    return _result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} received non-finite values")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a):
    """Softmax over the last axis with max subtraction."""
    a = _as_tensor(a)
    _check_finite(a.data, "softmax_rows")
    p = _softmax(a.data)

    def backward(g):
        return (p * (g - (g * p).sum(-1, keepdims=True)),)

    return _result(p, (a,), backward)


_causal_cache = {}


def _future_mask(t):
    mask = _causal_cache.get(t)
    if mask is None:
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        _causal_cache[t] = mask
    return mask


def causal_softmax(scores):
    """Softmax over keys with keys after the query position excluded exactly.

    ``scores`` has shape ``(..., T, T)`` (queries by keys). Excluded entries get
    probability exactly 0, so future values never influence a row.
    """
    scores = _as_tensor(scores)
    t = scores.shape[-1]
    mask = _future_mask(t)
    z = np.where(mask, -np.inf, scores.data)
    p = _softmax(z)

    def backward(g):
        return (p * (g - (g * p).sum(-1, keepdims=True)),)

    return _result(p, (scores,), backward)


def log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits, targets, mask):
    """Mean negative log-likelihood of ``targets`` over positions with mask 1.

    ``logits`` is ``(..., V)``; ``targets`` and ``mask`` match its leading shape.
    Masked-out positions receive exactly zero gradient.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=DTYPE)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise DimensionError(
            f"targets {list(targets.shape)} / mask {list(mask.shape)} do not match logits {list(logits.shape)}")
    total = mask.sum()
    if total <= 0:
        raise EmptyLossError("cross_entropy_masked needs at least one position with mask=1")
    vocab = logits.shape[-1]
    active = mask != 0
    if np.any(targets[active] < 0) or np.any(targets[active] >= vocab):
        raise IndexError(f"target id out of range for vocabulary of {vocab}")
    safe_targets = np.where(active, targets, 0)
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / total

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe_targets[..., None],
                          np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (mask / total)[..., None]
        grad[~active] = 0.0
        return (grad * g,)

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return seen


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves must have no stale gradient: call :func:`zero_grad` between passes.
    """
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor requiring grad")
    if loss._consumed:
        raise GradientError("backward already ran on this graph; rebuild it")
    nodes = _reachable(loss)
    leaves = [n for n in nodes.values() if n._backward is None]
    stale = [n for n in leaves if n.grad is not None]
    if stale:
        raise GradientError(
            f"{len(stale)} parameter(s) already hold gradients; call zero_grad before backward")
    grads = {loss._id: np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=DTYPE)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
    loss._consumed = True


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                          m=[np.zeros_like(p.data) for p in params],
                          v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update, in place on ``params``.

    ``lr`` overrides ``state.lr`` for this step (used by warmup schedules).
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if g is not None and np.shape(g) != p.shape:
            raise DimensionError(f"gradient shape {list(np.shape(g))} != parameter shape {list(p.shape)}")
        if m.shape != p.shape:
            raise DimensionError(f"moment shape {list(m.shape)} != parameter shape {list(p.shape)}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_norm(grads):
    return math.sqrt(float(np.sum([np.sum(g * g) for g in grads if g is not None])))


def clip_grad_norm(grads, max_norm=1.0):
    """Rescale so the global L2 norm is at most ``max_norm``. Returns (grads, norm)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads], norm


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_grad(f, param, h=1e-5, indices=None):
    """Central-difference estimate of d f() / d param.

    ``f`` is re-evaluated with ``param.data`` perturbed in place. ``indices``
    optionally restricts the check to a subset of flat positions; the other
    entries of the result are NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)


def max_relative_error(analytic, numeric, floor=1e-8):
    """max |a-n| / max(|a|+|n|, floor) over finite entries."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    ok = np.isfinite(n)
    a, n = a[ok], n[ok]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))
