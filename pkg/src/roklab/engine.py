"""Small reverse-mode differentiation core over float64 numpy arrays.

Every primitive builds a :class:`Var` holding its forward value and a closure
that maps the upstream gradient to gradients for its inputs.  ``backward``
walks the graph in reverse topological order and accumulates the gradients of
named parameter leaves into a :class:`GradTape`.

Only a fixed set of primitives is provided; this is not a general tensor
library.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class EngineError(ValueError):
    """Raised on shape mismatches, non-finite inputs and similar misuse."""


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "name", "requires_grad", "stopped")

    def __init__(self, value, parents=(), backward_fn=None, name=None,
                 requires_grad=None, stopped=False):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.stopped = stopped

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{tag})"

    # arithmetic sugar, used mostly by the loss code
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
        return scale(self, -1.0)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), requires_grad=False)


def _check_finite(op: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise EngineError(f"{op}: non-finite input")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise EngineError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# stop-gradient

class _StopState(threading.local):
    def __init__(self):
        self.mode = None  # None | "record" | "replay"
        self.values: list = []
        self.cursor = 0


_stop_state = _StopState()


def stop_gradient(x) -> Var:
    """Return a leaf carrying the value of ``x`` that blocks gradient flow.

    Under :func:`grad_check` the stopped values seen at the unperturbed point
    are recorded and replayed during perturbed evaluations, so finite
    differences only see the live branches.
    """
    x = as_var(x)
    st = _stop_state
    if st.mode == "record":
        value = x.value.copy()
        st.values.append(value)
    elif st.mode == "replay":
        value = st.values[st.cursor]
        st.cursor += 1
    else:
        value = x.value
    return Var(value, requires_grad=False, stopped=True)


# --------------------------------------------------------------------------
# primitives

def embedding_lookup(table: Var, ids) -> Var:
    """Gather rows of ``table`` (V, D) at integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if table.value.ndim != 2:
        raise EngineError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise EngineError(
            f"embedding_lookup: ids out of range for table {table.shape}")
    out = table.value[ids]
    vocab, dim = table.value.shape

    def backward(g):
        grad = np.zeros((vocab, dim))
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, dim))
        return (grad,)

    return Var(out, (table,), backward)


def affine(x, w: Var, b: Var | None = None) -> Var:
    """``x @ w + b`` over the last axis of ``x``."""
    x = as_var(x)
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[0]:
        raise EngineError(f"affine: shapes {x.shape} and {w.shape} do not align")
    if b is not None and b.value.shape != (w.value.shape[1],):
        raise EngineError(f"affine: bias shape {b.shape} does not match {w.shape}")
    _check_finite("affine", x.value)
    out = x.value @ w.value
    if b is not None:
        out = out + b.value
    xv, wv = x.value, w.value

    def backward(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Var(out, parents, backward)


def relu(x) -> Var:
    x = as_var(x)
    _check_finite("relu", x.value)
    mask = x.value > 0  # derivative at exactly 0 is 0
    return Var(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid_array(v: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function on a plain array."""
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Var:
    x = as_var(x)
    _check_finite("sigmoid", x.value)
    out = sigmoid_array(x.value)
    return Var(out, (x,), lambda g: (g * out * (1.0 - out),))


def concat(xs: Sequence, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise EngineError(
            f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    sizes = [x.value.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Var(out, xs, backward)


def mean_pool(x, axis: int) -> Var:
    x = as_var(x)
    _check_finite("mean_pool", x.value)
    n = x.value.shape[axis]
    shape = x.value.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return Var(x.value.mean(axis=axis), (x,), backward)


def l2_normalize(x) -> Var:
    """Scale each vector along the last axis to unit length."""
    x = as_var(x)
    _check_finite("l2_normalize", x.value)
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise EngineError("l2_normalize: zero-norm input")
    y = x.value / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return Var(y, (x,), backward)


def dot(a, b) -> Var:
    """Inner product along the last axis, with broadcasting over leading axes."""
    a, b = as_var(a), as_var(b)
    _broadcast_shape("dot", a.value, b.value)
    _check_finite("dot", a.value, b.value)
    av, bv = a.value, b.value

    def backward(g):
        g = g[..., None]
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Var((av * bv).sum(axis=-1), (a, b), backward)


def softmax(x) -> Var:
    """Softmax along the last axis."""
    x = as_var(x)
    _check_finite("softmax", x.value)
    e = np.exp(x.value - x.value.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Var(y, (x,), backward)


def weighted_sum(weights, values) -> Var:
    """``out[b] = sum_k weights[b, k] * values[b, k, :]``."""
    w, v = as_var(weights), as_var(values)
    if v.value.ndim != 3 or w.value.shape != v.value.shape[:2]:
        raise EngineError(f"weighted_sum: shapes {w.shape} and {v.shape} do not align")
    _check_finite("weighted_sum", w.value, v.value)
    wv, vv = w.value, v.value
    out = (wv[:, :, None] * vv).sum(axis=1)

    def backward(g):
        return (vv * g[:, None, :]).sum(axis=-1), wv[:, :, None] * g[:, None, :]

    return Var(out, (w, v), backward)


def fm_second_order(emb) -> Var:
    """Pairwise interaction vector ``0.5 * ((sum_i e_i)^2 - sum_i e_i^2)``.

    ``emb`` has shape (B, F, D); summing the (B, D) result over D gives the
    sum over all field pairs i < j of ``<e_i, e_j>``.
    """
    e = as_var(emb)
    if e.value.ndim != 3:
        raise EngineError(f"fm_second_order: expected (B, F, D), got {e.shape}")
    _check_finite("fm_second_order", e.value)
    ev = e.value
    s = ev.sum(axis=1)
    out = 0.5 * (s * s - (ev * ev).sum(axis=1))

    def backward(g):
        return (g[:, None, :] * (s[:, None, :] - ev),)

    return Var(out, (e,), backward)


def reshape(x, shape) -> Var:
    x = as_var(x)
    old = x.value.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise EngineError(f"reshape: cannot reshape {old} to {shape}") from None
    return Var(out, (x,), lambda g: (g.reshape(old),))


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("add", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("sub", a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("mul", a.value, b.value)
    av, bv = a.value, b.value
    return Var(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x, c: float) -> Var:
    x = as_var(x)
    return Var(x.value * c, (x,), lambda g: (g * c,))


def sum_all(x) -> Var:
    x = as_var(x)
    shape = x.value.shape
    return Var(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x) -> Var:
    x = as_var(x)
    shape, n = x.value.shape, x.value.size
    return Var(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_last(x) -> Var:
    """Sum over the last axis, keeping it as size 1."""
    x = as_var(x)
    shape = x.value.shape
    return Var(x.value.sum(axis=-1, keepdims=True), (x,),
               lambda g: (np.broadcast_to(g, shape).copy(),))


def mse(z, r) -> Var:
    """Mean of squared differences over every element."""
    z, r = as_var(z), as_var(r)
    if z.value.shape != r.value.shape:
        raise EngineError(f"mse: shapes {z.shape} and {r.shape} differ")
    _check_finite("mse", z.value, r.value)
    diff = z.value - r.value
    n = diff.size

    def backward(g):
        gz = 2.0 * float(g) * diff / n
        return gz, -gz

    return Var(np.asarray((diff * diff).mean()), (z, r), backward)


BCE_EPS = 1e-12


def bce(probs, labels) -> Var:
    """Mean binary cross-entropy of probabilities against {0, 1} labels."""
    p = as_var(probs)
    y = np.asarray(labels, dtype=np.float64).reshape(p.value.shape)
    if not np.all((y == 0) | (y == 1)):
        raise EngineError("bce: labels must be 0 or 1")
    _check_finite("bce", p.value)
    pc = np.clip(p.value, BCE_EPS, 1.0 - BCE_EPS)
    n = pc.size
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()

    def backward(g):
        return (float(g) * (-y / pc + (1.0 - y) / (1.0 - pc)) / n,)

    return Var(np.asarray(loss), (p,), backward)


def bce_with_logits(logits, labels) -> Var:
    """Mean binary cross-entropy computed from logits as softplus(z) - y*z.

    Equal to ``bce(sigmoid(z), y)`` but keeps full precision when the
    probability saturates, where ``log(1 - p)`` would cancel digits."""
    z = as_var(logits)
    y = np.asarray(labels, dtype=np.float64).reshape(z.value.shape)
    if not np.all((y == 0) | (y == 1)):
        raise EngineError("bce_with_logits: labels must be 0 or 1")
    _check_finite("bce_with_logits", z.value)
    v = z.value
    n = v.size
    loss = (np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))) - y * v).mean()

    def backward(g):
        return (float(g) * (sigmoid_array(v) - y) / n,)

    return Var(np.asarray(loss), (z,), backward)


# --------------------------------------------------------------------------
# parameters, tape, optimizer

@dataclass
class GradTape:
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def accumulate(self, name: str, g: np.ndarray):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = np.array(g, dtype=np.float64)

    def __contains__(self, name):
        return name in self.grads

    def __getitem__(self, name):
        return self.grads[name]

    def get(self, name, shape=None):
        if name in self.grads:
            return self.grads[name]
        return None if shape is None else np.zeros(shape)

    def names(self):
        return sorted(self.grads)


def backward(loss: Var) -> GradTape:
    """Reverse pass from a scalar ``loss``; returns gradients by parameter name."""
    if loss.value.size != 1:
        raise EngineError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    tape = GradTape()
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.name is not None:
                tape.accumulate(node.name, g)
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return tape


class ParamStore:
    """Named float64 parameters with groups, frozen flags and Adam state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.groups: dict[str, str] = {}
        self.frozen_groups: set[str] = set()
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: dict[str, int] = {}

    def add(self, name: str, value, group: str) -> np.ndarray:
        if name in self.params:
            raise EngineError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.groups[name] = group
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)
        self.adam_t[name] = 0
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.params[name].shape:
            raise EngineError(
                f"parameter {name!r}: shape {arr.shape} != {self.params[name].shape}")
        self.params[name][...] = arr

    def __contains__(self, name):
        return name in self.params

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.params if group is None or self.groups[n] == group]

    def var(self, name: str) -> Var:
        return Var(self.params[name], name=name, requires_grad=True)

    def freeze(self, *groups: str):
        self.frozen_groups.update(groups)

    def unfreeze(self, *groups: str):
        self.frozen_groups.difference_update(groups)

    def is_frozen(self, name: str) -> bool:
        return self.groups[name] in self.frozen_groups

    def num_params(self, group: str | None = None) -> int:
        return sum(self.params[n].size for n in self.names(group))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self.params:
            out.add(n, self.params[n], self.groups[n])
            out.adam_m[n] = self.adam_m[n].copy()
            out.adam_v[n] = self.adam_v[n].copy()
            out.adam_t[n] = self.adam_t[n]
        out.frozen_groups = set(self.frozen_groups)
        return out

    def absorb(self, other: "ParamStore", prefix: str):
        """Copy every parameter of ``other`` in under ``prefix``."""
        for n in other.params:
            self.add(prefix + n, other.params[n], prefix + other.groups[n])
        for g in other.frozen_groups:
            self.frozen_groups.add(prefix + g)

    def extract(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for n in self.params:
            if n.startswith(prefix):
                out.add(n[len(prefix):], self.params[n], self.groups[n][len(prefix):])
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.params.items()}

    def equals(self, other: "ParamStore") -> bool:
        return (self.params.keys() == other.params.keys()
                and self.groups == other.groups
                and all(np.array_equal(self.params[n], other.params[n]) for n in self.params))


def adam_step(store: ParamStore, tape: GradTape, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update of every non-frozen parameter present in ``tape``."""
    for name, g in tape.grads.items():
        if name not in store.params:
            continue
        p = store.params[name]
        if g.shape != p.shape:
            raise EngineError(f"adam_step: gradient {g.shape} != parameter {p.shape} for {name!r}")
        if store.is_frozen(name):
            continue
        if not np.all(np.isfinite(g)):
            raise EngineError(f"adam_step: non-finite gradient for {name!r}")
        t = store.adam_t[name] + 1
        store.adam_t[name] = t
        m, v = store.adam_m[name], store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


# --------------------------------------------------------------------------
# initializers

def init_embedding(rng: np.random.Generator, vocab: int, dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=(vocab, dim))


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterable[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    checked: int
    tol: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def rel_error(a, b, floor: float = 1e-6):
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero entries
    from being dominated by finite-difference round-off."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(loss_fn: Callable[[ParamStore], Var], store: ParamStore, name: str,
                     h: float = 1e-5, entries=None, respect_stop: bool = True) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. parameter ``name``.

    With ``respect_stop`` the stopped values of the unperturbed evaluation are
    replayed, so the result is the gradient along live branches only.
    """
    p = store.params[name]
    flat = p.reshape(-1)
    out = np.zeros(p.size)
    idx = range(p.size) if entries is None else entries

    def evaluate():
        if not respect_stop:
            return float(loss_fn(store).value)
        _stop_state.mode, _stop_state.cursor = "replay", 0
        try:
            return float(loss_fn(store).value)
        finally:
            _stop_state.mode = None

    if respect_stop:
        _stop_state.mode, _stop_state.values = "record", []
        try:
            loss_fn(store)
        finally:
            _stop_state.mode = None
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        lp = evaluate()
        flat[i] = orig - h
        lm = evaluate()
        flat[i] = orig
        out[i] = (lp - lm) / (2.0 * h)
    return out.reshape(p.shape)


def grad_check(loss_fn: Callable[[ParamStore], Var], store: ParamStore, h: float = 1e-5,
               tol: float = 1e-4, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of every non-frozen parameter with central
    finite differences that respect stop-gradient markers.

    ``max_entries`` caps the number of checked entries per parameter (sampled
    with ``rng``); untouched entries are still compared when sampled.
    """
    first = float(loss_fn(store).value)
    second = float(loss_fn(store).value)
    if first != second:
        raise EngineError("grad_check: loss_fn is not deterministic")
    tape = backward(loss_fn(store))
    rng = rng if rng is not None else np.random.default_rng(0)

    per_param: dict[str, float] = {}
    worst, worst_name, checked = 0.0, None, 0
    for name in store.names():
        if store.is_frozen(name):
            continue
        size = store.params[name].size
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            entries = np.arange(size)
        num = numeric_gradient(loss_fn, store, name, h, entries).reshape(-1)[entries]
        ana = tape.get(name, store.params[name].shape).reshape(-1)[entries]
        err = float(rel_error(ana, num).max()) if len(entries) else 0.0
        per_param[name] = err
        checked += len(entries)
        if worst_name is None or err > worst:
            worst, worst_name = err, name
    return GradCheckReport(worst, worst_name, checked, tol, per_param)
