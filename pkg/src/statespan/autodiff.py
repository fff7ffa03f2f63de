"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every operation returns a new Tensor that
remembers its parents and a closure computing each parent's local gradient
contribution.  `backward` replays the graph in reverse topological order,
which makes the graph itself the gradient tape.

Everything is float64.  NaN/Inf escaping a forward pass is treated as a bug,
not a value.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

Array = np.ndarray
_FLOAT64 = np.dtype(np.float64)

# Global switch: when False, ops do not record parents (inference mode).
_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "parents", "grad_fns", "requires_grad")
    __array_priority__ = 1000  # numpy defers mixed operators to Tensor

    def __init__(self, data, requires_grad: bool = False,
                 parents: Tuple["Tensor", ...] = (),
                 grad_fns: Tuple[Callable[[Array], Array], ...] = ()):
        if type(data) is np.ndarray and data.dtype == _FLOAT64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fns = grad_fns

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: Array, parents: Sequence[Tensor],
          grad_fns: Sequence[Callable[[Array], Array]]) -> Tensor:
    if _GRAD_ENABLED:
        n = len(parents)
        if n == 1:
            if parents[0].requires_grad:
                return Tensor(data, True, tuple(parents), tuple(grad_fns))
        elif n == 2:
            p0, p1 = parents
            if p0.requires_grad:
                if p1.requires_grad:
                    return Tensor(data, True, (p0, p1), tuple(grad_fns))
                return Tensor(data, True, (p0,), (grad_fns[0],))
            if p1.requires_grad:
                return Tensor(data, True, (p1,), (grad_fns[1],))
        else:
            kept_p: List[Tensor] = []
            kept_f: List[Callable] = []
            for p, f in zip(parents, grad_fns):
                if p.requires_grad:
                    kept_p.append(p)
                    kept_f.append(f)
            if kept_p:
                return Tensor(data, True, tuple(kept_p), tuple(kept_f))
    return Tensor(data)


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.data.shape),
                               lambda g: _unbroadcast(g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.data.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                         b.data.shape)))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), (lambda g: g / a.data,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) with pass-through gradient where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    out = np.where(keep, a.data, floor)
    return _make(out, (a,), (lambda g: g * keep,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, a.data.shape).copy()

    return _make(out, (a,), (back,))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b where b is 2-D (k, n) and a is (..., k)-trailing.

    Covers every use here: (B, k) @ (k, n), (B, L, k) @ (k, n) and plain 2-D.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError(f"matmul rhs must be 2-D, got shape {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back_a(g: Array) -> Array:
        return g @ b.data.T

    def back_b(g: Array) -> Array:
        am = a.data.reshape(-1, a.shape[-1])
        gm = g.reshape(-1, b.shape[1])
        return am.T @ gm

    return _make(out, (a, b), (back_a, back_b))


def weighted_sum(w: Tensor, m: Tensor) -> Tensor:
    """einsum('bl,bl...->b...'): per-batch weighted sum over positions.

    Used both for attention context vectors (m: hidden states) and for
    projecting copy mass through per-position source distributions.
    """
    w, m = as_tensor(w), as_tensor(m)
    if w.ndim != 2 or m.ndim != 3 or w.shape != m.shape[:2]:
        raise ValueError(f"weighted_sum shapes {w.shape} / {m.shape}")
    out = np.einsum("bl,bld->bd", w.data, m.data)

    def back_w(g: Array) -> Array:
        return np.einsum("bd,bld->bl", g, m.data)

    def back_m(g: Array) -> Array:
        return np.einsum("bl,bd->bld", w.data, g)

    return _make(out, (w, m), (back_w, back_m))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_back(i: int):
        def back(g: Array) -> Array:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return back

    return _make(out, tuple(parts), tuple(make_back(i) for i in range(len(parts))))


def stack(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def make_back(i: int):
        def back(g: Array) -> Array:
            return np.take(g, i, axis=axis)
        return back

    return _make(out, tuple(parts), tuple(make_back(i) for i in range(len(parts))))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), (lambda g: g.reshape(a.data.shape),))


def gather_rows(table: Tensor, idx: Array) -> Tensor:
    """Embedding lookup: table (V, E), idx int array (...,) -> (..., E)."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    out = table.data[idx]

    def back(g: Array) -> Array:
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return grad

    return _make(out, (table,), (back,))


def take_probs(probs: Tensor, idx: Array) -> Tensor:
    """Pick probs[b, idx[b]] for each batch row."""
    probs = as_tensor(probs)
    idx = np.asarray(idx)
    rows = np.arange(probs.shape[0])
    out = probs.data[rows, idx]

    def back(g: Array) -> Array:
        grad = np.zeros_like(probs.data)
        grad[rows, idx] = g
        return grad

    return _make(out, (probs,), (back,))


def softmax(scores: Tensor, mask: Optional[Array] = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get probability 0.

    Shift-invariant and sums to one over unmasked entries.  Raises on empty
    input or a fully-masked row.
    """
    scores = as_tensor(scores)
    if scores.data.size == 0:
        raise ValueError("softmax of empty input")
    x = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every position masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g: Array) -> Array:
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _make(out, (scores,), (back,))


# -- backward pass ---------------------------------------------------------

def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward_tensor(loss: Tensor) -> None:
    """Accumulate .grad on every tensor reachable from `loss`."""
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, fn in zip(node.parents, node.grad_fns):
            contrib = fn(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + contrib


def backward(loss: Tensor, params: "ParamStore") -> Dict[str, Array]:
    """Gradient of a scalar loss w.r.t. every parameter in `params`.

    Parameters not on any path to the loss map to zero arrays.
    """
    backward_tensor(loss)
    grads = {}
    for name, t in params.items():
        grads[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return grads


# -- parameters ------------------------------------------------------------

class ParamStore:
    """Named parameter tensors plus per-parameter Adam moment estimates."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._m: Dict[str, Array] = {}
        self._v: Dict[str, Array] = {}
        self.step_count = 0

    def add(self, name: str, value: Array) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy_values(self) -> Dict[str, Array]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: Dict[str, Array]) -> None:
        for k, v in values.items():
            t = self._params[k]
            if t.data.shape != v.shape:
                raise ValueError(f"shape mismatch loading {k}: "
                                 f"{t.data.shape} vs {v.shape}")
            t.data = np.array(v, dtype=np.float64)

    def clone_into(self, src_prefix: str, dst_prefix: str) -> None:
        """Copy values of every `src_prefix...` param onto `dst_prefix...`."""
        for name, t in self._params.items():
            if name.startswith(src_prefix):
                dst = dst_prefix + name[len(src_prefix):]
                if dst in self._params:
                    self._params[dst].data = t.data.copy()


INIT_SCALE = 0.08  # uniform(-0.08, 0.08) for weights, zero biases


def init_weight(store: ParamStore, name: str, shape: Tuple[int, ...],
                rng: np.random.Generator) -> Tensor:
    return store.add(name, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))


def init_bias(store: ParamStore, name: str, shape: Tuple[int, ...]) -> Tensor:
    return store.add(name, np.zeros(shape))


# -- GRU cell --------------------------------------------------------------

GRU_PARAM_NAMES = ("Wxz", "Whz", "bz", "Wxr", "Whr", "br", "Wxn", "Whn", "bn")


def init_gru(store: ParamStore, prefix: str, in_dim: int, hid_dim: int,
             rng: np.random.Generator) -> None:
    for gate in ("z", "r", "n"):
        init_weight(store, f"{prefix}.Wx{gate}", (in_dim, hid_dim), rng)
        init_weight(store, f"{prefix}.Wh{gate}", (hid_dim, hid_dim), rng)
        init_bias(store, f"{prefix}.b{gate}", (hid_dim,))


def gru_cell(x: Tensor, h_prev: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """One GRU update: reset gate applied to the hidden state before the
    candidate's hidden matrix multiply (original formulation).

    x: (B, in_dim), h_prev: (B, hid_dim) -> (B, hid_dim).
    """
    Wxz, Whz, bz = store[f"{prefix}.Wxz"], store[f"{prefix}.Whz"], store[f"{prefix}.bz"]
    Wxr, Whr, br = store[f"{prefix}.Wxr"], store[f"{prefix}.Whr"], store[f"{prefix}.br"]
    Wxn, Whn, bn = store[f"{prefix}.Wxn"], store[f"{prefix}.Whn"], store[f"{prefix}.bn"]
    if x.shape[-1] != Wxz.shape[0] or h_prev.shape[-1] != Whz.shape[0]:
        raise ValueError(f"gru_cell shape mismatch: x {x.shape}, h {h_prev.shape}")
    z = sigmoid(matmul(x, Wxz) + matmul(h_prev, Whz) + bz)
    r = sigmoid(matmul(x, Wxr) + matmul(h_prev, Whr) + br)
    n = tanh(matmul(x, Wxn) + matmul(mul(r, h_prev), Whn) + bn)
    return z * h_prev + (1.0 - z) * n


# -- Adam ------------------------------------------------------------------

def adam_step(store: ParamStore, grads: Dict[str, Array], lr: float,
              betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    store.step_count += 1
    t = store.step_count
    for name, g in grads.items():
        p = store[name]
        m = store._m[name] = b1 * store._m[name] + (1 - b1) * g
        v = store._v[name] = b2 * store._v[name] + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# -- gradient verification -------------------------------------------------

def finite_difference_check(loss_fn: Callable[[], Tensor], store: ParamStore,
                            eps: float = 1e-5, sample: int = 100,
                            seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn` must deterministically rebuild the loss from current store
    values.  Checks `sample` randomly chosen parameter coordinates.  The
    relative error denominator is floored at 1e-4 so near-zero gradients
    are compared absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    store.zero_grad()
    loss = loss_fn()
    grads = backward(loss, store)

    rng = np.random.default_rng(seed)
    names = store.names()
    sizes = np.array([store[n].data.size for n in names])
    total = int(sizes.sum())
    coords = rng.choice(total, size=min(sample, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for c in np.sort(coords):
        pi = int(np.searchsorted(bounds, c, side="right"))
        offset = int(c - (bounds[pi - 1] if pi > 0 else 0))
        name = names[pi]
        flat = store[name].data.reshape(-1)
        orig = flat[offset]
        flat[offset] = orig + eps
        f_plus = float(loss_fn().data)
        flat[offset] = orig - eps
        f_minus = float(loss_fn().data)
        flat[offset] = orig
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = grads[name].reshape(-1)[offset]
        denom = max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
