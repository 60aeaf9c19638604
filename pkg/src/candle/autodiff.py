"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Just enough machinery for this model family: broadcast arithmetic, matmul,
concatenation/slicing, row normalization, masked softmax, log-sum-exp, label
gathering, and a mean reduction.  Each primitive stores its backward closure;
``Tensor.backward()`` runs a topological sweep accumulating gradients into
``requires_grad`` leaves.

Gradient flows are float64 end to end, which is what makes the 1e-4
finite-difference agreement contract achievable.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every requires_grad node."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitives ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _track(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g):
        _accum(a, -g)

    return _track(out, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _track(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _track(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)

    def backward(g):
        _accum(a, g.T)

    return _track(out, (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _track(out, tuple(parts), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy())

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)

    return _track(out, (a,), backward)


def l2norm_rows(a: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Row-wise y = x / ||x||; raises on rows with norm below min_norm."""
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    dead = np.nonzero(norms.ravel() < min_norm)[0]
    if dead.size:
        raise DegenerateVectorError(f"row {int(dead[0])} has norm below {min_norm:g}")
    y = a.data / norms
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, (g - y * inner) / norms)

    return _track(out, (a,), backward)


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log(sum(exp(row))), max-subtracted for stability."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = Tensor((np.log(s) + m).squeeze(-1))
    soft = e / s

    def backward(g):
        _accum(a, soft * np.expand_dims(g, -1))

    return _track(out, (a,), backward)


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _accum(a, full)

    return _track(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean())

    def backward(g):
        _accum(a, np.full_like(a.data, float(g) / a.data.size))

    return _track(out, (a,), backward)


def masked_softmax_rows(scores: Tensor, allow: np.ndarray | None) -> Tensor:
    """Row-wise softmax restricted to ``allow``; fully masked rows give zeros.

    ``allow`` is a constant boolean matrix (True = may attend).  Disallowed
    entries get weight 0 exactly; a row with no allowed entries yields an
    all-zero row instead of NaN, which lets a residual connection pass the
    token through unchanged.
    """
    s = scores.data
    if allow is None:
        m = s.max(axis=-1, keepdims=True)
        e = np.exp(s - m)
        w = e / e.sum(axis=-1, keepdims=True)
    else:
        allow = np.broadcast_to(allow, s.shape)
        masked = np.where(allow, s, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s_eff = np.where(allow, s, m)  # neutralize masked entries before exp
        e = np.where(allow, np.exp(s_eff - m), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        w = np.where(denom > 0, e / np.where(denom == 0, 1.0, denom), 0.0)
    out = Tensor(w)

    def backward(g):
        inner = (g * w).sum(axis=-1, keepdims=True)
        _accum(scores, w * (g - inner))

    return _track(out, (scores,), backward)
