"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Ops compute eagerly with numpy.  While a :class:`Tape` is active, any op
whose inputs require gradients appends a backward rule to the tape;
``Tape.backward`` replays the rules in reverse creation order, which is a
valid topological order because graphs are built forward.

Broadcasting is restricted to scalar-with-tensor.  Everything else goes
through explicit expand ops so silent shape coercion cannot hide a bug.
All storage is float64 and row-major.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operands do not have the shapes an op requires."""


class TapeError(RuntimeError):
    """Tape misuse: nested tapes, reused tapes, non-scalar loss."""


class Tensor:
    """Dense float64 array plus gradient slot.

    ``requires_grad`` on a leaf marks it as a parameter; on an op output
    it is set automatically when a backward rule was recorded.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # scalar-tensor broadcasting only; tensor-tensor must be same shape
    def __add__(self, other):
        return shift(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if _is_number(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_number(other) else div(self, other)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of op applications for one forward pass.

    Single-threaded by design: at most one tape may be active, and each
    tape may be walked backward once.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate dloss/dx into ``x.grad`` for every leaf that requires grad.

        Returns the leaf gradients keyed by tensor.  Visits each recorded
        node exactly once, in reverse creation order.
        """
        if self._spent:
            raise TapeError("backward already ran on this tape")
        self._spent = True
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        produced = {id(node[0]) for node in self._nodes}
        if id(loss) not in produced:
            warnings.warn("loss is not connected to this tape; all gradients are zero", stacklevel=2)
            return {}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for out, parents, rule in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = rule(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in produced:
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
                else:
                    if parent in leaf_grads:
                        leaf_grads[parent] = leaf_grads[parent] + pg
                    else:
                        leaf_grads[parent] = pg
        for leaf, g in leaf_grads.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return leaf_grads


def _record(out: Tensor, parents: tuple[Tensor, ...], rule) -> Tensor:
    tape = Tape._active
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._nodes.append((out, parents, rule))
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("div", a, b)
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def shift(a, c) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data + c)
    return _record(out, (a,), lambda g: (g,))


def scale(a, c) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * 0.5 / y,))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip values into [lo, hi]; gradient passes only strictly inside."""
    a = as_tensor(a)
    if lo is None and hi is None:
        raise ValueError("clamp: need at least one bound")
    y = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside = inside * (a.data > lo)
    if hi is not None:
        inside = inside * (a.data < hi)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * inside,))


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), rule)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def rule(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record(out, (a,), rule)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def sum_axis(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), rule)


def mean_axis(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _record(out, (a,), rule)


def max_axis(a, axis: int) -> Tensor:
    """Max over one axis; the subgradient flows to the first argmax."""
    a = as_tensor(a)
    out = Tensor(a.data.max(axis=axis))
    arg = np.argmax(a.data, axis=axis)

    def rule(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), rule)


def masked_mean(a, mask, axis: int | None = None) -> Tensor:
    """Mean over entries where mask == 1; mask is constant w.r.t. gradients."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError(f"masked_mean: shapes {a.shape} vs {m.shape}")
    denom = m.sum(axis=axis)
    if np.any(denom == 0):
        raise ValueError("masked_mean: mask selects no entries")
    out = Tensor((a.data * m).sum(axis=axis) / denom)

    def rule(g):
        if axis is None:
            return (m * (g / denom),)
        return (m * np.expand_dims(g / denom, axis),)

    return _record(out, (a,), rule)


def expand_rows(v, n: int) -> Tensor:
    """(m,) -> (n, m): repeat a row vector n times."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"expand_rows: shape {v.shape}")
    out = Tensor(np.tile(v.data, (n, 1)))
    return _record(out, (v,), lambda g: (g.sum(axis=0),))


def expand_cols(v, m: int) -> Tensor:
    """(n,) -> (n, m): repeat a column vector m times."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"expand_cols: shape {v.shape}")
    out = Tensor(np.repeat(v.data[:, None], m, axis=1))
    return _record(out, (v,), lambda g: (g.sum(axis=1),))


def gather_rows(table, idx) -> Tensor:
    """Pick rows of a (V, d) table; gradient scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: table {table.shape}, idx {idx.shape}")
    out = Tensor(table.data[idx])

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (table,), rule)


def select_columns(a, cols) -> Tensor:
    """out[i] = a[i, cols[i]] for a (B, N) matrix."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"select_columns: matrix {a.shape}, cols {cols.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, cols])

    def rule(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        return (full,)

    return _record(out, (a,), rule)


def detach(a) -> Tensor:
    return as_tensor(a).detach()


# ------------------------------------------------------------ sequence fused

def masked_softmax(scores, mask) -> Tensor:
    """Softmax over axis 0 of (T, B, r) scores; masked steps get weight 0.

    ``mask`` is (T, B) with 1 for valid steps and is constant w.r.t.
    gradients.  Every (b, j) column must contain at least one valid step.
    """
    scores = as_tensor(scores)
    m = np.asarray(mask, dtype=np.float64)
    if scores.ndim != 3 or m.shape != scores.shape[:2]:
        raise ShapeError(f"masked_softmax: scores {scores.shape}, mask {m.shape}")
    if np.any(m.sum(axis=0) == 0):
        raise ValueError("masked_softmax: a column has no valid steps")
    m3 = m[:, :, None]
    shifted = np.where(m3 > 0, scores.data, -np.inf)
    shifted = scores.data - shifted.max(axis=0, keepdims=True)
    e = np.exp(shifted) * m3
    y = e / e.sum(axis=0, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=0, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (scores,), rule)


def weighted_pool(alpha, feats) -> Tensor:
    """pooled[b, j, f] = sum_t alpha[t, b, j] * feats[t, b, f]."""
    alpha, feats = as_tensor(alpha), as_tensor(feats)
    if (
        alpha.ndim != 3
        or feats.ndim != 3
        or alpha.shape[:2] != feats.shape[:2]
    ):
        raise ShapeError(f"weighted_pool: alpha {alpha.shape}, feats {feats.shape}")
    out = Tensor(np.einsum("tbj,tbf->bjf", alpha.data, feats.data))

    def rule(g):
        da = np.einsum("bjf,tbf->tbj", g, feats.data)
        df = np.einsum("tbj,bjf->tbf", alpha.data, g)
        return (da, df)

    return _record(out, (alpha, feats), rule)


def time_reverse(a, lengths) -> Tensor:
    """Reverse the first ``lengths[b]`` steps of each column of a (T, B, F) array.

    Padding steps stay in place, so the op is an involution for a fixed
    ``lengths`` and its gradient is the same permutation.
    """
    a = as_tensor(a)
    lengths = np.asarray(lengths, dtype=np.intp)
    if a.ndim != 3 or lengths.shape != (a.shape[1],):
        raise ShapeError(f"time_reverse: array {a.shape}, lengths {lengths.shape}")
    steps = a.shape[0]
    s = np.arange(steps)[:, None]
    perm = np.where(s < lengths[None, :], lengths[None, :] - 1 - s, s)
    cols = np.arange(a.shape[1])[None, :]
    out = Tensor(a.data[perm, cols, :])
    return _record(out, (a,), lambda g: (g[perm, cols, :],))


def gru_sequence(xz, xr, xh, h0, uz, ur, uh, mask) -> Tensor:
    """Masked GRU over (T, B, H) precomputed input projections.

    Dispatches to the compiled kernel when available.  Returns the full
    (T, B, H) state sequence; padded steps carry the previous state.
    """
    xz, xr, xh = as_tensor(xz), as_tensor(xr), as_tensor(xh)
    h0, uz, ur, uh = as_tensor(h0), as_tensor(uz), as_tensor(ur), as_tensor(uh)
    if not (xz.shape == xr.shape == xh.shape) or xz.ndim != 3:
        raise ShapeError(f"gru_sequence: projections {xz.shape}/{xr.shape}/{xh.shape}")
    steps, batch, width = xz.shape
    if h0.shape != (batch, width) or uz.shape != (width, width):
        raise ShapeError(f"gru_sequence: h0 {h0.shape}, uz {uz.shape}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (steps, batch):
        raise ShapeError(f"gru_sequence: mask {m.shape} for (T={steps}, B={batch})")
    hs, caches = _kernels.gru_forward(
        xz.data, xr.data, xh.data, h0.data, uz.data, ur.data, uh.data, m
    )
    out = Tensor(hs)

    def rule(g):
        return _kernels.gru_backward(
            np.ascontiguousarray(g), hs, *caches, h0.data, uz.data, ur.data, uh.data, m
        )

    return _record(out, (xz, xr, xh, h0, uz, ur, uh), rule)


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check; ``worst`` names the tensor."""

    max_rel_err: float
    passed: bool
    n_coords: int
    worst: str = ""

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} over {self.n_coords} coords ({self.worst})"


def grad_check(f, inputs, h: float = 1e-5, tol: float = 1e-4, names=None) -> GradCheckReport:
    """Compare analytic gradients of ``f(inputs)`` with central differences.

    ``f`` must be a deterministic function of the input tensors returning
    a scalar Tensor.  Relative error uses max(|analytic|, |numeric|, 1) as
    the denominator so near-zero coordinates are judged absolutely.
    """
    inputs = list(inputs)
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]
    for x in inputs:
        x.zero_grad()
    with Tape() as tape:
        loss = f(*inputs)
        tape.backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    max_err = 0.0
    worst = ""
    n_coords = 0
    for x, ga, name in zip(inputs, analytic, names):
        flat = x.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            n_coords += 1
            keep = flat[i]
            flat[i] = keep + h
            up = f(*inputs).item()
            flat[i] = keep - h
            down = f(*inputs).item()
            flat[i] = keep
            gn = (up - down) / (2.0 * h)
            err = abs(gflat[i] - gn) / max(abs(gflat[i]), abs(gn), 1.0)
            if err > max_err:
                max_err = err
                worst = f"{name}[{i}]"
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol, n_coords=n_coords, worst=worst)


def global_norm(grads) -> float:
    """Euclidean norm over a list of gradient arrays."""
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))
