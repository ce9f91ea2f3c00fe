"""Dense tensors with tape-based reverse-mode automatic differentiation.

A small fixed set of primitives covers everything the model needs: matrix
products, elementwise arithmetic, concatenation, row softmax, row layer
normalization, row L2 normalization, reductions, pointwise nonlinearities
and cosine similarity. Each primitive has a hand-written backward rule,
registered in ``BACKWARD`` by op name; the finite-difference oracle in
``grad_check`` verifies all of them.

Recording is explicit: operations append to the innermost active ``Tape``
(a thread-local stack), and only when some input requires gradients.
Running the same code with no tape active is plain forward evaluation,
which is what the finite-difference probes use. A tape replays backward
in reverse recording order, which is a reverse topological order of the
computation, and each entry is visited exactly once.

Values are float64 by default. Any NaN or Inf produced by an operation
raises ``NumericError`` instead of propagating.
"""

from __future__ import annotations

import math
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _all_finite(arr: np.ndarray) -> bool:
    # summing is cheaper than isfinite().all() and still trips on NaN/Inf
    return math.isfinite(arr.sum())


class Tensor:
    """Dense rank 1..3 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim > 3:
            raise ShapeError(f"tensors are rank 1..3, got rank {arr.ndim}")
        if not _all_finite(arr):
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars go through the constant-scalar primitives.

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

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


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class TapeEntry:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op: str, inputs: tuple, out: Tensor, ctx=None):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tape:
    """Ordered record of primitive ops; replayable backward exactly once."""

    def __init__(self):
        self._entries: list[TapeEntry] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def op_names(self) -> list[str]:
        return [e.op for e in self._entries]

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(root)/d(leaf) into ``.grad`` of every tracked leaf."""
        if self._used:
            raise RuntimeError("tape has already been replayed")
        self._used = True
        if not root.requires_grad:
            raise ValueError("backward root does not require gradients")
        if seed is None:
            seed = np.ones_like(root.data)
        elif seed.shape != root.data.shape:
            raise ShapeError(f"seed shape {seed.shape} != root shape {root.data.shape}")

        grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.data.dtype)}
        holders: dict[int, Tensor] = {id(root): root}
        produced = {id(e.out) for e in self._entries}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            if g.shape != t.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
            if not _all_finite(g):
                raise NumericError("non-finite gradient")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g.copy() if g.base is not None else g
                holders[key] = t

        for entry in reversed(self._entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            BACKWARD[entry.op](entry, g, accumulate)

        for key, g in grads.items():
            t = holders[key]
            if id(t) in produced:
                continue
            t.grad = g if t.grad is None else t.grad + g


def _wrap(op: str, data: np.ndarray, inputs: tuple, ctx=None) -> Tensor:
    if not _all_finite(data):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._entries.append(TapeEntry(op, inputs, out, ctx))
    return out


def _as2d(t: Tensor) -> np.ndarray:
    if t.data.ndim == 1:
        return t.data.reshape(1, -1)
    return t.data


# ---------------------------------------------------------------------------
# Elementwise arithmetic. Shapes must match exactly, except that a 1 x m
# operand combines with an n x m one (bias-style row broadcast); its gradient
# is then summed over rows.


def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    ok = (
        a.data.ndim == 2
        and b.data.ndim == 2
        and a.shape[1] == b.shape[1]
        and (a.shape[0] == 1 or b.shape[0] == 1)
    )
    if not ok:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not combine")


def _collapse(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("add", a, b)
    return _wrap("add", a.data + b.data, (a, b))


def _bw_add(entry, g, acc):
    a, b = entry.inputs
    acc(a, _collapse(g, a.data.shape))
    acc(b, _collapse(g, b.data.shape))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("sub", a, b)
    return _wrap("sub", a.data - b.data, (a, b))


def _bw_sub(entry, g, acc):
    a, b = entry.inputs
    acc(a, _collapse(g, a.data.shape))
    acc(b, -_collapse(g, b.data.shape))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("mul", a, b)
    return _wrap("mul", a.data * b.data, (a, b))


def _bw_mul(entry, g, acc):
    a, b = entry.inputs
    acc(a, _collapse(g * b.data, a.data.shape))
    acc(b, _collapse(g * a.data, b.data.shape))


def scale(a: Tensor, c: float) -> Tensor:
    return _wrap("scale", a.data * c, (a,), ctx=c)


def _bw_scale(entry, g, acc):
    acc(entry.inputs[0], g * entry.ctx)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _wrap("add_scalar", a.data + c, (a,), ctx=c)


def _bw_add_scalar(entry, g, acc):
    acc(entry.inputs[0], g)


# ---------------------------------------------------------------------------
# Linear algebra.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    return _wrap("matmul", a.data @ b.data, (a, b))


def _bw_matmul(entry, g, acc):
    a, b = entry.inputs
    acc(a, g @ b.data.T)
    acc(b, a.data.T @ g)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T in one primitive (the common similarity/score pattern)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul_t needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t widths disagree: {a.shape} x {b.shape}")
    return _wrap("matmul_t", a.data @ b.data.T, (a, b))


def _bw_matmul_t(entry, g, acc):
    a, b = entry.inputs
    acc(a, g @ b.data)
    acc(b, g.T @ a.data)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs rank-2 input, got {a.shape}")
    return _wrap("transpose", a.data.T, (a,))


def _bw_transpose(entry, g, acc):
    acc(entry.inputs[0], np.ascontiguousarray(g.T))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero parts")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    datas = [_as2d(p) for p in parts]
    widths = {d.shape[1 - axis] for d in datas}
    if len(widths) != 1:
        raise ShapeError(f"concat parts disagree off-axis: {[p.shape for p in parts]}")
    sizes = [d.shape[axis] for d in datas]
    return _wrap("concat", np.concatenate(datas, axis=axis), tuple(parts), ctx=(axis, sizes))


def _bw_concat(entry, g, acc):
    axis, sizes = entry.ctx
    offset = 0
    for t, size in zip(entry.inputs, sizes):
        sl = (slice(offset, offset + size), slice(None)) if axis == 0 else (slice(None), slice(offset, offset + size))
        piece = g[sl]
        acc(t, piece.reshape(t.data.shape))
        offset += size


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols needs rank-2 input, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    return _wrap("slice_cols", a.data[:, start:stop].copy(), (a,), ctx=(start, stop))


def _bw_slice_cols(entry, g, acc):
    (a,) = entry.inputs
    start, stop = entry.ctx
    full = np.zeros_like(a.data)
    full[:, start:stop] = g
    acc(a, full)


# ---------------------------------------------------------------------------
# Row-structured ops.


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along each row, computed with max subtraction."""
    d = _as2d(x)
    shifted = d - d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return _wrap("row_softmax", out.reshape(x.data.shape), (x,))


def _bw_row_softmax(entry, g, acc):
    (x,) = entry.inputs
    y = entry.out.data.reshape(_as2d(x).shape)
    g2 = g.reshape(y.shape)
    inner = (g2 * y).sum(axis=1, keepdims=True)
    acc(x, (y * (g2 - inner)).reshape(x.data.shape))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean and unit variance, then affine."""
    d = _as2d(x)
    if gain.data.reshape(-1).shape[0] != d.shape[1] or bias.data.reshape(-1).shape[0] != d.shape[1]:
        raise ShapeError(
            f"layer_norm gain/bias must have width {d.shape[1]}, got {gain.shape} and {bias.shape}"
        )
    m = d.shape[1]
    mu = d.sum(axis=1, keepdims=True) / m
    diff = d - mu
    var = (diff * diff).sum(axis=1, keepdims=True) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv
    out = xhat * gain.data.reshape(1, -1) + bias.data.reshape(1, -1)
    return _wrap("layer_norm", out.reshape(x.data.shape), (x, gain, bias), ctx=(xhat, inv))


def _bw_layer_norm(entry, g, acc):
    x, gain, bias = entry.inputs
    xhat, inv = entry.ctx
    g2 = g.reshape(xhat.shape)
    acc(gain, (g2 * xhat).sum(axis=0, keepdims=True).reshape(gain.data.shape))
    acc(bias, g2.sum(axis=0, keepdims=True).reshape(bias.data.shape))
    dxhat = g2 * gain.data.reshape(1, -1)
    m = dxhat.mean(axis=1, keepdims=True)
    mx = (dxhat * xhat).mean(axis=1, keepdims=True)
    acc(x, ((dxhat - m - xhat * mx) * inv).reshape(x.data.shape))


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit L2 norm; zero rows map to zero with a warning."""
    d = _as2d(x)
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    safe = norms.copy()
    zero = norms[:, 0] == 0.0
    if zero.any():
        warnings.warn("l2_normalize_rows: zero-norm row mapped to zero", RuntimeWarning)
        safe[zero] = 1.0
    out = d / safe
    return _wrap("l2_normalize_rows", out.reshape(x.data.shape), (x,), ctx=(out, safe, zero))


def _bw_l2_normalize_rows(entry, g, acc):
    (x,) = entry.inputs
    y, safe, zero = entry.ctx
    g2 = g.reshape(y.shape)
    inner = (g2 * y).sum(axis=1, keepdims=True)
    dx = (g2 - y * inner) / safe
    if zero.any():
        dx[zero] = 0.0
    acc(x, dx.reshape(x.data.shape))


# ---------------------------------------------------------------------------
# Pointwise nonlinearities.


def relu(x: Tensor) -> Tensor:
    return _wrap("relu", np.maximum(x.data, 0.0), (x,))


def _bw_relu(entry, g, acc):
    (x,) = entry.inputs
    acc(x, g * (x.data > 0.0))


def sigmoid(x: Tensor) -> Tensor:
    # exp may overflow to inf for very negative inputs; the result is still 0
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.data))
    return _wrap("sigmoid", out, (x,))


def _bw_sigmoid(entry, g, acc):
    y = entry.out.data
    acc(entry.inputs[0], g * y * (1.0 - y))


def exp(x: Tensor) -> Tensor:
    return _wrap("exp", np.exp(x.data), (x,))


def _bw_exp(entry, g, acc):
    acc(entry.inputs[0], g * entry.out.data)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0.0).any():
        raise NumericError("log of non-positive value")
    return _wrap("log", np.log(x.data), (x,))


def _bw_log(entry, g, acc):
    acc(entry.inputs[0], g / entry.inputs[0].data)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through unclamped entries."""
    return _wrap("clip", np.clip(x.data, lo, hi), (x,), ctx=(lo, hi))


def _bw_clip(entry, g, acc):
    (x,) = entry.inputs
    lo, hi = entry.ctx
    acc(x, g * ((x.data >= lo) & (x.data <= hi)))


# ---------------------------------------------------------------------------
# Reductions.


def sum_all(x: Tensor) -> Tensor:
    return _wrap("sum_all", np.array([[x.data.sum()]]), (x,))


def _bw_sum_all(entry, g, acc):
    (x,) = entry.inputs
    acc(x, np.full_like(x.data, g[0, 0]))


def mean_all(x: Tensor) -> Tensor:
    return _wrap("mean_all", np.array([[x.data.mean()]]), (x,))


def _bw_mean_all(entry, g, acc):
    (x,) = entry.inputs
    acc(x, np.full_like(x.data, g[0, 0] / x.data.size))


def mean_rows(x: Tensor) -> Tensor:
    """Column means: n x m collapses to 1 x m."""
    d = _as2d(x)
    return _wrap("mean_rows", d.mean(axis=0, keepdims=True), (x,))


def _bw_mean_rows(entry, g, acc):
    (x,) = entry.inputs
    d = _as2d(x)
    acc(x, np.repeat(g / d.shape[0], d.shape[0], axis=0).reshape(x.data.shape))


def row_sum(x: Tensor) -> Tensor:
    """Row sums: n x m collapses to n x 1."""
    d = _as2d(x)
    return _wrap("row_sum", d.sum(axis=1, keepdims=True), (x,))


def _bw_row_sum(entry, g, acc):
    (x,) = entry.inputs
    d = _as2d(x)
    acc(x, np.repeat(g, d.shape[1], axis=1).reshape(x.data.shape))


def take_diag(x: Tensor) -> Tensor:
    """Diagonal of a square matrix as an n x 1 column."""
    d = _as2d(x)
    if d.shape[0] != d.shape[1]:
        raise ShapeError(f"take_diag needs a square matrix, got {x.shape}")
    return _wrap("take_diag", np.diag(d).reshape(-1, 1).copy(), (x,))


def _bw_take_diag(entry, g, acc):
    (x,) = entry.inputs
    full = np.zeros_like(_as2d(x))
    np.fill_diagonal(full, g[:, 0])
    acc(x, full.reshape(x.data.shape))


# ---------------------------------------------------------------------------
# Cosine similarity between two vectors.


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """u . v / (|u| |v|) as a 1 x 1 tensor; zero-norm inputs give 0."""
    ud = u.data.reshape(-1)
    vd = v.data.reshape(-1)
    if ud.shape != vd.shape:
        raise ShapeError(f"cosine_sim shapes {u.shape} and {v.shape} differ")
    nu = float(np.linalg.norm(ud))
    nv = float(np.linalg.norm(vd))
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine_sim: zero-norm input, returning 0", RuntimeWarning)
        return _wrap("cosine_sim", np.zeros((1, 1)), (u, v), ctx=None)
    c = float(ud @ vd) / (nu * nv)
    return _wrap("cosine_sim", np.array([[c]]), (u, v), ctx=(nu, nv, c))


def _bw_cosine_sim(entry, g, acc):
    u, v = entry.inputs
    if entry.ctx is None:  # zero-norm fallback: flat at the singular point
        acc(u, np.zeros_like(u.data))
        acc(v, np.zeros_like(v.data))
        return
    nu, nv, c = entry.ctx
    ud = u.data.reshape(-1)
    vd = v.data.reshape(-1)
    gs = g[0, 0]
    du = gs * (vd / (nu * nv) - c * ud / (nu * nu))
    dv = gs * (ud / (nu * nv) - c * vd / (nv * nv))
    acc(u, du.reshape(u.data.shape))
    acc(v, dv.reshape(v.data.shape))


BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "add_scalar": _bw_add_scalar,
    "matmul": _bw_matmul,
    "matmul_t": _bw_matmul_t,
    "transpose": _bw_transpose,
    "concat": _bw_concat,
    "slice_cols": _bw_slice_cols,
    "row_softmax": _bw_row_softmax,
    "layer_norm": _bw_layer_norm,
    "l2_normalize_rows": _bw_l2_normalize_rows,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "exp": _bw_exp,
    "log": _bw_log,
    "clip": _bw_clip,
    "sum_all": _bw_sum_all,
    "mean_all": _bw_mean_all,
    "mean_rows": _bw_mean_rows,
    "row_sum": _bw_row_sum,
    "take_diag": _bw_take_diag,
    "cosine_sim": _bw_cosine_sim,
}


# ---------------------------------------------------------------------------
# Finite-difference oracle.


def grad_check_named(
    f: Callable[[], Tensor],
    named_params: Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Max relative error of the taped gradient per named parameter.

    ``f`` must be a deterministic scalar function of the given parameters.
    The analytic gradient comes from one taped backward pass; each parameter
    element is then probed with a central difference (f(p+eps) - f(p-eps))
    / (2 eps) and compared with denominator max(|analytic|, |numeric|, 1e-8).
    """
    named = list(named_params)
    for _, t in named:
        t.grad = None
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got {out.shape}")
    if out.requires_grad:
        tape.backward(out)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in named
    }
    report: dict[str, float] = {}
    for name, t in named:
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(float(ana[i]) - numeric) / max(abs(float(ana[i])), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report[name] = float(worst)
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error over all parameters; see ``grad_check_named``."""
    report = grad_check_named(f, [(f"p{i}", p) for i, p in enumerate(params)], eps=eps)
    return max(report.values()) if report else 0.0
