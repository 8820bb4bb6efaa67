"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

Only what the mesh GNN needs is here: matrix products, pointwise
activations, row-wise affine broadcasting, layer normalization and the
gather/scatter family used for message passing and pooling.

Usage::

    w = Tensor(np.ones((2, 1)), requires_grad=True)
    with Tape() as tape:
        loss = mean_all(square(matmul(x, w)))
    (gw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConsistencyError, DimensionError

_local = threading.local()
_checked = True

ELU_ALPHA = 1.0
LAYER_NORM_EPS = 1e-5


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf validation of every freshly built tensor."""
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


@contextlib.contextmanager
def checked(flag: bool = True):
    prev = _checked
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


class Tensor:
    """Immutable 2-D array of float64 values.

    ``requires_grad`` marks leaves whose gradient is wanted; outputs of
    recorded operations inherit the flag.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        if _checked and not np.isfinite(arr).all():
            raise ValueError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        if _checked and not np.isfinite(arr).all():
            raise FloatingPointError("operation produced NaN or Inf")
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    return _as_tensor(x) if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable operations in execution order.

    Single-owner: a tape belongs to the thread that entered it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._records.append((out, inputs, vjp))

    def gradient(self, target: Tensor, sources: Sequence[Tensor],
                 seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Gradients of ``target`` (summed if not 1x1) w.r.t. ``sources``."""
        grads: dict[int, np.ndarray] = {
            id(target): np.ones(target.shape) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        for out, inputs, vjp in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros(s.shape)) for s in sources]


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _finish(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        tape.record(out, inputs, vjp)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _row_vector(row: Tensor, x: Tensor, op: str) -> None:
    if row.shape != (1, x.cols):
        raise DimensionError(f"{op}: expected 1x{x.cols} row, got {row.shape}")


def _col_vector(col: Tensor, x: Tensor, op: str) -> None:
    if col.shape != (x.rows, 1):
        raise DimensionError(f"{op}: expected {x.rows}x1 column, got {col.shape}")


# ---------------------------------------------------------------- algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _finish(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish(x.data * c, (x,), lambda g: (g * c,))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x + row broadcast over rows (bias add)."""
    _row_vector(row, x, "add_row")
    return _finish(x.data + row.data, (x, row),
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    _row_vector(row, x, "mul_row")
    xd, rd = x.data, row.data
    return _finish(xd * rd, (x, row),
                   lambda g: (g * rd, (g * xd).sum(axis=0, keepdims=True)))


def mul_col(x: Tensor, col: Tensor) -> Tensor:
    """Scale each row of x by the matching entry of a column vector."""
    _col_vector(col, x, "mul_col")
    xd, cd = x.data, col.data
    return _finish(xd * cd, (x, col),
                   lambda g: (g * cd, (g * xd).sum(axis=1, keepdims=True)))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    xd = x.data
    keep = xd >= floor
    return _finish(np.where(keep, xd, floor), (x,), lambda g: (g * keep,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _finish(out, (x,), lambda g: (g * 0.5 / out,))


# ------------------------------------------------------------ activations

def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _finish(out, (x,), lambda g: (g * (1.0 - out * out),))


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg = xd < 0
    em1 = ELU_ALPHA * np.expm1(np.minimum(xd, 0.0))
    out = np.where(neg, em1, xd)
    return _finish(out, (x,), lambda g: (g * np.where(neg, em1 + ELU_ALPHA, 1.0),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return _finish(np.where(pos, xd, 0.0), (x,), lambda g: (g * pos,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _finish(xd * xd, (x,), lambda g: (2.0 * g * xd,))


_UNARY = {"tanh": tanh, "elu": elu, "relu": relu, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise op by name; ``scale`` takes (tensor, factor)."""
    if op in _UNARY:
        (x,) = args
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    if op == "scale":
        x, c = args
        return scale(x, c)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _finish(np.array([[x.data.sum()]]), (x,),
                   lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    if n == 0:
        raise DimensionError("mean of empty tensor")
    return _finish(np.array([[x.data.sum() / n]]), (x,),
                   lambda g: (np.full(shape, g[0, 0] / n),))


def sum_cols(x: Tensor) -> Tensor:
    """Row-wise sum, rows x 1."""
    cols = x.cols
    return _finish(x.data.sum(axis=1, keepdims=True), (x,),
                   lambda g: (np.repeat(g, cols, axis=1),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
    splits = np.cumsum([p.cols for p in parts])[:-1]
    return _finish(np.concatenate([p.data for p in parts], axis=1), tuple(parts),
                   lambda g: tuple(np.split(g, splits, axis=1)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    _row_vector(gain, x, "layer_norm")
    _row_vector(bias, x, "layer_norm")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _finish(xhat * gd + bias.data, (x, gain, bias), vjp)


# -------------------------------------------------------- gather / scatter

def _index_array(index, limit: int, what: str) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise IndexError(f"{what}: index out of range [0, {limit})")
    return idx


def _segment_sum(index: np.ndarray, values: np.ndarray, out_rows: int,
                 weights: np.ndarray | None = None) -> np.ndarray:
    """out[index[k]] += weights[k] * values[k], summed per row in ascending k."""
    n = index.size
    w = np.ones(n) if weights is None else weights
    m = sp.csr_matrix((w, (index, np.arange(n))), shape=(out_rows, n))
    return np.asarray(m @ values).reshape(out_rows, values.shape[1])


def gather(x: Tensor, rows) -> Tensor:
    """Select rows in the given order; the gradient scatters back additively."""
    idx = _index_array(rows, x.rows, "gather")
    shape = x.shape

    return _finish(x.data[idx], (x,), lambda g: (_segment_sum(idx, g, shape[0]),))


def scatter_add(src: Tensor, index, out_rows: int) -> Tensor:
    idx = _index_array(index, out_rows, "scatter_add")
    if idx.size != src.rows:
        raise DimensionError(f"scatter_add: {idx.size} indices for {src.rows} rows")
    out = _segment_sum(idx, src.data, out_rows)
    return _finish(out, (src,), lambda g: (g[idx],))


def bucket_counts(index, out_rows: int) -> np.ndarray:
    return np.bincount(np.asarray(index, dtype=np.int64), minlength=out_rows).astype(np.float64)


def scatter_mean(src: Tensor, index, out_rows: int) -> Tensor:
    """Row-wise mean of ``src`` grouped by ``index``; empty buckets give zeros.

    Contributions are summed sequentially in source-row order.
    """
    idx = _index_array(index, out_rows, "scatter_mean")
    if idx.size != src.rows:
        raise DimensionError(f"scatter_mean: {idx.size} indices for {src.rows} rows")
    counts = bucket_counts(idx, out_rows)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None]
    out = _segment_sum(idx, src.data, out_rows)
    return _finish(out * inv, (src,), lambda g: ((g * inv)[idx],))


def scatter_rows(src: Tensor, index, out_rows: int) -> Tensor:
    """Place row k of src at row index[k]; unspecified rows are zero."""
    idx = _index_array(index, out_rows, "scatter_rows")
    if idx.size != src.rows:
        raise DimensionError(f"scatter_rows: {idx.size} indices for {src.rows} rows")
    if np.unique(idx).size != idx.size:
        raise ConsistencyError("scatter_rows: duplicate target index")
    out = np.zeros((out_rows, src.cols))
    out[idx] = src.data
    return _finish(out, (src,), lambda g: (g[idx],))


def sparse_apply(x: Tensor, rows, cols, weights, out_rows: int) -> Tensor:
    """out[rows[k]] += weights[k] * x[cols[k]] (a fixed sparse linear map)."""
    r = _index_array(rows, out_rows, "sparse_apply")
    c = _index_array(cols, x.rows, "sparse_apply")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not (r.size == c.size == w.size):
        raise DimensionError("sparse_apply: rows/cols/weights lengths differ")
    n_in = x.rows
    out = _segment_sum(r, x.data[c], out_rows, w)
    return _finish(out, (x,), lambda g: (_segment_sum(c, g[r], n_in, w),))


# ---------------------------------------------------------- parameter store

class ParameterStore:
    """Ordered, uniquely named parameters with trainable flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ConsistencyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable)
        self._tensors[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for n in names:
            self._trainable[n] = bool(flag)
            self._tensors[n] = Tensor._wrap(self._tensors[n].data, bool(flag))

    def assign(self, name: str, value) -> None:
        old = self._tensors[name]
        arr = np.array(value, dtype=np.float64).reshape(old.shape)
        self._tensors[name] = Tensor(arr, requires_grad=self._trainable[name])

    def n_params(self, names: Iterable[str] | None = None) -> int:
        keys = self._tensors if names is None else names
        return int(sum(self._tensors[n].data.size for n in keys))

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for n, t in self._tensors.items():
            new.add(n, t.data.copy(), self._trainable[n])
        return new


def _check_grads(store: ParameterStore, grads: dict) -> None:
    for name in store.trainable_names():
        if name not in grads:
            raise ConsistencyError(f"missing gradient for trainable parameter {name!r}")
        if np.shape(grads[name]) != store[name].shape:
            raise DimensionError(f"gradient shape mismatch for {name!r}")


def sgd_step(store: ParameterStore, grads: dict, lr: float) -> None:
    _check_grads(store, grads)
    for name in store.trainable_names():
        store.assign(name, store[name].data - lr * np.asarray(grads[name]))


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore, grads: dict) -> None:
        _check_grads(store, grads)
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in store.trainable_names():
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m.get(name, np.zeros_like(g)) * b1 + (1.0 - b1) * g
            v = self.v.get(name, np.zeros_like(g)) * b2 + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            store.assign(name, store[name].data - upd)


def adam_step(store: ParameterStore, grads: dict, state: Adam | None = None,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> Adam:
    """Functional wrapper; pass the returned state back in for later steps."""
    if state is None:
        state = Adam(lr, betas, eps)
    state.step(store, grads)
    return state
