"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every value is a 2-D matrix.  Operations are eager: the numerical result
is computed immediately and, when any operand is attached to a Tape, a
record with the matching vector-Jacobian product is appended so that
``backward`` can later accumulate gradients into parameter tensors.

There is no implicit broadcasting beyond scalar-times-matrix; all other
shape mixing must go through explicit operations (``scale_rows``,
``concat_cols``, ``gather_rows``).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import special

_EXP_MAX = math.log(np.finfo(np.float64).max)  # exp() overflows above this


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input lies outside an operation's numerical domain."""


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices, got shape {arr.shape}")
    return arr


class Tensor:
    """A rows x cols float64 matrix, optionally attached to a Tape.

    Shape is fixed at creation.  For parameters, ``grad`` is populated by
    ``Tape.backward`` and always matches ``data`` in shape.  Tensors with
    no tape attachment are plain values and safe to share.
    """

    __slots__ = ("data", "grad", "tape", "param", "name")

    def __init__(self, values, tape: "Tape | None" = None, param: bool = False,
                 name: str | None = None):
        self.data = _as_matrix(values)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.param = param
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Single-owner and single-threaded: a training step appends records in
    execution order, ``backward`` consumes them exactly once in reverse
    and clears the record list so the same tape serves the next step.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object, str]] = []
        self._params: list[Tensor] = []
        self._recording = True

    def parameter(self, values, name: str | None = None) -> Tensor:
        p = Tensor(values, tape=self, param=True, name=name)
        self._params.append(p)
        return p

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp, op: str) -> None:
        if self._recording:
            self._records.append((out, inputs, vjp, op))

    def __len__(self) -> int:
        return len(self._records)

    @contextmanager
    def paused(self):
        """Suspend recording for inference paths that never call backward."""
        prev = self._recording
        self._recording = False
        try:
            yield self
        finally:
            self._recording = prev

    def zero_grad(self) -> None:
        for p in self._params:
            p.grad = None

    def first_nonfinite(self) -> str | None:
        """Name of the earliest recorded op with a non-finite output, if any."""
        for i, (out, _, _, op) in enumerate(self._records):
            if not np.all(np.isfinite(out.data)):
                return f"{op} (record {i})"
        return None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every reachable parameter.

        Walks the records in reverse exactly once, then clears them.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 scalar loss, got {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss is not attached to this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for out, inputs, vjp, _ in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, part in zip(inputs, vjp(g)):
                if part is None or t.tape is None:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    # copy: vjps may hand back shared arrays (e.g. add)
                    grads[id(t)] = np.array(part, dtype=np.float64)
                else:
                    acc += part
        for p in self._params:
            g = grads.get(id(p))
            if g is not None:
                p.grad = g if p.grad is None else p.grad + g
        self._records.clear()


def backward(loss: Tensor) -> None:
    if loss.tape is None:
        raise ValueError("loss is not attached to a tape")
    loss.tape.backward(loss)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _emit(data, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(data, tape=tape)
    if tape is not None:
        tape.record(out, inputs, vjp, op)
    return out


def _check_equal_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    def vjp(g):
        return (g.T,)

    return _emit(a.data.T, (a,), vjp, "transpose")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_equal_shapes(a, b, "add")

        def vjp(g):
            return g, g

        return _emit(a.data + b.data, (a, b), vjp, "add")

    def vjp_scalar(g):
        return (g,)

    return _emit(a.data + float(b), (a,), vjp_scalar, "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_equal_shapes(a, b, "sub")

        def vjp(g):
            return g, -g

        return _emit(a.data - b.data, (a, b), vjp, "sub")

    def vjp_scalar(g):
        return (g,)

    return _emit(a.data - float(b), (a,), vjp_scalar, "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_equal_shapes(a, b, "hadamard")
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _emit(ad * bd, (a, b), vjp, "hadamard")


def scale(a: Tensor, s) -> Tensor:
    """Scalar times matrix; the scalar may be a learnable 1x1 tensor."""
    if isinstance(s, Tensor):
        if s.shape != (1, 1):
            raise ShapeError(f"scale: factor must be 1x1, got {s.shape}")
        ad = a.data
        k = s.data[0, 0]

        def vjp(g):
            return g * k, np.array([[float(np.sum(g * ad))]])

        return _emit(ad * k, (a, s), vjp, "scale")
    k = float(s)

    def vjp_const(g):
        return (g * k,)

    return _emit(a.data * k, (a,), vjp_const, "scale")


def scale_rows(a: Tensor, col: Tensor) -> Tensor:
    """Multiply row i of ``a`` by ``col[i, 0]`` (explicit per-row gating)."""
    if col.shape != (a.shape[0], 1):
        raise ShapeError(f"scale_rows: need a {a.shape[0]}x1 column, got {col.shape}")
    ad, cd = a.data, col.data

    def vjp(g):
        return g * cd, np.sum(g * ad, axis=1, keepdims=True)

    return _emit(ad * cd, (a, col), vjp, "scale_rows")


def sigmoid(a: Tensor) -> Tensor:
    y = special.expit(a.data)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _emit(y, (a,), vjp, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _emit(y, (a,), vjp, "tanh")


def exp(a: Tensor) -> Tensor:
    if np.any(a.data > _EXP_MAX):
        raise DomainError(f"exp overflows for inputs above {_EXP_MAX:.2f}")
    y = np.exp(a.data)

    def vjp(g):
        return (g * y,)

    return _emit(y, (a,), vjp, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _emit(np.log(ad), (a,), vjp, "log")


def prelu(a: Tensor, slope) -> Tensor:
    """PReLU with a scalar slope; pass a 1x1 parameter to learn it."""
    ad = a.data
    pos = ad > 0
    if isinstance(slope, Tensor):
        if slope.shape != (1, 1):
            raise ShapeError(f"prelu: slope must be 1x1, got {slope.shape}")
        k = slope.data[0, 0]

        def vjp(g):
            ga = g * np.where(pos, 1.0, k)
            gk = float(np.sum(g * np.where(pos, 0.0, ad)))
            return ga, np.array([[gk]])

        return _emit(np.where(pos, ad, k * ad), (a, slope), vjp, "prelu")
    k = float(slope)

    def vjp_const(g):
        return (g * np.where(pos, 1.0, k),)

    return _emit(np.where(pos, ad, k * ad), (a,), vjp_const, "prelu")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large negative inputs."""
    ad = a.data
    y = special.log_expit(ad)

    def vjp(g):
        return (g * special.expit(-ad),)

    return _emit(y, (a,), vjp, "log_sigmoid")


def softmax_rows(a: Tensor) -> Tensor:
    ad = a.data
    if not np.all(np.isfinite(ad)):
        raise DomainError("softmax_rows requires finite input")
    shifted = ad - ad.max(axis=1, keepdims=True)  # row-max subtraction
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return _emit(y, (a,), vjp, "softmax_rows")


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean, returned as a 1 x cols row."""
    if a.data.size == 0:
        raise ValueError("mean_rows of an empty tensor")
    ad = a.data
    n = ad.shape[0]

    def vjp(g):
        return (np.broadcast_to(g / n, ad.shape),)

    return _emit(ad.mean(axis=0, keepdims=True), (a,), vjp, "mean_rows")


def sum_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ValueError("sum_all of an empty tensor")
    ad = a.data

    def vjp(g):
        return (np.full(ad.shape, g[0, 0]),)

    return _emit([[ad.sum()]], (a,), vjp, "sum_all")


def concat_cols(tensors) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat_cols of an empty sequence")
    rows = ts[0].shape[0]
    for t in ts[1:]:
        if t.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ, {ts[0].shape} vs {t.shape}")
    offsets = np.cumsum([t.shape[1] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.hsplit(g, offsets))

    return _emit(np.concatenate([t.data for t in ts], axis=1), tuple(ts), vjp, "concat_cols")


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ValueError("gather_rows with an empty index list")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise IndexError(f"gather_rows: indices out of range for {a.shape[0]} rows")
    ad = a.data

    def vjp(g):
        z = np.zeros_like(ad)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(ad[idx], (a,), vjp, "gather_rows")
