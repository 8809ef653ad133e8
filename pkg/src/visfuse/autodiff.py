"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations record (output, backward_fn) entries on an explicit Tape in
execution order; backward() replays them in exact reverse order, accumulating
gradients into each node's buffer. Running ops with no tape anywhere in the
operands performs plain forward evaluation with nothing recorded, which is
safe to do concurrently; a tape and the parameters it watches must stay on a
single thread for the duration of a training step.

Everything is float64. Vectors are 1-D, matrices 2-D, scalars 0-d; there is no
general broadcasting, only the matrix/vector cases the models need.
"""

from __future__ import annotations

import struct
from hashlib import sha256
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node in the computation graph: a float64 array plus its tape."""

    __slots__ = ("data", "tape", "grad")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = _as_f64(data)
        self.tape = tape
        self.grad: Array | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"


class Parameter:
    """A named, trainable array with a persistent gradient buffer."""

    __slots__ = ("name", "data", "grad", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.data = _as_f64(data)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.data.shape}{flag})"


class Tape:
    """Ordered record of operations for one backward pass."""

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[Array], None]]] = []
        self.consumed = False
        self._leaves: dict[int, Tensor] = {}

    def watch(self, param: Parameter) -> Tensor:
        """Enter a parameter into the graph as a leaf.

        Trainable leaves share the parameter's gradient buffer so backward
        accumulates in place; frozen leaves get a scratch buffer that is
        discarded, i.e. zero accumulation.
        """
        cached = self._leaves.get(id(param))
        if cached is not None:
            return cached
        leaf = Tensor(param.data, tape=self)
        leaf.grad = param.grad if param.trainable else np.zeros_like(param.data)
        self._leaves[id(param)] = leaf
        return leaf

    def record(self, out: Tensor, backward_fn: Callable[[Array], None]) -> None:
        self.entries.append((out, backward_fn))

    def reset(self) -> None:
        self.entries.clear()
        self._leaves.clear()
        self.consumed = False


def constant(x) -> Tensor:
    """Wrap an array as an untaped graph input (no gradient flows to it)."""
    return Tensor(x, tape=None)


def use(param: Parameter, tape: "Tape | None") -> Tensor:
    """Enter a parameter into a graph, or wrap it read-only when tape is None."""
    return tape.watch(param) if tape is not None else Tensor(param.data, None)


def _tape_of(*tensors: Tensor) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _acc(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the tape in reverse recording order."""
    if tape.consumed:
        raise RuntimeError("tape already consumed; reset it before reusing")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.entries):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"shape mismatch for {opname}: {a.data.shape} vs {b.data.shape}"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(a, g)
            _acc(b, g)
        tape.record(out, back)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    tape = _tape_of(a, b)
    out = Tensor(a.data - b.data, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(a, g)
            _acc(b, -g)
        tape.record(out, back)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    tape = _tape_of(x)
    out = Tensor(x.data * c, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(x, g * c)
        tape.record(out, back)
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    tape = _tape_of(x)
    out = Tensor(x.data + c, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(x, g)
        tape.record(out, back)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    tape = _tape_of(a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        ad, bd = a.data, b.data
        def back(g: Array) -> None:
            _acc(a, g * bd)
            _acc(b, g * ad)
        tape.record(out, back)
    return out


def mul_colvec(m: Tensor, v: Tensor) -> Tensor:
    """Multiply each row i of a matrix by scalar v[i]."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[0] != v.data.shape[0]:
        raise ValueError(
            f"mul_colvec expects (B,T) and (B,), got {m.data.shape} and {v.data.shape}"
        )
    tape = _tape_of(m, v)
    out = Tensor(m.data * v.data[:, None], tape)
    if tape is not None:
        md, vd = m.data, v.data
        def back(g: Array) -> None:
            _acc(m, g * vd[:, None])
            _acc(v, np.sum(g * md, axis=1))
        tape.record(out, back)
    return out


def mul_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of a matrix elementwise by a vector."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ValueError(
            f"mul_rowvec expects (B,n) and (n,), got {m.data.shape} and {v.data.shape}"
        )
    tape = _tape_of(m, v)
    out = Tensor(m.data * v.data[None, :], tape)
    if tape is not None:
        md, vd = m.data, v.data
        def back(g: Array) -> None:
            _acc(m, g * vd[None, :])
            _acc(v, np.sum(g * md, axis=0))
        tape.record(out, back)
    return out


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is taken as 0
    tape = _tape_of(x)
    out = Tensor(np.maximum(x.data, 0.0), tape)
    if tape is not None:
        mask = (x.data > 0.0).astype(np.float64)
        def back(g: Array) -> None:
            _acc(x, g * mask)
        tape.record(out, back)
    return out


def tanh(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    y = np.tanh(x.data)
    out = Tensor(y, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(x, g * (1.0 - y * y))
        tape.record(out, back)
    return out


def sigmoid(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    xd = x.data
    # split by sign to avoid exp overflow on large negative inputs
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = Tensor(y, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(x, g * y * (1.0 - y))
        tape.record(out, back)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of a vector or matrix.

    Shifted by the row max and floored at exp(-700) so outputs stay strictly
    positive for any finite input.
    """
    if x.data.ndim not in (1, 2):
        raise ValueError(f"softmax expects 1-D or 2-D input, got shape {x.data.shape}")
    tape = _tape_of(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    shifted = np.maximum(shifted, -700.0)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y, tape)
    if tape is not None:
        def back(g: Array) -> None:
            inner = np.sum(g * y, axis=-1, keepdims=True)
            _acc(x, (g - inner) * y)
        tape.record(out, back)
    return out


def log_sum_exp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis: scalar for 1-D, per-row for 2-D."""
    if x.data.ndim not in (1, 2):
        raise ValueError(f"log_sum_exp expects 1-D or 2-D input, got {x.data.shape}")
    tape = _tape_of(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=-1, keepdims=True)
    y = np.squeeze(m + np.log(s), axis=-1)
    out = Tensor(y, tape)
    if tape is not None:
        p = e / s
        def back(g: Array) -> None:
            _acc(x, np.expand_dims(g, -1) * p)
        tape.record(out, back)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        ok = ad.shape[1] == bd.shape[0]
    elif ad.ndim == 2 and bd.ndim == 1:
        ok = ad.shape[1] == bd.shape[0]
    elif ad.ndim == 1 and bd.ndim == 2:
        ok = ad.shape[0] == bd.shape[0]
    else:
        ok = False
    if not ok:
        raise ValueError(f"shape mismatch for matmul: {ad.shape} vs {bd.shape}")
    tape = _tape_of(a, b)
    out = Tensor(ad @ bd, tape)
    if tape is not None:
        def back(g: Array) -> None:
            if ad.ndim == 2 and bd.ndim == 2:
                _acc(a, g @ bd.T)
                _acc(b, ad.T @ g)
            elif ad.ndim == 2 and bd.ndim == 1:
                _acc(a, np.outer(g, bd))
                _acc(b, ad.T @ g)
            else:  # 1-D @ 2-D
                _acc(a, bd @ g)
                _acc(b, np.outer(ad, g))
        tape.record(out, back)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {x.data.shape}")
    tape = _tape_of(x)
    out = Tensor(x.data.T.copy(), tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(x, g.T)
        tape.record(out, back)
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch for dot: {a.data.shape} vs {b.data.shape}")
    tape = _tape_of(a, b)
    out = Tensor(np.dot(a.data, b.data), tape)
    if tape is not None:
        ad, bd = a.data, b.data
        def back(g: Array) -> None:
            _acc(a, g * bd)
            _acc(b, g * ad)
        tape.record(out, back)
    return out


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"add_bias expects (B,n) and (n,), got {m.data.shape} and {b.data.shape}"
        )
    tape = _tape_of(m, b)
    out = Tensor(m.data + b.data, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(m, g)
            _acc(b, np.sum(g, axis=0))
        tape.record(out, back)
    return out


def linear(x: Tensor, w: Tensor, b: "Tensor | None" = None) -> Tensor:
    """w @ x (+ b) for a vector, or row-wise x @ w.T (+ b) for a matrix."""
    if x.data.ndim == 1:
        out = matmul(w, x)
        if b is not None:
            out = add(out, b)
        return out
    out = matmul(x, transpose(w))
    if b is not None:
        out = add_bias(out, b)
    return out


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    if x.data.ndim not in (1, 2):
        raise ValueError(f"l2_normalize expects 1-D or 2-D input, got {x.data.shape}")
    tape = _tape_of(x)
    n = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("cannot l2-normalize a zero vector")
    y = x.data / n
    out = Tensor(y, tape)
    if tape is not None:
        def back(g: Array) -> None:
            inner = np.sum(g * y, axis=-1, keepdims=True)
            _acc(x, (g - y * inner) / n)
        tape.record(out, back)
    return out


def weight_norm_linear(x: Tensor, v: Tensor, g: Tensor, b: "Tensor | None" = None) -> Tensor:
    """Linear layer with weight-normalized rows: W[i] = g[i] * v[i] / ||v[i]||.

    x may be a vector (in,) or a batch of rows (B, in); v is (out, in), g is
    (out,), b is (out,) or None.
    """
    vd, gd = v.data, g.data
    if vd.ndim != 2 or gd.ndim != 1 or vd.shape[0] != gd.shape[0]:
        raise ValueError(
            f"weight_norm_linear expects v (out,in) and g (out,), got {vd.shape} and {gd.shape}"
        )
    single = x.data.ndim == 1
    xd = x.data[None, :] if single else x.data
    if xd.ndim != 2 or xd.shape[1] != vd.shape[1]:
        raise ValueError(
            f"shape mismatch for weight_norm_linear: input {x.data.shape} vs v {vd.shape}"
        )
    norms = np.linalg.norm(vd, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("degenerate weight direction: zero row in v")
    tape = _tape_of(x, v, g) if b is None else _tape_of(x, v, g, b)
    u = xd @ vd.T                      # (B, out): raw projections v_i . x_b
    w_eff = (gd / norms)[:, None] * vd  # effective weight matrix
    y = u * (gd / norms) + (b.data if b is not None else 0.0)
    out = Tensor(y[0] if single else y, tape)
    if tape is not None:
        def back(grad: Array) -> None:
            gr = grad[None, :] if single else grad
            _acc(x, (gr @ w_eff)[0] if single else gr @ w_eff)
            gu = np.sum(gr * u, axis=0)          # (out,) sum_b grad_bi * u_bi
            _acc(g, gu / norms)
            gv = (gd / norms)[:, None] * (gr.T @ xd) \
                - ((gd / norms ** 3) * gu)[:, None] * vd
            _acc(v, gv)
            if b is not None:
                _acc(b, np.sum(gr, axis=0))
        tape.record(out, back)
    return out


# ---------------------------------------------------------------------------
# reductions, indexing, reshaping


def sum_all(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    out = Tensor(np.sum(x.data), tape)
    if tape is not None:
        shape = x.data.shape
        def back(g: Array) -> None:
            _acc(x, np.broadcast_to(g, shape))
        tape.record(out, back)
    return out


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def row_sum(m: Tensor) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError(f"row_sum expects a matrix, got shape {m.data.shape}")
    tape = _tape_of(m)
    out = Tensor(np.sum(m.data, axis=1), tape)
    if tape is not None:
        cols = m.data.shape[1]
        def back(g: Array) -> None:
            _acc(m, np.repeat(g[:, None], cols, axis=1))
        tape.record(out, back)
    return out


def reduce_max(x: Tensor) -> Tensor:
    """Maximum element of a vector; the subgradient goes to the first argmax."""
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError(f"reduce_max expects a nonempty vector, got {x.data.shape}")
    tape = _tape_of(x)
    idx = int(np.argmax(x.data))
    out = Tensor(x.data[idx], tape)
    if tape is not None:
        def back(g: Array) -> None:
            buf = np.zeros_like(x.data)
            buf[idx] = g
            _acc(x, buf)
        tape.record(out, back)
    return out


def row_max(m: Tensor) -> Tensor:
    """Per-row maximum of a matrix; each row's subgradient goes to its first argmax."""
    if m.data.ndim != 2 or m.data.shape[1] == 0:
        raise ValueError(f"row_max expects a matrix with columns, got {m.data.shape}")
    tape = _tape_of(m)
    idx = np.argmax(m.data, axis=1)
    out = Tensor(m.data[np.arange(m.data.shape[0]), idx], tape)
    if tape is not None:
        def back(g: Array) -> None:
            buf = np.zeros_like(m.data)
            buf[np.arange(m.data.shape[0]), idx] = g
            _acc(m, buf)
        tape.record(out, back)
    return out


def take(x: Tensor, i: int) -> Tensor:
    if x.data.ndim != 1:
        raise ValueError(f"take expects a vector, got shape {x.data.shape}")
    i = int(i)
    tape = _tape_of(x)
    out = Tensor(x.data[i], tape)
    if tape is not None:
        def back(g: Array) -> None:
            buf = np.zeros_like(x.data)
            buf[i] = g
            _acc(x, buf)
        tape.record(out, back)
    return out


def take_row(m: Tensor, i: int) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError(f"take_row expects a matrix, got shape {m.data.shape}")
    i = int(i)
    tape = _tape_of(m)
    out = Tensor(m.data[i].copy(), tape)
    if tape is not None:
        def back(g: Array) -> None:
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            m.grad[i] += g
        tape.record(out, back)
    return out


def take_rows(m: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows by index; duplicate indices accumulate in the backward pass."""
    if m.data.ndim != 2:
        raise ValueError(f"take_rows expects a matrix, got shape {m.data.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    tape = _tape_of(m)
    out = Tensor(m.data[idx], tape)
    if tape is not None:
        def back(g: Array) -> None:
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            np.add.at(m.grad, idx, g)
        tape.record(out, back)
    return out


def take_col(m: Tensor, j: int) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError(f"take_col expects a matrix, got shape {m.data.shape}")
    j = int(j)
    tape = _tape_of(m)
    out = Tensor(m.data[:, j].copy(), tape)
    if tape is not None:
        def back(g: Array) -> None:
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            m.grad[:, j] += g
        tape.record(out, back)
    return out


def pick_per_row(m: Tensor, cols: Sequence[int]) -> Tensor:
    """out[i] = m[i, cols[i]]; the batched label-gather for cross-entropy."""
    if m.data.ndim != 2:
        raise ValueError(f"pick_per_row expects a matrix, got shape {m.data.shape}")
    idx = np.asarray(cols, dtype=np.intp)
    if idx.shape[0] != m.data.shape[0]:
        raise ValueError(
            f"pick_per_row needs one column per row: {m.data.shape} vs {idx.shape}"
        )
    rows = np.arange(m.data.shape[0])
    tape = _tape_of(m)
    out = Tensor(m.data[rows, idx].copy(), tape)
    if tape is not None:
        def back(g: Array) -> None:
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            m.grad[rows, idx] += g
        tape.record(out, back)
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join 1-D vectors end to end."""
    if not parts:
        raise ValueError("concat of zero parts")
    for p in parts:
        if p.data.ndim != 1:
            raise ValueError(f"concat expects vectors, got shape {p.data.shape}")
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.data for p in parts]), tape)
    if tape is not None:
        sizes = [p.data.shape[0] for p in parts]
        def back(g: Array) -> None:
            ofs = 0
            for p, n in zip(parts, sizes):
                _acc(p, g[ofs:ofs + n])
                ofs += n
        tape.record(out, back)
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack 0-d scalars into a vector."""
    if not parts:
        raise ValueError("stack of zero parts")
    for p in parts:
        if p.data.ndim != 0:
            raise ValueError(f"stack expects scalars, got shape {p.data.shape}")
    tape = _tape_of(*parts)
    out = Tensor(np.array([p.data for p in parts]), tape)
    if tape is not None:
        def back(g: Array) -> None:
            for i, p in enumerate(parts):
                _acc(p, g[i])
        tape.record(out, back)
    return out


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into the rows of a matrix."""
    if not parts:
        raise ValueError("stack_rows of zero parts")
    n = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 1 or p.data.shape != n:
            raise ValueError("stack_rows expects equal-length vectors")
    tape = _tape_of(*parts)
    out = Tensor(np.stack([p.data for p in parts]), tape)
    if tape is not None:
        def back(g: Array) -> None:
            for i, p in enumerate(parts):
                _acc(p, g[i])
        tape.record(out, back)
    return out


def stack_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into the columns of a matrix."""
    if not parts:
        raise ValueError("stack_cols of zero parts")
    n = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 1 or p.data.shape != n:
            raise ValueError("stack_cols expects equal-length vectors")
    tape = _tape_of(*parts)
    out = Tensor(np.stack([p.data for p in parts], axis=1), tape)
    if tape is not None:
        def back(g: Array) -> None:
            for j, p in enumerate(parts):
                _acc(p, g[:, j])
        tape.record(out, back)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Join matrices with equal row counts side by side."""
    if not parts:
        raise ValueError("concat_cols of zero parts")
    rows = parts[0].data.shape[0] if parts[0].data.ndim == 2 else -1
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ValueError("concat_cols expects matrices with equal row counts")
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), tape)
    if tape is not None:
        widths = [p.data.shape[1] for p in parts]
        def back(g: Array) -> None:
            ofs = 0
            for p, w in zip(parts, widths):
                _acc(p, g[:, ofs:ofs + w])
                ofs += w
        tape.record(out, back)
    return out


def dropout(x: Tensor, rate: float, train: bool, rng: "np.random.Generator | None" = None) -> Tensor:
    """Inverted dropout: zero with probability rate, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep) / keep
    tape = _tape_of(x)
    out = Tensor(x.data * mask, tape)
    if tape is not None:
        def back(g: Array) -> None:
            _acc(x, g * mask)
        tape.record(out, back)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Compare the taped gradient of f at point against central differences.

    Returns max_i |g_a[i] - g_fd[i]| / max(1, |g_a[i]|, |g_fd[i]|). f must map
    a tensor to a scalar tensor and be deterministic (run dropout in eval mode).
    """
    point = _as_f64(point)
    tape = Tape()
    p = Parameter("grad_check.point", point.copy())
    out = f(tape.watch(p))
    if out.data.size != 1:
        raise ValueError(f"grad_check target must be scalar, got {out.data.shape}")
    backward(tape, out)
    g_a = p.grad.copy()

    g_fd = np.zeros_like(point)
    flat = point.copy().ravel()
    fd_flat = g_fd.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(constant(flat.reshape(point.shape))).data)
        flat[i] = orig - eps
        lo = float(f(constant(flat.reshape(point.shape))).data)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(g_a), np.abs(g_fd)))
    return float(np.max(np.abs(g_a - g_fd) / denom)) if point.size else 0.0


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction; moment buffers persist per parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moments: dict[str, tuple[Array, Array]] = {}

    def step(self, params: Iterable[Parameter]) -> None:
        """Apply one update to every trainable parameter; frozen ones are untouched."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in params:
            if not p.trainable:
                continue
            m, v = self.moments.get(p.name, (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * (p.grad * p.grad)
            self.moments[p.name] = (m, v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    @staticmethod
    def zero_grad(params: Iterable[Parameter]) -> None:
        for p in params:
            p.grad.fill(0.0)

    def state_arrays(self) -> dict[str, Array]:
        """Moment buffers and step count, keyed for checkpointing."""
        out: dict[str, Array] = {"adam.step_count": np.array(float(self.step_count))}
        for name, (m, v) in self.moments.items():
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, Array]) -> None:
        self.step_count = int(arrays.get("adam.step_count", np.array(0.0)))
        self.moments.clear()
        for key, val in arrays.items():
            if key.endswith(".m"):
                name = key[:-2]
                vkey = f"{name}.v"
                if vkey in arrays:
                    self.moments[name] = (_as_f64(val).copy(), _as_f64(arrays[vkey]).copy())


# ---------------------------------------------------------------------------
# parameter checkpoints

CKPT_MAGIC = b"VSF1"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, Array]) -> None:
    """Write named arrays: magic, u32 version, then per entry the u32 name
    length, UTF-8 name, u32 rank, u64 dims, and the little-endian f64 payload."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in arrays.items():
            arr = _as_f64(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> dict[str, Array]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"not a VSF1 checkpoint: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out: dict[str, Array] = {}
    ofs = 8
    total = len(blob)
    while ofs < total:
        try:
            (nlen,) = struct.unpack_from("<I", blob, ofs)
            ofs += 4
            name = blob[ofs:ofs + nlen].decode("utf-8")
            if len(blob[ofs:ofs + nlen]) != nlen:
                raise struct.error("short name")
            ofs += nlen
            (rank,) = struct.unpack_from("<I", blob, ofs)
            ofs += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, ofs) if rank else ()
            ofs += 8 * rank
            count = 1
            for d in dims:
                count *= d
            payload = blob[ofs:ofs + 8 * count]
            if len(payload) != 8 * count:
                raise struct.error("short payload")
            ofs += 8 * count
        except struct.error as exc:
            raise ValueError(f"truncated checkpoint at byte {ofs}: {exc}") from exc
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return out


def params_to_arrays(params: Iterable[Parameter]) -> dict[str, Array]:
    return {p.name: p.data for p in params}


def load_arrays_into(params: Iterable[Parameter], arrays: dict[str, Array],
                     strict: bool = True) -> None:
    """Copy checkpoint arrays into matching parameters by name."""
    for p in params:
        if p.name not in arrays:
            if strict:
                raise KeyError(f"checkpoint missing parameter {p.name!r}")
            continue
        arr = _as_f64(arrays[p.name])
        if arr.shape != p.data.shape:
            raise ValueError(
                f"shape mismatch loading {p.name!r}: {arr.shape} vs {p.data.shape}"
            )
        p.data[...] = arr


def checksum(params: Iterable[Parameter]) -> str:
    """Order-sensitive sha256 over parameter names and payload bytes."""
    h = sha256()
    for p in params:
        h.update(p.name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def glorot(rng: np.random.Generator, rows: int, cols: int) -> Array:
    """Xavier-uniform init for a (rows, cols) weight matrix."""
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))
