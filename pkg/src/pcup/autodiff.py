"""Minimal reverse-mode automatic differentiation over dense 2D tensors.

Covers exactly what the upsampling network and the compound loss need:
matmul, row-wise bias, relu, column concat/slice, row reshaping, grouped
max pooling with argmax routing, row gathering, elementwise arithmetic,
and scalar reductions. Everything runs in double precision.

A :class:`Tape` records operations in creation order (which is a valid
topological order); :func:`backward` walks it in exact reverse. Tensors
built from plain arrays without a tape are constants and flow through the
same ops at zero recording cost, which keeps finite-difference reference
evaluations cheap.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Dense 2D value grid with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        if data.ndim != 2:
            raise ValueError(f"tensors are 2D, got shape {data.shape}")
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = -1
        self._tape = tape
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        if requires_grad:
            if tape is None:
                raise ValueError("gradient-tracked tensors must live on a tape")
            tape._register(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        tag = "leaf" if self.requires_grad and not self._parents else "node"
        return f"Tensor({self.rows}x{self.cols}, {tag}, id={self.node_id})"

    # elementwise / scalar arithmetic -------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return self * -1.0


class Tape:
    """Ordered op recording; recording order doubles as topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _register(self, t: Tensor) -> None:
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def leaf(self, data) -> Tensor:
        """A gradient-tracked input (copied so later mutation can't alias)."""
        return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, tape=self)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of everything reachable from a scalar loss.

        Grads are reset first; leaves left unreached end up with zero grad.
        """
        if loss._tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.data.shape != (1, 1):
            raise ValueError(f"backward needs a 1x1 loss, got {loss.data.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise ValueError("loss is constant; nothing to differentiate")
    loss._tape.backward(loss)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, tape=None)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full_like(like.data, float(arr))
    return constant(arr)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tracked = [p for p in parents if p.requires_grad]
    if not tracked:
        return constant(data)
    tape = tracked[0]._tape
    for p in tracked[1:]:
        if p._tape is not tape:
            raise ValueError("operands live on different tapes")
    out = Tensor(data, requires_grad=True, tape=tape)
    out._parents = tuple(parents)
    out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a contribution that may alias another buffer (copied on first use)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _accumulate_owned(t: Tensor, g: np.ndarray) -> None:
    """Add a freshly allocated contribution; ownership passes to the tensor."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_same_shape(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(out_data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_same_shape(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        _accumulate(a, g)
        _accumulate_owned(b, -g)

    return _result(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_same_shape(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        _accumulate_owned(a, g * b.data)
        _accumulate_owned(b, g * a.data)

    return _result(out_data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_same_shape(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        _accumulate_owned(a, g / b.data)
        _accumulate_owned(b, -g * a.data / (b.data * b.data))

    return _result(out_data, (a, b), bwd)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def bwd(g):
        _accumulate_owned(a, 2.0 * a.data * g)

    return _result(out_data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accumulate_owned(a, 0.5 / np.sqrt(a.data) * g)

    return _result(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def bwd(g):
        _accumulate_owned(a, g * mask)

    return _result(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate_owned(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate_owned(b, a.data.T @ g)

    return _result(out_data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor, relu_after: bool = False) -> Tensor:
    """Fused shared-MLP layer: matmul + row-wise bias + optional relu.

    Semantically identical to composing the three primitive ops; fused into
    one node so big intermediate activations and their grad buffers are not
    materialized per sub-op.
    """
    if x.cols != w.rows:
        raise ValueError(f"affine: inner dims differ, {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (1, w.cols):
        raise ValueError(f"affine: bias must be (1, {w.cols}), got {b.data.shape}")
    out_data = x.data @ w.data
    out_data += b.data
    mask = None
    if relu_after:
        mask = out_data > 0.0
        np.multiply(out_data, mask, out=out_data)

    def bwd(g):
        if mask is not None:
            g = g * mask
        if w.requires_grad:
            _accumulate_owned(w, x.data.T @ g)
        if b.requires_grad:
            _accumulate_owned(b, g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            _accumulate_owned(x, g @ w.data.T)

    return _result(out_data, (x, w, b), bwd)


def add_rowwise_bias(a: Tensor, bias: Tensor) -> Tensor:
    """a (n x d) + bias (1 x d), broadcast over rows."""
    if bias.data.shape != (1, a.cols):
        raise ValueError(f"bias must be (1, {a.cols}), got {bias.data.shape}")
    out_data = a.data + bias.data

    def bwd(g):
        _accumulate(a, g)
        _accumulate_owned(bias, g.sum(axis=0, keepdims=True))

    return _result(out_data, (a, bias), bwd)


def concat_cols(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ValueError("concat_cols needs at least two tensors")
    rows = tensors[0].rows
    for t in tensors:
        if t.rows != rows:
            raise ValueError("concat_cols: row counts differ")
    out_data = np.hstack([t.data for t in tensors])
    offsets = np.cumsum([0] + [t.cols for t in tensors])

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, lo:hi])

    return _result(out_data, tensors, bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise ValueError(f"slice_cols [{start}:{stop}] invalid for width {a.cols}")
    out_data = a.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate_owned(a, full)

    return _result(out_data, (a,), bwd)


def reshape_rows(a: Tensor, factor: int) -> Tensor:
    """n x d -> (n*factor) x (d/factor), contiguous feature chunks.

    Row r's chunks land on output rows r*factor .. r*factor+factor-1.
    """
    if factor < 1 or a.cols % factor != 0:
        raise ValueError(f"cannot split width {a.cols} by factor {factor}")
    out_data = a.data.reshape(a.rows * factor, a.cols // factor).copy()

    def bwd(g):
        _accumulate(a, g.reshape(a.rows, a.cols))

    return _result(out_data, (a,), bwd)


def merge_rows(a: Tensor, factor: int) -> Tensor:
    """Inverse of :func:`reshape_rows`: (n*factor) x d -> n x (d*factor)."""
    if factor < 1 or a.rows % factor != 0:
        raise ValueError(f"cannot merge {a.rows} rows by factor {factor}")
    out_data = a.data.reshape(a.rows // factor, a.cols * factor).copy()

    def bwd(g):
        _accumulate(a, g.reshape(a.rows, a.cols))

    return _result(out_data, (a,), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= a.rows):
        raise ValueError("gather_rows: index out of range")
    out_data = a.data[indices]

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, indices, g)

    return _result(out_data, (a,), bwd)


def max_over_groups(a: Tensor, groups) -> Tensor:
    """Column-wise max over each group of rows; grads route to the argmax
    row (first on ties).

    ``groups`` is a (G, S) index array (rectangular groups) or a sequence
    of 1D index arrays (ragged groups).
    """
    if isinstance(groups, np.ndarray) and groups.ndim == 2:
        members2d = np.asarray(groups, dtype=np.int64)
        if members2d.shape[0] == 0 or members2d.shape[1] == 0:
            raise ValueError("max_over_groups: empty groups")
        if members2d.min() < 0 or members2d.max() >= a.rows:
            raise ValueError("max_over_groups: group index out of range")
        block = a.data[members2d]  # (G, S, d)
        local = block.argmax(axis=1)  # first max wins within each group
        out_data = np.take_along_axis(block, local[:, None, :], axis=1)[:, 0, :]
        arg_rows = np.take_along_axis(members2d, local, axis=1)
        n_groups = members2d.shape[0]
    else:
        n_groups = len(groups)
        if n_groups == 0:
            raise ValueError("max_over_groups: no groups")
        out_data = np.empty((n_groups, a.cols))
        arg_rows = np.empty((n_groups, a.cols), dtype=np.int64)
        for gi, members in enumerate(groups):
            members = np.asarray(members, dtype=np.int64).reshape(-1)
            if members.size == 0:
                raise ValueError(f"max_over_groups: group {gi} is empty")
            if members.min() < 0 or members.max() >= a.rows:
                raise ValueError(f"max_over_groups: group {gi} index out of range")
            block = a.data[members]
            local = block.argmax(axis=0)  # first max wins
            arg_rows[gi] = members[local]
            out_data[gi] = block[local, np.arange(a.cols)]

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            cols = np.tile(np.arange(a.cols), n_groups)
            np.add.at(a.grad, (arg_rows.reshape(-1), cols), g.reshape(-1))

    return _result(out_data, (a,), bwd)


def row_sum(a: Tensor) -> Tensor:
    """Per-row sum over columns -> (n, 1)."""
    out_data = a.data.sum(axis=1, keepdims=True)

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _result(out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.array([[a.data.sum()]])

    def bwd(g):
        _accumulate_owned(a, np.full_like(a.data, g[0, 0]))

    return _result(out_data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    count = a.data.size
    out_data = np.array([[a.data.sum() / count]])

    def bwd(g):
        _accumulate_owned(a, np.full_like(a.data, g[0, 0] / count))

    return _result(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(
    f: Callable[..., Tensor],
    points: Sequence[np.ndarray] | np.ndarray,
    step: float = 1e-4,
    floor: float = 1e-6,
    coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative deviation between analytic and central-difference grads.

    ``f`` maps one tensor per entry of ``points`` to a scalar tensor and
    must be pure. Deviation per element is
    ``|analytic - central| / max(|analytic|, |central|, floor)``.
    With ``coords_per_tensor`` only that many randomly chosen coordinates
    of each input are probed (for large parameter tensors).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(points, np.ndarray)
    arrays = [np.asarray(points, dtype=np.float64)] if single else [
        np.asarray(p, dtype=np.float64) for p in points
    ]
    arrays = [a.reshape(1, 1) if a.ndim == 0 else a for a in arrays]

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = f(*leaves)
    if out.data.shape != (1, 1):
        raise ValueError("finite_difference_check needs a scalar-valued f")
    tape.backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def value_at(arrs) -> float:
        return f(*[constant(a) for a in arrs]).item()

    worst = 0.0
    for ti, base in enumerate(arrays):
        coords = [(r, c) for r in range(base.shape[0]) for c in range(base.shape[1])]
        if coords_per_tensor is not None and len(coords) > coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(len(coords), size=coords_per_tensor, replace=False)
            coords = [coords[i] for i in picks]
        for r, c in coords:
            bumped = [a.copy() for a in arrays]
            bumped[ti][r, c] += step
            f_plus = value_at(bumped)
            bumped[ti][r, c] -= 2.0 * step
            f_minus = value_at(bumped)
            central = (f_plus - f_minus) / (2.0 * step)
            a_val = analytic[ti][r, c]
            dev = abs(a_val - central) / max(abs(a_val), abs(central), floor)
            worst = max(worst, dev)
    return worst
