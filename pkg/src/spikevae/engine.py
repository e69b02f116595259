"""Reverse-mode automatic differentiation on float32 numpy arrays.

The design is a classic Wengert list. Every differentiable operation
appends one entry to the active :class:`Tape`; an entry holds the output
tensor, the input tensors, and a closure that maps the output gradient
to input gradients. Because entries are appended in execution order, the
list is already a topological order of the graph, and a backward pass is
a single reverse sweep. When a tensor feeds several consumers, each
consumer contributes its piece and the pieces are summed in place, which
is exactly the multivariate chain rule.

Only what this model family needs is implemented: dense and convolution
primitives, a few structural ops for laying time steps along the batch
axis, and a hard threshold whose backward is a rectangular surrogate.
Shapes are checked eagerly and broadcasting is deliberately absent from
the public ops; the few rules that need it do it explicitly inside their
closures.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, ValidationError

_ids = itertools.count()

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Array | None]]


class DiffTensor:
    """A float32 array plus a gradient slot.

    ``grad`` stays ``None`` until a backward pass deposits into it.
    Repeated backward passes without :func:`zero_grad` accumulate, which
    is occasionally useful and therefore allowed rather than guarded.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: Array) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            # Own a copy: g may be a view into a buffer shared with the
            # gradients of sibling tensors.
            self.grad = np.array(g, dtype=np.float32)
        else:
            self.grad += g.astype(np.float32, copy=False)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}{flag})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Execution-ordered record of differentiable operations."""

    def __init__(self):
        self._entries: list[tuple[DiffTensor, tuple[DiffTensor, ...], BackwardFn]] = []

    def record(self, out: DiffTensor, inputs: tuple[DiffTensor, ...], backward: BackwardFn) -> None:
        self._entries.append((out, inputs, backward))

    def reset(self) -> None:
        """Drop all entries, releasing the cached forward intermediates."""
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


_active_tape = Tape()
_recording = True


def active_tape() -> Tape:
    return _active_tape


def reset_tape() -> None:
    _active_tape.reset()


@contextmanager
def no_grad():
    """Run forward computations without recording them."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def backward(loss: DiffTensor) -> None:
    """Reverse sweep from a scalar loss over the active tape.

    The sweep runs in a private workspace seeded with a unit gradient
    and is folded into the persistent ``grad`` slots only at the end, so
    a repeated call accumulates exactly one more copy of the gradient
    instead of compounding whatever earlier sweeps left behind. Entries
    upstream of nothing relevant never enter the workspace and are
    skipped for free.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    work: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for out, inputs, fn in reversed(_active_tape._entries):
        slot = work.get(id(out))
        if slot is None:
            continue
        grads = fn(slot[1])
        if len(grads) != len(inputs):
            raise ContractError(
                f"backward rule returned {len(grads)} gradients for {len(inputs)} inputs"
            )
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match tensor shape {t.shape}")
            tslot = work.get(id(t))
            if tslot is None:
                # Own a copy: g may be a view into a buffer shared with
                # the gradients of sibling tensors.
                work[id(t)] = [t, np.array(g, dtype=np.float32)]
            else:
                tslot[1] += g.astype(np.float32, copy=False)
    for t, g in work.values():
        if t.grad is None:
            t.grad = g
        else:
            t.grad += g


def record_op(out_data: Array, inputs: Sequence[DiffTensor], backward_fn: BackwardFn) -> DiffTensor:
    """Wrap a forward result as a tensor and register its backward rule.

    The entry is only recorded when recording is on and at least one
    input wants gradients; otherwise the closure (and whatever forward
    state it captured) is dropped immediately.
    """
    out = DiffTensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _recording and out.requires_grad:
        _active_tape.record(out, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# leaves


def tensor(data, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad)


def param(data) -> DiffTensor:
    """A leaf that wants gradients (a trainable parameter)."""
    return DiffTensor(data, requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def _check_same_shape(a: DiffTensor, b: DiffTensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: DiffTensor) -> DiffTensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def smul(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return record_op(a.data * np.float32(c), (a,), lambda g: (g * np.float32(c),))


def sadd(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return record_op(a.data + np.float32(c), (a,), lambda g: (g,))


def sigmoid(a: DiffTensor) -> DiffTensor:
    x = a.data
    # Split by sign so exp never overflows in float32.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (a,), bwd)


def relu(a: DiffTensor) -> DiffTensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return record_op(np.where(mask, a.data, np.float32(0.0)), (a,), bwd)


def spike_threshold(m: DiffTensor, threshold: float, alpha: float) -> DiffTensor:
    """Hard threshold with a rectangular surrogate gradient.

    Forward emits 1 where ``m >= threshold``, else 0. The true
    derivative is zero almost everywhere, so backward substitutes a
    window of height ``1/alpha`` and width ``alpha`` centred on the
    threshold; its integral is 1, matching the unit jump it stands for.
    """
    if alpha <= 0:
        raise ValidationError(f"surrogate width alpha must be positive, got {alpha}")
    md = m.data
    out = (md >= np.float32(threshold)).astype(np.float32)

    def bwd(g):
        window = (np.abs(md - np.float32(threshold)) < np.float32(alpha / 2)).astype(np.float32)
        return (g * window * np.float32(1.0 / alpha),)

    return record_op(out, (m,), bwd)


# ---------------------------------------------------------------------------
# dense


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        da = g @ bd.T if a.requires_grad else None
        db = ad.T @ g if b.requires_grad else None
        return (da, db)

    return record_op(ad @ bd, (a, b), bwd)


def bias_add(x: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Add a per-channel bias: (n, d) + (d,) or (n, c, h, w) + (c,)."""
    if b.ndim != 1:
        raise ShapeError(f"bias must be 1-D, got {b.shape}")
    if x.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias_add: {x.shape} vs bias {b.shape}")
        out = x.data + b.data[None, :]
        axes = (0,)
    elif x.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias_add: {x.shape} vs bias {b.shape}")
        out = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"bias_add supports 2-D or 4-D inputs, got {x.shape}")

    def bwd(g):
        return (g, g.sum(axis=axes, dtype=np.float32))

    return record_op(out, (x, b), bwd)


# ---------------------------------------------------------------------------
# reductions and structure


def sum_all(a: DiffTensor) -> DiffTensor:
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).astype(np.float32),)

    return record_op(np.asarray(a.data.sum(dtype=np.float32)), (a,), bwd)


def mean_all(a: DiffTensor) -> DiffTensor:
    n = a.size
    if n == 0:
        raise ValidationError("mean_all of an empty tensor")
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g / np.float32(n), shape).astype(np.float32),)

    return record_op(np.asarray(a.data.mean(dtype=np.float32)), (a,), bwd)


def mean_axis(a: DiffTensor, axis: int) -> DiffTensor:
    n = a.shape[axis]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / np.float32(n), axis), a.shape).astype(np.float32),)

    return record_op(a.data.mean(axis=axis, dtype=np.float32), (a,), bwd)


def reshape(a: DiffTensor, shape) -> DiffTensor:
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return record_op(a.data.reshape(shape), (a,), bwd)


def concat0(parts: Sequence[DiffTensor]) -> DiffTensor:
    if not parts:
        raise ValidationError("concat0 of an empty sequence")
    sizes = [p.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return record_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def slice0(a: DiffTensor, start: int, stop: int) -> DiffTensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice0 [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float32)
        full[start:stop] = g
        return (full,)

    return record_op(a.data[start:stop].copy(), (a,), bwd)


def tile_time(x: DiffTensor, steps: int) -> DiffTensor:
    """Repeat a batch along axis 0, once per time step.

    Output row ``t*b + i`` is input row ``i``; backward sums the per-step
    blocks back onto the single copy.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    b = x.shape[0]

    def bwd(g):
        return (g.reshape((steps, b) + g.shape[1:]).sum(axis=0, dtype=np.float32),)

    return record_op(np.concatenate([x.data] * steps, axis=0), (x,), bwd)


def time_mean(x: DiffTensor, steps: int) -> DiffTensor:
    """Average the per-step blocks of a time-stacked batch."""
    n = x.shape[0]
    if steps < 1 or n % steps != 0:
        raise ShapeError(f"time_mean: axis 0 of {x.shape} is not divisible by steps={steps}")
    b = n // steps

    def bwd(g):
        scaled = g / np.float32(steps)
        return (np.broadcast_to(scaled, (steps,) + g.shape).reshape((n,) + g.shape[1:]).astype(np.float32),)

    return record_op(x.data.reshape((steps, b) + x.shape[1:]).mean(axis=0, dtype=np.float32), (x,), bwd)


def stack_time(z: DiffTensor) -> DiffTensor:
    """(b, d, T) -> (T*b, d): lay time steps out as consecutive batch blocks."""
    if z.ndim != 3:
        raise ShapeError(f"stack_time needs (batch, features, steps), got {z.shape}")
    b, d, steps = z.shape

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(steps, b, d).transpose(1, 2, 0)),)

    return record_op(np.ascontiguousarray(z.data.transpose(2, 0, 1).reshape(steps * b, d)), (z,), bwd)


def unstack_time(x: DiffTensor, steps: int) -> DiffTensor:
    """(T*b, d) -> (b, d, T): inverse of :func:`stack_time`."""
    if x.ndim != 2 or x.shape[0] % steps != 0:
        raise ShapeError(f"unstack_time: cannot split {x.shape} into {steps} step blocks")
    b = x.shape[0] // steps
    d = x.shape[1]

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(2, 0, 1).reshape(steps * b, d)),)

    return record_op(np.ascontiguousarray(x.data.reshape(steps, b, d).transpose(1, 2, 0)), (x,), bwd)


# ---------------------------------------------------------------------------
# convolution

# Correlation convention throughout (no kernel flip), as in the usual
# deep learning libraries. Kernels are (c_out, c_in, k, k).


def _im2col(xpad: Array, k: int, stride: int) -> tuple[Array, int, int]:
    """Patch matrix (n, c*k*k, oh*ow) plus (oh, ow).

    Built from k*k strided block copies instead of a window-view gather;
    the (c, k, k) layout lines up with kernel.reshape(c_out, -1) so the
    convolution itself is one batched matmul with no transposes.
    """
    n, c, hh, ww = xpad.shape
    oh = (hh - k) // stride + 1
    ow = (ww - k) // stride + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=np.float32)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xpad[:, :, u:u + (oh - 1) * stride + 1:stride,
                                    v:v + (ow - 1) * stride + 1:stride]
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def _pad_hw(x: Array, pad: int) -> Array:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_shapes(x: DiffTensor, kern: DiffTensor, stride: int, pad: int, opname: str):
    if x.ndim != 4 or kern.ndim != 4:
        raise ShapeError(f"{opname} needs 4-D input and kernel, got {x.shape} and {kern.shape}")
    if kern.shape[2] != kern.shape[3]:
        raise ShapeError(f"{opname} needs a square kernel, got {kern.shape}")
    if stride not in (1, 2):
        raise ValidationError(f"{opname}: stride must be 1 or 2, got {stride}")
    if pad not in (0, 1):
        raise ValidationError(f"{opname}: pad must be 0 or 1, got {pad}")


def conv2d(x: DiffTensor, kern: DiffTensor, stride: int = 1, pad: int = 0) -> DiffTensor:
    """2-D correlation of (n, c_in, h, w) with (c_out, c_in, k, k).

    Implemented as im2col followed by one matrix product, so the heavy
    lifting happens inside BLAS. Backward reuses the cached patch matrix
    for the kernel gradient and routes the input gradient through the
    transposed convolution below (they are adjoint by construction).
    """
    _conv_shapes(x, kern, stride, pad, "conv2d")
    n, c_in, h, w = x.shape
    c_out, kc, k, _ = kern.shape
    if kc != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kern.shape}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be {oh}x{ow} for input {x.shape}, kernel {kern.shape}")
    cols, oh, ow = _im2col(_pad_hw(x.data, pad), k, stride)
    kmat = kern.data.reshape(c_out, c_in * k * k)
    out = np.matmul(kmat, cols).reshape(n, c_out, oh, ow)

    def bwd(g):
        dk = None
        if kern.requires_grad:
            gflat = g.reshape(n, c_out, oh * ow)
            dk = np.tensordot(gflat, cols, axes=((0, 2), (0, 2))).reshape(kern.shape)
        dx = None
        if x.requires_grad:
            dx = _tconv_data(g, kern.data, stride, pad, (h, w))
        return (dx, dk)

    return record_op(out, (x, kern), bwd)


def _tconv_data(y: Array, kern: Array, stride: int, pad: int, out_hw: tuple[int, int]) -> Array:
    """Core of the transposed convolution on raw arrays.

    Zero-stuff the input by the stride, pad so that a stride-1
    correlation with the channel-swapped, spatially flipped kernel lands
    on ``out_hw``, and run the stride-1 correlation. This is exactly the
    adjoint of :func:`conv2d` with the same (stride, pad).
    """
    n, c_out, oh, ow = y.shape
    k = kern.shape[2]
    out_h, out_w = out_hw
    dil_h = stride * (oh - 1) + 1
    dil_w = stride * (ow - 1) + 1
    left = k - 1 - pad
    right_h = out_h + pad - dil_h
    right_w = out_w + pad - dil_w
    if left < 0 or right_h < 0 or right_w < 0:
        raise ShapeError(
            f"transposed conv cannot reach output {out_hw} from input {y.shape} "
            f"with stride={stride}, pad={pad}"
        )
    buf = np.zeros((n, c_out, left + dil_h + right_h, left + dil_w + right_w), dtype=np.float32)
    buf[:, :, left:left + dil_h:stride, left:left + dil_w:stride] = y
    kswap = np.ascontiguousarray(kern.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    c_in = kswap.shape[0]
    cols, rh, rw = _im2col(buf, k, 1)
    kmat = kswap.reshape(c_in, c_out * k * k)
    return np.matmul(kmat, cols).reshape(n, c_in, rh, rw)


def conv2d_transpose(
    x: DiffTensor,
    kern: DiffTensor,
    stride: int = 1,
    pad: int = 0,
    out_size: tuple[int, int] | None = None,
) -> DiffTensor:
    """Transposed 2-D convolution (the adjoint of :func:`conv2d`).

    Kernel layout matches conv2d: (c_out, c_in, k, k) where c_out is the
    channel count of ``x`` here. The default output size
    ``(h-1)*stride - 2*pad + k + (stride-1)`` doubles even sizes under
    the stride-2, pad-1, k=3 geometry this model uses; pass ``out_size``
    explicitly when the forward conv's floor division lost a remainder.
    """
    _conv_shapes(x, kern, stride, pad, "conv2d_transpose")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = kern.shape
    if c != c_out:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape} vs kernel {kern.shape}")
    if out_size is None:
        out_size = ((h - 1) * stride - 2 * pad + k + (stride - 1),
                    (w - 1) * stride - 2 * pad + k + (stride - 1))
    if out_size[0] < 1 or out_size[1] < 1:
        raise ShapeError(f"conv2d_transpose output size {out_size} is not positive")
    for L, dim in zip(out_size, (h, w)):
        if L + 2 * pad - k < 0 or (L + 2 * pad - k) // stride + 1 != dim:
            raise ShapeError(
                f"conv2d_transpose: out_size {out_size} is not an adjoint target for "
                f"input {x.shape} with stride={stride}, pad={pad}, kernel {k}x{k}"
            )
    out = _tconv_data(x.data, kern.data, stride, pad, out_size)

    def bwd(g):
        # Both pieces reuse the patch matrix of the padded output gradient:
        # dx is the forward conv applied to g, dK pairs g's patches with x.
        cols_g, _, _ = _im2col(_pad_hw(g, pad), k, stride)
        dx = None
        if x.requires_grad:
            kmat = kern.data.reshape(c_out, c_in * k * k)
            dx = np.matmul(kmat, cols_g).reshape(n, c_out, h, w)
        dk = None
        if kern.requires_grad:
            xflat = x.data.reshape(n, c_out, h * w)
            dk = np.tensordot(xflat, cols_g, axes=((0, 2), (0, 2))).reshape(kern.shape)
        return (dx, dk)

    return record_op(out, (x, kern), bwd)


def global_grad_norm(params: Sequence[DiffTensor]) -> float:
    """L2 norm over all populated gradients, in float64 for stability."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    return float(np.sqrt(total))
