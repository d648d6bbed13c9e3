"""Dense NCHW tensors with a reverse-mode differentiation tape.

Only the handful of operations the OFF network needs are provided. Every
forward computation is carried out in float64 and the result is stored in
the dtype of the inputs (float32 unless a float64 tensor took part), so deep
stacks do not drift while the memory layout stays single precision.

Recording is explicit::

    with Tape() as tape:
        loss, _ = softmax_xent(linear(x, w, b), labels)
    tape.backward(loss)

Operations executed outside any ``Tape`` context are plain forward
computations.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import InvalidLabelError, InvalidShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "record_activation_pattern",
    "conv2d_fixed3x3",
    "conv1x1",
    "conv3x3",
    "relu",
    "maxpool2",
    "global_avg_pool",
    "concat_channels",
    "reshape",
    "add",
    "add_n",
    "sub",
    "scale",
    "tsum",
    "linear",
    "softmax_xent",
]

_ACTIVE_TAPES: list["Tape"] = []
# When not None, relu and maxpool2 append a fingerprint of their branch choice.
_PATTERN_LOG: list[bytes] | None = None


class Tensor:
    """A dense array plus an optional gradient buffer.

    Data is float32 unless a float64 ndarray (or ``dtype=np.float64``) is
    given; gradient checks run the whole graph in float64 this way.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 and isinstance(data, np.ndarray) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Operations are appended as they execute, so the log is topologically
    sorted by construction. A tape and its tensors belong to one thread.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

        Leaves are tensors not produced by an operation on this tape. Calling
        twice accumulates twice.
        """
        if loss.data.size != 1:
            raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(r.out) for r in self.records}
        if id(loss) not in produced and not loss.requires_grad:
            raise InvalidShapeError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced:
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.out), None)
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, tensor in leaves.items():
            g = grads[key].astype(tensor.dtype)
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


@contextmanager
def record_activation_pattern() -> Iterator[list[bytes]]:
    """Collect the branch choices (relu masks, pool argmaxes) of every forward op run inside."""
    global _PATTERN_LOG
    previous = _PATTERN_LOG
    log: list[bytes] = []
    _PATTERN_LOG = log
    try:
        yield log
    finally:
        _PATTERN_LOG = previous


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out_dtype = np.float64 if any(t.dtype == np.float64 for t in inputs) else np.float32
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data.astype(out_dtype, copy=False), requires_grad=needs_grad, dtype=out_dtype)
    if needs_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise InvalidShapeError(f"{op}: expected a rank-4 NCHW tensor, got shape {x.shape}")
    if x.data.size == 0:
        raise InvalidShapeError(f"{op}: empty tensor of shape {x.shape}")


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------


def conv2d_fixed3x3(x: Tensor, kernel) -> Tensor:
    """Depthwise 3x3 cross-correlation with a constant kernel, stride 1.

    Borders are extended by edge replication, so a constant map has exactly
    zero response everywhere. Only ``x`` receives gradient.
    """
    _check_rank4(x, "conv2d_fixed3x3")
    k = np.asarray(kernel, dtype=np.float64)
    if k.shape != (3, 3):
        raise InvalidShapeError(f"conv2d_fixed3x3: kernel must be 3x3, got {k.shape}")
    _, _, h, w = x.shape
    xp = np.pad(_f64(x), ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    taps = [(i, j, k[i, j]) for i in range(3) for j in range(3) if k[i, j] != 0.0]
    # positive and negative taps are summed separately, in matching order, so
    # that mirrored inputs cancel exactly instead of up to rounding
    pos = np.zeros(x.shape, dtype=np.float64)
    neg = np.zeros(x.shape, dtype=np.float64)
    for i, j, kij in taps:
        if kij > 0:
            pos += kij * xp[:, :, i : i + h, j : j + w]
        else:
            neg -= kij * xp[:, :, i : i + h, j : j + w]
    out = pos - neg

    def backward_fn(g):
        gp = np.zeros(xp.shape, dtype=np.float64)
        for i, j, kij in taps:
            gp[:, :, i : i + h, j : j + w] += kij * g
        # fold the replicated border back onto the edge pixels
        gp[:, :, 1, :] += gp[:, :, 0, :]
        gp[:, :, -2, :] += gp[:, :, -1, :]
        gp[:, :, :, 1] += gp[:, :, :, 0]
        gp[:, :, :, -2] += gp[:, :, :, -1]
        return (gp[:, :, 1:-1, 1:-1],)

    return _emit(out, (x,), backward_fn)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Per-pixel affine map across channels. ``stride=2`` keeps every other pixel (ceil)."""
    _check_rank4(x, "conv1x1")
    if stride not in (1, 2):
        raise InvalidShapeError(f"conv1x1: stride must be 1 or 2, got {stride}")
    cout, cin = weight.shape
    if x.shape[1] != cin or bias.shape != (cout,):
        raise InvalidShapeError(
            f"conv1x1: input has {x.shape[1]} channels, weight {weight.shape}, bias {bias.shape}"
        )
    xs = _f64(x)[:, :, ::stride, ::stride]
    w = _f64(weight)
    out = np.tensordot(w, xs, axes=([1], [1])).transpose(1, 0, 2, 3) + _f64(bias)[None, :, None, None]

    def backward_fn(g):
        gw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        gxs = np.tensordot(w, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        if stride == 1:
            gx = gxs
        else:
            gx = np.zeros(x.shape, dtype=np.float64)
            gx[:, :, ::stride, ::stride] = gxs
        return gx, gw, gb

    return _emit(np.ascontiguousarray(out), (x, weight, bias), backward_fn)


def _im2col3x3(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    """Columns of a padded NCHW array as [N, C*9, ho*wo], channel-major then tap."""
    n, c = xp.shape[:2]
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((n, c, 9, ho, wo), dtype=np.float64)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, :, k] = xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
    return cols.reshape(n, c * 9, ho * wo)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Multi-channel 3x3 cross-correlation, zero padding 1, stride 1 or 2 (ceil)."""
    _check_rank4(x, "conv3x3")
    if stride not in (1, 2):
        raise InvalidShapeError(f"conv3x3: stride must be 1 or 2, got {stride}")
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise InvalidShapeError(f"conv3x3: input has {c} channels, weight {weight.shape}")
    cout = weight.shape[0]
    if bias.shape != (cout,):
        raise InvalidShapeError(f"conv3x3: bias {bias.shape} does not match {cout} outputs")

    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(_f64(x), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3x3(xp, ho, wo, stride)
    wmat = _f64(weight).reshape(cout, c * 9)
    out = np.matmul(wmat, cols) + _f64(bias)[:, None]
    out = out.reshape(n, cout, ho, wo)

    def backward_fn(g):
        g3 = np.ascontiguousarray(g).reshape(n, cout, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g3.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T, g3).reshape(n, c, 9, ho, wo)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for k in range(9):
            i, j = divmod(k, 3)
            gxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += dcols[:, :, k]
        return gxp[:, :, 1:-1, 1:-1], gw, gb

    return _emit(out, (x, weight, bias), backward_fn)


# --------------------------------------------------------------------------
# nonlinearities and pooling
# --------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    if _PATTERN_LOG is not None:
        _PATTERN_LOG.append(np.packbits(mask).tobytes())
    out = np.where(mask, xd, 0).astype(np.float64)

    def backward_fn(g):
        return (g * mask,)

    return _emit(out, (x,), backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped.

    Ties send the gradient to the first maximum in row-major window order.
    """
    _check_rank4(x, "maxpool2")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise InvalidShapeError(f"maxpool2: needs H, W >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = (
        _f64(x)[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = blocks.argmax(axis=-1)
    if _PATTERN_LOG is not None:
        _PATTERN_LOG.append(idx.astype(np.uint8).tobytes())
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=np.float64)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[:, :, : 2 * h2, : 2 * w2] = (
            gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return (gx,)

    return _emit(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank4(x, "global_avg_pool")
    hw = x.shape[2] * x.shape[3]
    out = _f64(x).mean(axis=(2, 3), keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g / hw, x.shape),)

    return _emit(out, (x,), backward_fn)


# --------------------------------------------------------------------------
# structural and elementwise ops
# --------------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise InvalidShapeError("concat_channels: no parts given")
    for p in parts:
        _check_rank4(p, "concat_channels")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise InvalidShapeError(
                f"concat_channels: shape {p.shape} does not match {parts[0].shape} outside channels"
            )
    out = np.concatenate([_f64(p) for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(out, tuple(parts), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _f64(x).reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), backward_fn)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(_f64(a) + _f64(b), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(_f64(a) - _f64(b), (a, b), lambda g: (g, -g))


def add_n(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise InvalidShapeError("add_n: no parts given")
    for p in parts[1:]:
        _same_shape(parts[0], p, "add_n")
    out = np.zeros(parts[0].shape, dtype=np.float64)
    for p in parts:
        out += _f64(p)
    return _emit(out, tuple(parts), lambda g: (g,) * len(parts))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(_f64(x) * factor, (x,), lambda g: (g * factor,))


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    return _emit(np.asarray(_f64(x).sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, D] and weight [K, D]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise InvalidShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, w = _f64(x), _f64(weight)
    out = xd @ w.T + _f64(bias)

    def backward_fn(g):
        return g @ w, g.T @ xd, g.sum(axis=0)

    return _emit(out, (x, weight, bias), backward_fn)


def softmax_xent(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean softmax cross-entropy over the batch.

    Returns the scalar loss tensor and the [N, C] class probabilities.
    """
    if logits.data.ndim != 2:
        raise InvalidShapeError(f"softmax_xent: logits must be [N, C], got {logits.shape}")
    n, c = logits.shape
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise InvalidLabelError(f"softmax_xent: expected {n} integer labels, got {y!r}")
    if np.any(y < 0) or np.any(y >= c):
        raise InvalidLabelError(f"softmax_xent: labels must lie in [0, {c}), got {y.tolist()}")
    z = _f64(logits)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    probs = np.exp(log_probs)
    loss = -log_probs[np.arange(n), y].mean()

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (g / n),)

    return _emit(np.asarray(loss), (logits,), backward_fn), probs
