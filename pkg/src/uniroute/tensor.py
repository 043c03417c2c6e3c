"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Rank-4 data uses the [batch, channels, height, width] layout. The op set is
exactly what the routing/fusion/distillation equations need: depthwise and
pointwise (and general strided) convolutions, broadcast elementwise
arithmetic, channel concat/slice, sigmoid/GELU and friends, horizontal flip,
axis reductions, and the segmentation losses. Every op records a node on the
active tape; `backward` runs one reverse sweep, accumulating gradients
additively across fan-out. A finite-difference `grad_check` is the oracle
every backward rule is validated against.

Convolution padding is always zero-padded "same" (output spatial size equals
ceil(input / stride)). Broadcasting is restricted to singleton extents (plus
scalars); anything richer raises ContractViolation.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

__all__ = [
    "ContractViolation", "Tensor", "Tape", "no_grad", "backward",
    "add", "sub", "mul", "div", "concat_channels", "slice_channels",
    "concat_batch", "slice_batch",
    "conv2d", "conv2d_depthwise", "conv2d_pointwise",
    "sigmoid", "gelu", "tanh", "log", "exp", "sqrt", "clamp_min",
    "softmax_channels", "flip_horizontal", "upsample_nearest2x",
    "avg_pool2d", "reshape", "take_row", "tsum", "tmean",
    "mse", "bce_with_logits", "dice_from_probs", "mean",
    "grad_check",
]


class ContractViolation(ValueError):
    """A documented precondition was broken by the caller."""


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule  # rule(upstream_grad) -> accumulates into inputs


_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED = True


class Tape:
    """Ordered operation record; insertion order is the topological order.

    One tape per training step: open it as a context manager around the
    forward pass, call `backward(loss)` inside, and let it drop.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.rule(g)


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _active_tape():
    if _GRAD_ENABLED and _TAPE_STACK:
        return _TAPE_STACK[-1]
    return None


def backward(loss: "Tensor"):
    """Reverse sweep over the innermost active tape."""
    if not _TAPE_STACK:
        raise ContractViolation("backward called with no active tape")
    _TAPE_STACK[-1].backward(loss)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

class Tensor:
    """A dense float64 array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no gradient lineage, nothing recorded."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def sigmoid(self):
        return sigmoid(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray):
    # grads are only ever rebound, never mutated in place, so aliasing the
    # upstream array is safe
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(inputs, out, rule))
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (singleton-extent broadcasting only)
# ---------------------------------------------------------------------------

def _check_broadcast(sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) != len(sb):
        raise ContractViolation(f"rank mismatch for broadcast: {sa} vs {sb}")
    for da, db in zip(sa, sb):
        if da != db and 1 not in (da, db):
            raise ContractViolation(f"non-broadcastable shapes: {sa} vs {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if shape == ():
        return g.sum()
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def rule(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def rule(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def rule(g):
        _accum(a, _unbroadcast(g * bd, a.shape))
        _accum(b, _unbroadcast(g * ad, b.shape))

    return _record(out, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data

    def rule(g):
        _accum(a, _unbroadcast(g / bd, a.shape))
        _accum(b, _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _record(out, (a, b), rule)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch form of the broadcast arithmetic ops."""
    try:
        return {"add": add, "sub": sub, "mul": mul}[op](a, b)
    except KeyError:
        raise ContractViolation(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# structure ops
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis of [B,C,H,W] tensors."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ContractViolation("concat_channels expects rank-4 tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractViolation(
            f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def rule(g):
        _accum(a, g[:, :c1])
        _accum(b, g[:, c1:])

    return _record(out, (a, b), rule)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 4:
        raise ContractViolation("slice_channels expects a rank-4 tensor")
    out = Tensor(x.data[:, lo:hi])

    def rule(g):
        z = np.zeros_like(x.data)
        z[:, lo:hi] = g
        _accum(x, z)

    return _record(out, (x,), rule)


def concat_batch(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the batch axis (shared-weight two-branch trick)."""
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[1:] != b.shape[1:]:
        raise ContractViolation(
            f"concat_batch shape mismatch: {a.shape} vs {b.shape}")
    n1 = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def rule(g):
        _accum(a, g[:n1])
        _accum(b, g[n1:])

    return _record(out, (a, b), rule)


def slice_batch(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 4:
        raise ContractViolation("slice_batch expects a rank-4 tensor")
    out = Tensor(x.data[lo:hi])

    def rule(g):
        z = np.zeros_like(x.data)
        z[lo:hi] = g
        _accum(x, z)

    return _record(out, (x,), rule)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def rule(g):
        _accum(x, g.reshape(x.data.shape))

    return _record(out, (x,), rule)


def take_row(table: Tensor, index: int) -> Tensor:
    """Row lookup into a 2-D table; backward scatters into that row."""
    if table.data.ndim != 2:
        raise ContractViolation("take_row expects a 2-D table")
    out = Tensor(table.data[index])

    def rule(g):
        z = np.zeros_like(table.data)
        z[index] = g
        _accum(table, z)

    return _record(out, (table,), rule)


def flip_horizontal(x: Tensor) -> Tensor:
    """Reverse the width axis; its own inverse, backward is itself a flip."""
    if x.data.ndim != 4:
        raise ContractViolation("flip_horizontal expects a rank-4 tensor")
    out = Tensor(x.data[:, :, :, ::-1])

    def rule(g):
        _accum(x, g[:, :, :, ::-1])

    return _record(out, (x,), rule)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ContractViolation("upsample_nearest2x expects a rank-4 tensor")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))
    b, c, h, w = x.shape

    def rule(g):
        _accum(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _record(out, (x,), rule)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial extents must divide."""
    if x.data.ndim != 4:
        raise ContractViolation("avg_pool2d expects a rank-4 tensor")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ContractViolation(f"spatial size {(h, w)} not divisible by {k}")
    out = Tensor(x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5)))

    def rule(g):
        gk = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _accum(x, gk)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# convolutions ("same" zero padding throughout)
# ---------------------------------------------------------------------------

def _col_view(xp: np.ndarray, k: int, dilation: int, stride: int,
              ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = xp.shape
    sb, sc, sh, sw = xp.strides
    shape = (b, c, k, k, ho, wo)
    strides = (sb, sc, sh * dilation, sw * dilation, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x if x.flags.c_contiguous else np.ascontiguousarray(x)
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    out[:, :, p:p + h, p:p + w] = x
    return out


def _tap(xp: np.ndarray, u: int, v: int, dilation: int, stride: int,
         ho: int, wo: int) -> np.ndarray:
    """The (u, v) kernel-tap window of a padded input, as a strided view."""
    return xp[:, :,
              u * dilation:u * dilation + (ho - 1) * stride + 1:stride,
              v * dilation:v * dilation + (wo - 1) * stride + 1:stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, dilation: int = 1) -> Tensor:
    """General 2-D convolution, x:[B,Cin,H,W] * w:[Cout,Cin,k,k].

    Odd square kernels only; zero "same" padding, so output spatial size is
    ceil(input/stride). Differentiable w.r.t. x, w and b.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractViolation("conv2d expects rank-4 input and weight")
    bn, ci, h, wd = x.shape
    co, ci_w, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ContractViolation(f"kernel must be odd square, got {k}x{k2}")
    if ci_w != ci:
        raise ContractViolation(
            f"weight expects {ci_w} input channels, tensor has {ci}")
    if b is not None and b.shape != (co,):
        raise ContractViolation(f"bias shape {b.shape} != ({co},)")

    p = dilation * (k - 1) // 2
    xp = _pad_hw(x.data, p)
    span = dilation * (k - 1) + 1
    ho = (h + 2 * p - span) // stride + 1
    wo = (wd + 2 * p - span) // stride + 1
    cols = _col_view(xp, k, dilation, stride, ho, wo).reshape(
        bn, ci * k * k, ho * wo)
    w2 = w.data.reshape(co, ci * k * k)
    out_data = np.matmul(w2, cols).reshape(bn, co, ho, wo)
    if b is not None:
        out_data = out_data + b.data[:, None, None]
    out = Tensor(out_data)
    inputs = (x, w) if b is None else (x, w, b)

    def rule(g):
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gm = g.reshape(bn, co, ho * wo)
        if w.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, dw.reshape(w.data.shape))
        if x.requires_grad:
            _accum(x, _conv2d_input_grad(g, gm, w.data, stride, dilation, p,
                                         (h, wd)))

    return _record(out, inputs, rule)


def _conv2d_input_grad(g: np.ndarray, gm: np.ndarray, w: np.ndarray,
                       stride: int, dilation: int, p: int, in_hw) -> np.ndarray:
    # one fat GEMM for every tap's contribution at once, then tap-wise
    # window scatter (per stride-phase canvas, so every write is contiguous
    # and each subgrid is stored exactly once)
    bn, co, ho, wo = g.shape
    ci, k = w.shape[1], w.shape[2]
    h, wd = in_hw
    gm_flat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
    dcols = np.matmul(w.reshape(co, ci * k * k).T, gm_flat) \
        .reshape(ci, k, k, bn, ho, wo)
    s = stride
    hp, wp = h + 2 * p, wd + 2 * p
    dxp = np.zeros((bn, ci, hp, wp))
    canvases = {}
    for u in range(k):
        for v in range(k):
            a, b_ph = (dilation * u) % s, (dilation * v) % s
            if (a, b_ph) not in canvases:
                ph_h = len(range(a, hp, s))
                ph_w = len(range(b_ph, wp, s))
                canvases[(a, b_ph)] = np.zeros((bn, ci, ph_h, ph_w))
            ou = (dilation * u - a) // s
            ov = (dilation * v - b_ph) // s
            canvases[(a, b_ph)][:, :, ou:ou + ho, ov:ov + wo] += \
                dcols[:, u, v].transpose(1, 0, 2, 3)
    if s == 1:
        dxp = canvases[(0, 0)]
    else:
        for (a, b_ph), canvas in canvases.items():
            dxp[:, :, a::s, b_ph::s] = canvas
    return dxp[:, :, p:p + h, p:p + wd] if p else dxp


def conv2d_depthwise(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel (depthwise) convolution, x:[B,C,H,W] * w:[C,1,k,k].

    Output channel c depends only on input channel c. Stride 1, "same"
    zero padding for any dilation.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[1] != 1:
        raise ContractViolation("conv2d_depthwise expects x:[B,C,H,W], w:[C,1,k,k]")
    bn, c, h, wd = x.shape
    cw, _, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ContractViolation(f"kernel must be odd square, got {k}x{k2}")
    if cw != c:
        raise ContractViolation(f"weight has {cw} channels, tensor has {c}")

    p = dilation * (k - 1) // 2
    xp = _pad_hw(x.data, p)
    wk = np.ascontiguousarray(w.data[:, 0])
    out = Tensor(_kernels.dw_forward(xp, wk, dilation, h, wd))

    def rule(g):
        g = np.ascontiguousarray(g)
        if w.requires_grad:
            _accum(w, _kernels.dw_wgrad(xp, g, dilation, k)[:, None])
        if x.requires_grad:
            dxp = _kernels.dw_xgrad(g, wk, dilation, h + 2 * p, wd + 2 * p)
            _accum(x, dxp[:, :, p:p + h, p:p + wd] if p else dxp)

    return _record(out, (x, w), rule)


def conv2d_pointwise(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution (per-pixel channel mixing), w:[Cout,Cin,1,1]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (1, 1):
        raise ContractViolation("conv2d_pointwise expects w:[Cout,Cin,1,1]")
    bn, ci, h, wd = x.shape
    co, ci_w = w.shape[:2]
    if ci_w != ci:
        raise ContractViolation(
            f"weight expects {ci_w} input channels, tensor has {ci}")
    if b is not None and b.shape != (co,):
        raise ContractViolation(f"bias shape {b.shape} != ({co},)")

    x2 = x.data.reshape(bn, ci, h * wd)
    w2 = w.data.reshape(co, ci)
    out_data = np.matmul(w2, x2).reshape(bn, co, h, wd)
    if b is not None:
        out_data = out_data + b.data[:, None, None]
    out = Tensor(out_data)
    inputs = (x, w) if b is None else (x, w, b)

    def rule(g):
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gm = g.reshape(bn, co, h * wd)
        if w.requires_grad:
            dw = np.matmul(gm, x2.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, dw.reshape(w.data.shape))
        if x.requires_grad:
            _accum(x, np.matmul(w2.T, gm).reshape(bn, ci, h, wd))

    return _record(out, inputs, rule)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; no overflow for any finite input."""
    xd = x.data
    z = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(s)

    def rule(g):
        _accum(x, g * s * (1.0 - s))

    return _record(out, (x,), rule)


_GELU_A = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    xd = np.ascontiguousarray(x.data)
    out_data, t = _kernels.gelu_forward(xd, _GELU_A, _GELU_A * _GELU_C)
    out = Tensor(out_data)

    def rule(g):
        _accum(x, _kernels.gelu_backward(xd, t, np.ascontiguousarray(g),
                                         _GELU_A, _GELU_A * _GELU_C))

    return _record(out, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def rule(g):
        _accum(x, g * (1.0 - t * t))

    return _record(out, (x,), rule)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def rule(g):
        _accum(x, g / x.data)

    return _record(out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)

    def rule(g):
        _accum(x, g * e)

    return _record(out, (x,), rule)


def sqrt(x: Tensor) -> Tensor:
    s = np.sqrt(x.data)
    out = Tensor(s)

    def rule(g):
        _accum(x, g * 0.5 / s)

    return _record(out, (x,), rule)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    mask = x.data > floor
    out = Tensor(np.where(mask, x.data, floor))

    def rule(g):
        _accum(x, g * mask)

    return _record(out, (x,), rule)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis of a [B,K,H,W] tensor."""
    if x.data.ndim != 4:
        raise ContractViolation("softmax_channels expects a rank-4 tensor")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.data.shape

    def rule(g):
        if axis is None:
            _accum(x, np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gk, shape))

    return _record(out, (x,), rule)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = 1
        for a in axes:
            n *= x.data.shape[a]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def mean(x: Tensor) -> Tensor:
    """Scalar mean over all elements."""
    return tmean(x)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; shapes must match."""
    if a.shape != b.shape:
        raise ContractViolation(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return tmean(mul(d, d))


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from logits, log-sum-exp-stable form.

    Gradients flow to the logits only; the target is treated as a constant
    label map in {0,1}.
    """
    target = _lift(target)
    if logits.shape != target.shape:
        raise ContractViolation(
            f"bce shape mismatch: {logits.shape} vs {target.shape}")
    xd, td = logits.data, target.data
    per = np.maximum(xd, 0.0) - xd * td + np.log1p(np.exp(-np.abs(xd)))
    out = Tensor(per.mean())
    n = xd.size

    def rule(g):
        z = np.exp(-np.abs(xd))
        s = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        _accum(logits, g * (s - td) / n)

    return _record(out, (logits,), rule)


def dice_from_probs(probs: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss 1 - (2*overlap + s)/(sum + s) over the whole batch."""
    target = _lift(target)
    if probs.shape != target.shape:
        raise ContractViolation(
            f"dice shape mismatch: {probs.shape} vs {target.shape}")
    inter = tsum(mul(probs, target))
    num = 2.0 * inter + smooth
    den = tsum(probs) + float(target.data.sum()) + smooth
    return 1.0 - num / den


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f, theta: Tensor, step: float = 1e-5, coords=None) -> float:
    """Max relative error between tape gradients and central differences.

    `f` is a nullary closure over `theta` returning a scalar Tensor; it is
    re-evaluated at theta +/- step*e_i per coordinate (all coordinates by
    default, or the index tuples in `coords`). Error metric per coordinate:
    |autodiff - central| / max(1, |central|).
    """
    theta.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    auto = theta.grad if theta.grad is not None else np.zeros_like(theta.data)

    if coords is None:
        coords = list(np.ndindex(theta.data.shape))
    worst = 0.0
    for idx in coords:
        orig = theta.data[idx]
        theta.data[idx] = orig + step
        f_plus = f().item()
        theta.data[idx] = orig - step
        f_minus = f().item()
        theta.data[idx] = orig
        central = (f_plus - f_minus) / (2.0 * step)
        err = abs(auto[idx] - central) / max(1.0, abs(central))
        if err > worst:
            worst = err
    return worst
