"""Dense float64 tensors with a reverse-mode differentiation tape.

Everything trainable in this package funnels through ``forward_op``: it
dispatches on an op kind, checks shapes, verifies the output is finite,
and records a backward closure on the active :class:`Tape`. Op kinds are
kept deliberately small and auditable; broadcasting is restricted to
scalar-vs-tensor (plus a few named-axis ops like ``add_bias``) so that
every shape rule can be read off the registry.
"""

from __future__ import annotations

import ctypes
import struct

import numpy as np

# glibc hands multi-MB buffers straight back to the OS on free, so every
# convolution workspace re-faults its pages; raising the mmap threshold
# keeps them on the heap for reuse.
try:
    ctypes.CDLL("libc.so.6").mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
except OSError:  # non-glibc platforms
    pass

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "UnknownOpError",
    "Tensor",
    "Parameter",
    "Tape",
    "forward_op",
    "grad_check",
    "op_kinds",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]


class AutodiffError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(AutodiffError):
    """Input shapes violate the op's shape rule."""


class NonFiniteError(AutodiffError):
    """A forward op produced NaN or Inf."""


class UnknownOpError(AutodiffError):
    """Op kind is not in the registry."""


class Tensor:
    """Immutable dense array value. Ops never write into their inputs."""

    __slots__ = ("data", "requires_grad", "_param")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._param = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant Tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Parameter:
    """A named trainable tensor with an accumulating gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.value._param = self
        self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def reset_grad(self):
        self.grad[...] = 0.0

    def assign(self, data):
        """Replace the value in place (optimizer step); shape must match."""
        arr = np.asarray(data, dtype=np.float64)
        if arr.shape != self.value.shape:
            raise ShapeError(
                f"parameter {self.name}: assign shape {arr.shape} != {self.value.shape}"
            )
        self.value.data[...] = arr

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable ops.

    Used as a context manager; ops executed inside are recorded when any
    input requires gradients. ``backward`` replays the record once, in
    reverse, accumulating into every reachable Parameter's ``grad``.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self._nodes.append((out, inputs, backward_fn))
        self._out_ids.add(id(out))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every Parameter reachable from loss."""
        if loss.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._out_ids:
            raise AutodiffError("loss tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._param is not None:
                    inp._param.grad += gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Op registry. Each entry maps kind -> fn(arrays, attrs) -> (out, backward)
# where backward(g) returns one gradient array (or None) per input.
# ---------------------------------------------------------------------------

_OPS: dict[str, object] = {}


def _register(kind):
    def deco(fn):
        _OPS[kind] = fn
        return fn

    return deco


def op_kinds() -> list[str]:
    return sorted(_OPS)


def _binary_shapes(kind, a, b):
    if a.shape == b.shape:
        return
    if a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


def _reduce_to(g, shape):
    """Undo scalar broadcast: sum gradient down to the input's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else g


@_register("add")
def _op_add(arrs, attrs):
    a, b = arrs
    _binary_shapes("add", a, b)
    out = a + b
    return out, lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))


@_register("sub")
def _op_sub(arrs, attrs):
    a, b = arrs
    _binary_shapes("sub", a, b)
    out = a - b
    return out, lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))


@_register("mul")
def _op_mul(arrs, attrs):
    a, b = arrs
    _binary_shapes("mul", a, b)
    out = a * b
    return out, lambda g: (_reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape))


@_register("div")
def _op_div(arrs, attrs):
    a, b = arrs
    _binary_shapes("div", a, b)
    out = a / b
    return out, lambda g: (
        _reduce_to(g / b, a.shape),
        _reduce_to(-g * a / (b * b), b.shape),
    )


@_register("affine")
def _op_affine(arrs, attrs):
    (x,) = arrs
    k = float(attrs["scale"])
    c = float(attrs["shift"])
    return k * x + c, lambda g: (k * g,)


@_register("exp")
def _op_exp(arrs, attrs):
    (x,) = arrs
    out = np.exp(x)
    return out, lambda g: (g * out,)


@_register("log")
def _op_log(arrs, attrs):
    (x,) = arrs
    return np.log(x), lambda g: (g / x,)


@_register("sqrt")
def _op_sqrt(arrs, attrs):
    (x,) = arrs
    out = np.sqrt(x)
    return out, lambda g: (g * 0.5 / out,)


@_register("abs")
def _op_abs(arrs, attrs):
    (x,) = arrs
    return np.abs(x), lambda g: (g * np.sign(x),)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_register("silu")
def _op_silu(arrs, attrs):
    (x,) = arrs
    s = _stable_sigmoid(x)
    return x * s, lambda g: (g * (s * (1.0 + x * (1.0 - s))),)


@_register("sigmoid")
def _op_sigmoid(arrs, attrs):
    (x,) = arrs
    out = _stable_sigmoid(x)
    return out, lambda g: (g * out * (1.0 - out),)


@_register("clamp")
def _op_clamp(arrs, attrs):
    (x,) = arrs
    lo = attrs.get("lo")
    hi = attrs.get("hi")
    out = np.clip(x, lo, hi)
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return out, lambda g: (g * inside,)


@_register("matmul")
def _op_matmul(arrs, attrs):
    a, b = arrs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a @ b
    return out, lambda g: (g @ b.T, a.T @ g)


@_register("transpose")
def _op_transpose(arrs, attrs):
    (x,) = arrs
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2D, got {x.shape}")
    return x.T.copy(), lambda g: (g.T,)


@_register("reshape")
def _op_reshape(arrs, attrs):
    (x,) = arrs
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape), lambda g: (g.reshape(x.shape),)


@_register("select")
def _op_select(arrs, attrs):
    (x,) = arrs
    axis = int(attrs["axis"])
    index = int(attrs["index"])
    if not (0 <= index < x.shape[axis]):
        raise ShapeError(f"select: index {index} out of range for axis {axis} of {x.shape}")
    out = np.take(x, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return out.copy(), backward


@_register("concat")
def _op_concat(arrs, attrs):
    axis = int(attrs["axis"])
    base = list(arrs[0].shape)
    for a in arrs[1:]:
        other = list(a.shape)
        if len(other) != len(base):
            raise ShapeError("concat: rank mismatch")
        for ax, (i, j) in enumerate(zip(base, other)):
            if ax != axis and i != j:
                raise ShapeError(f"concat: non-axis extents differ on axis {ax}")
    out = np.concatenate(arrs, axis=axis)
    splits = np.cumsum([a.shape[axis] for a in arrs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


@_register("sum")
def _op_sum(arrs, attrs):
    (x,) = arrs
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    out = np.sum(x, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return out, backward


@_register("mean")
def _op_mean(arrs, attrs):
    (x,) = arrs
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    out = np.mean(x, axis=axis, keepdims=keepdims)
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy() / n,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy() / n,)

    return out, backward


@_register("softmax")
def _op_softmax(arrs, attrs):
    (x,) = arrs
    axis = int(attrs["axis"])
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return out, backward


@_register("layer_norm")
def _op_layer_norm(arrs, attrs):
    x, gain, bias = arrs
    eps = float(attrs.get("eps", 1e-5))
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain + bias

    def backward(g):
        gxhat = g * gain
        m1 = np.mean(gxhat, axis=-1, keepdims=True)
        m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        axes = tuple(range(x.ndim - 1))
        return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return out, backward


@_register("group_norm")
def _op_group_norm(arrs, attrs):
    x, gain, bias = arrs
    groups = int(attrs["groups"])
    eps = float(attrs.get("eps", 1e-5))
    c = x.shape[0]
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: gain/bias must have shape ({c},)")
    xg = x.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    cshape = (c,) + (1,) * (x.ndim - 1)
    out = xhat * gain.reshape(cshape) + bias.reshape(cshape)

    def backward(g):
        gxhat = (g * gain.reshape(cshape)).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        m1 = gxhat.mean(axis=1, keepdims=True)
        m2 = (gxhat * xh).mean(axis=1, keepdims=True)
        gx = (inv * (gxhat - m1 - xh * m2)).reshape(x.shape)
        axes = tuple(range(1, x.ndim))
        return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return out, backward


@_register("embed")
def _op_embed(arrs, attrs):
    (table,) = arrs
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed: table must be 2D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embed: token id out of vocabulary range")
    out = table[ids]

    def backward(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g)
        return (gt,)

    return out.copy(), backward


@_register("add_bias")
def _op_add_bias(arrs, attrs):
    x, b = arrs
    axis = int(attrs.get("axis", 0))
    if b.shape != (x.shape[axis],):
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    out = x + b.reshape(shape)
    other = tuple(i for i in range(x.ndim) if i != axis)
    return out, lambda g: (g, np.sum(g, axis=other))


@_register("class_mix")
def _op_class_mix(arrs, attrs):
    # out[j, v] = sum_c A[c, j, v] * f[c, v]; A is a constant mixing stack.
    (f,) = arrs
    a = np.asarray(attrs["matrix"], dtype=np.float64)
    if f.ndim != 2 or a.ndim != 3 or a.shape[0] != f.shape[0] or a.shape[2] != f.shape[1]:
        raise ShapeError(f"class_mix: matrix {a.shape} incompatible with field {f.shape}")
    out = np.einsum("cjv,cv->jv", a, f)
    return out, lambda g: (np.einsum("cjv,jv->cv", a, g),)


# --- Convolution and resampling -------------------------------------------


def _conv_out_len(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad, ndim):
    """x: [C, *spatial] -> cols [C * k^ndim, n_out_voxels].

    Window-major layout: each (channel, kernel-offset) plane is one strided
    block copy, which is what makes the f64 convolutions usable on CPU.
    """
    c = x.shape[0]
    pads = ((0, 0),) + ((pad, pad),) * ndim
    xp = np.pad(x, pads)
    out_spatial = tuple((s + 2 * pad - k) // stride + 1 for s in x.shape[1:])
    cols = np.empty((c,) + (k,) * ndim + out_spatial)
    for offs in np.ndindex(*(k,) * ndim):
        sl = (slice(None),) + tuple(
            slice(o, o + n * stride, stride) for o, n in zip(offs, out_spatial)
        )
        cols[(slice(None),) + offs] = xp[sl]
    return cols.reshape(c * k**ndim, -1), out_spatial


def _col2im(dcols, xshape, out_spatial, k, stride, pad, ndim):
    """Scatter-add column gradients ([C*k^ndim, V] layout) back to x's shape."""
    c = xshape[0]
    spatial = xshape[1:]
    padded = tuple(s + 2 * pad for s in spatial)
    dxp = np.zeros((c,) + padded)
    d6 = dcols.reshape((c,) + (k,) * ndim + out_spatial)
    for offs in np.ndindex(*(k,) * ndim):
        sl = (slice(None),) + tuple(
            slice(o, o + n * stride, stride) for o, n in zip(offs, out_spatial)
        )
        dxp[sl] += d6[(slice(None),) + offs]
    unpad = (slice(None),) + tuple(slice(pad, pad + s) for s in spatial)
    return dxp[unpad]


def _conv_nd(arrs, attrs, ndim):
    x, w, b = arrs
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("pad", (w.shape[2] - 1) // 2 if w.ndim > 2 else 0))
    if stride not in (1, 2):
        raise ShapeError(f"conv{ndim}d: stride must be 1 or 2, got {stride}")
    if x.ndim != ndim + 1 or w.ndim != ndim + 2:
        raise ShapeError(f"conv{ndim}d: expected x rank {ndim + 1} and w rank {ndim + 2}")
    c_out, c_in = w.shape[0], w.shape[1]
    k = w.shape[2]
    if any(s != k for s in w.shape[2:]):
        raise ShapeError(f"conv{ndim}d: kernel must be cubic, got {w.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv{ndim}d: input channels {x.shape[0]} != kernel {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv{ndim}d: bias must have shape ({c_out},)")
    out_spatial = tuple(_conv_out_len(n, k, stride, pad) for n in x.shape[1:])
    if any(n <= 0 for n in out_spatial):
        raise ShapeError(f"conv{ndim}d: output spatial {out_spatial} not positive")
    cols, out_sp = _im2col(x, k, stride, pad, ndim)
    wmat = w.reshape(c_out, -1)
    out = (wmat @ cols + b[:, None]).reshape((c_out,) + out_sp)

    def backward(g):
        gmat = g.reshape(c_out, -1)  # [C_out, V]
        gb = gmat.sum(axis=1)
        gw = (gmat @ cols.T).reshape(w.shape)
        dcols = wmat.T @ gmat
        gx = _col2im(dcols, x.shape, out_sp, k, stride, pad, ndim)
        return gx, gw, gb

    return out, backward


@_register("conv3d")
def _op_conv3d(arrs, attrs):
    return _conv_nd(arrs, attrs, 3)


@_register("conv2d")
def _op_conv2d(arrs, attrs):
    return _conv_nd(arrs, attrs, 2)


def _resample_axis_weights(n_in, n_out, mode):
    """Source indices and weights mapping an axis of length n_in to n_out."""
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if mode == "nearest":
        i0 = np.clip(np.rint(coords), 0, n_in - 1).astype(np.int64)
        return i0, i0, np.ones(n_out)
    coords = np.clip(coords, 0.0, n_in - 1)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = coords - i0
    return i0, i1, 1.0 - frac


@_register("resample3d")
def _op_resample3d(arrs, attrs):
    (x,) = arrs
    size = tuple(int(s) for s in attrs["size"])
    mode = attrs.get("mode", "trilinear")
    if x.ndim != 4:
        raise ShapeError(f"resample3d: expected [C,H,W,D], got {x.shape}")
    if len(size) != 3 or any(s < 1 for s in size):
        raise ShapeError(f"resample3d: bad target size {size}")
    if mode not in ("trilinear", "nearest"):
        raise ShapeError(f"resample3d: unknown mode {mode!r}")
    per_axis = [_resample_axis_weights(x.shape[1 + ax], size[ax], mode) for ax in range(3)]
    c = x.shape[0]
    n_in = x.shape[1] * x.shape[2] * x.shape[3]
    xf = x.reshape(c, n_in)
    out = np.zeros((c, size[0] * size[1] * size[2]))
    corners = []
    it = [(0, 0, 0)] if mode == "nearest" else list(np.ndindex(2, 2, 2))
    for corner in it:
        idx = []
        w_total = np.ones(size)
        for ax in range(3):
            i0, i1, w0 = per_axis[ax]
            idx.append(i0 if corner[ax] == 0 else i1)
            wax = w0 if corner[ax] == 0 else 1.0 - w0
            shape = [1, 1, 1]
            shape[ax] = size[ax]
            w_total = w_total * np.asarray(wax).reshape(shape)
        flat = (
            idx[0][:, None, None] * (x.shape[2] * x.shape[3])
            + idx[1][None, :, None] * x.shape[3]
            + idx[2][None, None, :]
        ).ravel()
        wflat = w_total.ravel()
        out += xf[:, flat] * wflat
        corners.append((flat, wflat))
    out = out.reshape((c,) + size)

    def backward(g):
        gf = g.reshape(c, -1)
        gx_flat = np.zeros((c, n_in))
        for flat, wflat in corners:
            contrib = gf * wflat
            for ch in range(c):
                gx_flat[ch] += np.bincount(flat, weights=contrib[ch], minlength=n_in)
        return (gx_flat.reshape(x.shape),)

    return out, backward


# ---------------------------------------------------------------------------
# Dispatch, functional helpers, gradient checking
# ---------------------------------------------------------------------------


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Execute one registered op, record it on the active tape if needed."""
    fn = _OPS.get(kind)
    if fn is None:
        raise UnknownOpError(f"unknown op kind {kind!r}")
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = tuple(t.data for t in tensors)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out_data, backward_fn = fn(arrays, attrs or {})
    # Fast finiteness screen: the sum is non-finite iff some element is
    # (finite overflow is impossible at this package's magnitudes, and the
    # elementwise check re-verifies before raising).
    if not np.isfinite(np.sum(out_data)) and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op {kind!r} produced non-finite values")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape._record(out, tensors, backward_fn)
    return out


def add(a, b):
    return forward_op("add", (a, b))


def sub(a, b):
    return forward_op("sub", (a, b))


def mul(a, b):
    return forward_op("mul", (a, b))


def div(a, b):
    return forward_op("div", (a, b))


def affine(x, scale, shift):
    return forward_op("affine", (x,), {"scale": scale, "shift": shift})


def exp(x):
    return forward_op("exp", (x,))


def log(x):
    return forward_op("log", (x,))


def sqrt(x):
    return forward_op("sqrt", (x,))


def abs_(x):
    return forward_op("abs", (x,))


def silu(x):
    return forward_op("silu", (x,))


def sigmoid(x):
    return forward_op("sigmoid", (x,))


def clamp(x, lo=None, hi=None):
    return forward_op("clamp", (x,), {"lo": lo, "hi": hi})


def matmul(a, b):
    return forward_op("matmul", (a, b))


def transpose(x):
    return forward_op("transpose", (x,))


def reshape(x, shape):
    return forward_op("reshape", (x,), {"shape": tuple(shape)})


def select(x, axis, index):
    return forward_op("select", (x,), {"axis": axis, "index": index})


def concat(xs, axis=0):
    return forward_op("concat", tuple(xs), {"axis": axis})


def sum_(x, axis=None, keepdims=False):
    return forward_op("sum", (x,), {"axis": axis, "keepdims": keepdims})


def mean_(x, axis=None, keepdims=False):
    return forward_op("mean", (x,), {"axis": axis, "keepdims": keepdims})


def softmax(x, axis):
    return forward_op("softmax", (x,), {"axis": axis})


def layer_norm(x, gain, bias, eps=1e-5):
    return forward_op("layer_norm", (x, gain, bias), {"eps": eps})


def group_norm(x, gain, bias, groups, eps=1e-5):
    return forward_op("group_norm", (x, gain, bias), {"groups": groups, "eps": eps})


def embed(table, ids):
    return forward_op("embed", (table,), {"ids": np.asarray(ids, dtype=np.int64)})


def add_bias(x, b, axis=0):
    return forward_op("add_bias", (x, b), {"axis": axis})


def class_mix(f, matrix):
    return forward_op("class_mix", (f,), {"matrix": matrix})


def conv3d(x, w, b, stride=1, pad=None):
    attrs = {"stride": stride}
    if pad is not None:
        attrs["pad"] = pad
    return forward_op("conv3d", (x, w, b), attrs)


def conv2d(x, w, b, stride=1, pad=None):
    attrs = {"stride": stride}
    if pad is not None:
        attrs["pad"] = pad
    return forward_op("conv2d", (x, w, b), attrs)


def resample3d(x, size, mode="trilinear"):
    return forward_op("resample3d", (x,), {"size": tuple(size), "mode": mode})


# --- grad check ------------------------------------------------------------

_POSITIVE_INPUT_KINDS = {"log", "sqrt"}


def _grad_check_inputs(kind, shapes, rng):
    arrays = []
    for i, shape in enumerate(shapes):
        a = rng.standard_normal(shape)
        if kind in _POSITIVE_INPUT_KINDS or (kind == "div" and i == 1):
            a = np.abs(a) + 0.5
        arrays.append(a)
    return arrays


def _complete_shapes(kind, shapes, attrs):
    """Fill in companion input shapes when only the primary shape is given."""
    shapes = [tuple(s) for s in shapes]
    if len(shapes) > 1:
        return shapes
    x = shapes[0]
    if kind == "layer_norm":
        return [x, (x[-1],), (x[-1],)]
    if kind == "group_norm":
        return [x, (x[0],), (x[0],)]
    if kind in ("conv3d", "conv2d"):
        nd = 3 if kind == "conv3d" else 2
        c_out = attrs.get("c_out", 2)
        k = attrs.get("k", 3)
        return [x, (c_out, x[0]) + (k,) * nd, (c_out,)]
    if kind == "add_bias":
        axis = int(attrs.get("axis", 0))
        return [x, (x[axis],)]
    if kind in ("add", "sub", "mul", "div"):
        return [x, x]
    if kind == "matmul":
        raise ShapeError("matmul grad_check needs both input shapes")
    return shapes


def grad_check(kind: str, shapes, seed: int = 0, attrs: dict | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    Error is max over elements of |analytic - numeric| / max(1e-8, |numeric|),
    with the numeric side from central differences at step 1e-5.
    """
    attrs = dict(attrs or {})
    rng = np.random.default_rng(seed)
    shapes = _complete_shapes(kind, shapes, attrs)
    for key in ("c_out", "k"):
        attrs.pop(key, None)
    if kind in ("conv3d", "conv2d") and "stride" not in attrs:
        attrs["stride"] = 1
    if kind == "softmax" and "axis" not in attrs:
        attrs["axis"] = len(shapes[0]) - 1
    if kind == "group_norm" and "groups" not in attrs:
        attrs["groups"] = 1
    if kind == "embed" and "ids" not in attrs:
        attrs["ids"] = rng.integers(0, shapes[0][0], size=3)
    if kind == "class_mix" and "matrix" not in attrs:
        attrs["matrix"] = rng.standard_normal((shapes[0][0], shapes[0][0], shapes[0][1]))
    if kind == "clamp" and "lo" not in attrs and "hi" not in attrs:
        attrs.update(lo=-0.7, hi=0.7)
    if kind == "reshape" and "shape" not in attrs:
        attrs["shape"] = (int(np.prod(shapes[0])),)
    if kind == "resample3d" and "size" not in attrs:
        attrs["size"] = tuple(2 * s for s in shapes[0][1:])
    if kind == "affine" and "scale" not in attrs:
        attrs.update(scale=1.7, shift=-0.3)
    if kind in ("select",) and "axis" not in attrs:
        attrs.update(axis=0, index=0)
    if kind == "concat" and "axis" not in attrs:
        attrs["axis"] = 0

    arrays = _grad_check_inputs(kind, shapes, rng)
    out_probe, _ = _OPS[kind](tuple(arrays), attrs)
    weight = rng.standard_normal(out_probe.shape)

    def scalar_loss(arrs):
        out, _ = _OPS[kind](tuple(arrs), attrs)
        return float(np.sum(out * weight))

    params = [Parameter(f"in{i}", a) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = forward_op(kind, [p.value for p in params], attrs)
        loss = sum_(mul(out, Tensor(weight)))
    tape.backward(loss)

    h = 1e-5
    worst = 0.0
    for i, p in enumerate(params):
        flat = arrays[i].reshape(-1)
        analytic = p.grad.reshape(-1)
        for e in range(flat.size):
            orig = flat[e]
            flat[e] = orig + h
            up = scalar_loss(arrays)
            flat[e] = orig - h
            dn = scalar_loss(arrays)
            flat[e] = orig
            numeric = (up - dn) / (2 * h)
            err = abs(analytic[e] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format: magic "GGCKPT1\n", u32 count, then per-parameter records
# of name length (u32 LE), UTF-8 name, rank (u32), extents (u32 each), raw
# little-endian f64 data. Metadata strings travel as "_meta." entries whose
# elements are character code points.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GGCKPT1\n"
_META_PREFIX = "_meta."


def save_checkpoint(path, params, meta: dict[str, str] | None = None):
    """Write named parameter values (and optional string metadata) to path."""
    if isinstance(params, dict):
        items = [(name, p.value.data if isinstance(p, Parameter) else np.asarray(p, dtype=np.float64))
                 for name, p in sorted(params.items())]
    else:
        items = [(p.name, p.value.data) for p in sorted(params, key=lambda p: p.name)]
    for key, text in sorted((meta or {}).items()):
        codes = np.array([float(ord(ch)) for ch in text], dtype=np.float64)
        items.append((_META_PREFIX + key, codes))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> float64 array, metadata dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        meta: dict[str, str] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            extents = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(extents)) if extents else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"truncated checkpoint while reading {name!r}")
            arr = np.frombuffer(buf, dtype="<f8").reshape(extents).astype(np.float64)
            if name.startswith(_META_PREFIX):
                meta[name[len(_META_PREFIX):]] = "".join(chr(int(v)) for v in arr.reshape(-1))
            else:
                arrays[name] = arr
    return arrays, meta
