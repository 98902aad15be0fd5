"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by contiguous-ish numpy arrays of rank 0..4 (NCHW for
images) in float32 for training or float64 for gradient verification.  Only
the operators the segmentation pipeline needs exist; each op validates its
operands, checks its result for NaN/Inf, and registers a closure that routes
upstream gradient to its parents.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "DimensionError",
    "ConfigError",
    "no_grad",
    "conv2d",
    "linear",
    "global_pool",
    "concat",
    "split",
    "crop2d",
    "upsample_nearest2x",
    "upsample_bilinear",
    "bilinear_matrix",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NumericError(ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """An operation or module was configured inconsistently."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """Array of rank 0..4 plus an optional accumulated gradient buffer.

    ``grad`` is allocated lazily on the first backward pass that reaches the
    tensor and accumulates (+=) across passes until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            arr = data
        else:
            # python scalars/lists and non-float arrays default to float32
            arr = np.asarray(data, dtype=np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ConfigError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if arr.ndim > 4:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        if arr.size == 0:
            raise DimensionError("zero-size tensors are not supported")
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(self, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(self, other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        backward(self)


def _node(data, op: str, parents, backward_fn) -> Tensor:
    """Wrap an op result, attaching backprop metadata when tracking is on."""
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every reachable tensor."""
    if loss.data.size != 1:
        raise DimensionError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    # flow map keeps this traversal's gradient separate from .grad so that
    # repeated backward calls sum instead of re-applying stale values
    flows = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in flows:
                flows[pid] = flows[pid] + pg
            else:
                flows[pid] = pg


# elementwise -------------------------------------------------------------


def _coerce(ref: Tensor, other) -> Tensor:
    if isinstance(other, Tensor):
        if other.data.dtype != ref.data.dtype:
            raise ConfigError(
                f"mixed dtypes {ref.data.dtype} and {other.data.dtype}"
            )
        return other
    return Tensor(np.asarray(other, dtype=ref.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_data(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _broadcast_data(a, b, "add")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return [(a, _unbroadcast(g, ash)), (b, _unbroadcast(g, bsh))]

    with np.errstate(over="ignore"):
        return _node(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _broadcast_data(a, b, "sub")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return [(a, _unbroadcast(g, ash)), (b, _unbroadcast(-g, bsh))]

    return _node(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _broadcast_data(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return [(a, _unbroadcast(g * bd, a.shape)), (b, _unbroadcast(g * ad, b.shape))]

    with np.errstate(over="ignore"):
        return _node(ad * bd, "mul", (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _broadcast_data(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape)
        return [(a, ga), (b, gb)]

    return _node(out, "div", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, -g)]

    return _node(-a.data, "neg", (a,), bwd)


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise NumericError("exp overflowed to non-finite values")

    def bwd(g):
        return [(a, g * out)]

    return _node(out, "exp", (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return [(a, g / ad)]

    return _node(out, "log", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return [(a, g * mask)]

    return _node(np.maximum(a.data, 0), "relu", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        return [(a, g * out * (1.0 - out))]

    return _node(out, "sigmoid", (a,), bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def bwd(g):
        if axis is None:
            return [(a, np.broadcast_to(g, ash).copy() if g.ndim else np.full(ash, g, dtype=g.dtype))]
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(ash) for ax in axes)
            shp = tuple(1 if i in axes else s for i, s in enumerate(ash))
            g = g.reshape(shp)
        return [(a, np.broadcast_to(g, ash).copy())]

    return _node(np.asarray(data), "sum", (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    if len(shape) > 4:
        raise DimensionError(f"rank {len(shape)} exceeds the supported maximum of 4")
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    ash = a.shape

    def bwd(g):
        return [(a, g.reshape(ash))]

    return _node(data, "reshape", (a,), bwd)


# structured ops ----------------------------------------------------------


def _patches(a: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided (n, c, kh, kw, ho, wo) sliding-window view; no copy."""
    n, c, h, w = a.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = a.strides
    return np.lib.stride_tricks.as_strided(
        a,
        (n, c, kh, kw, ho, wo),
        (sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlate NCHW input with (c_out, c_in/groups, kh, kw) weights.

    Zero padding, positive stride, grouped channels; the backward pass for
    the input dilates the upstream gradient by the stride and runs a full
    correlation against spatially flipped kernels.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    cout, cpg, kh, kw = w.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigError("conv2d needs stride >= 1, padding >= 0, groups >= 1")
    if cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide c_in={cin} and c_out={cout}")
    if cpg != cin // groups:
        raise DimensionError(f"weight expects {cpg * groups} input channels, input has {cin}")
    if b is not None:
        if not isinstance(b, Tensor) or b.shape != (cout,):
            raise DimensionError(f"bias must have shape ({cout},)")
        if b.data.dtype != x.data.dtype:
            raise ConfigError("bias dtype differs from input dtype")
    if w.data.dtype != x.data.dtype:
        raise ConfigError("weight dtype differs from input dtype")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1 or kh > h + 2 * padding or kw > wid + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} with pad {padding} does not fit input {h}x{wid}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    pt = _patches(xp, kh, kw, stride)
    cig = cin // groups
    cog = cout // groups
    if groups == 1:
        y = np.tensordot(w.data, pt, axes=([1, 2, 3], [1, 2, 3]))
        y = y.transpose(1, 0, 2, 3)
    else:
        parts = []
        for gi in range(groups):
            wg = w.data[gi * cog:(gi + 1) * cog]
            pg = pt[:, gi * cig:(gi + 1) * cig]
            parts.append(np.tensordot(wg, pg, axes=([1, 2, 3], [1, 2, 3])))
        y = np.concatenate(parts, axis=0).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.data.reshape(1, cout, 1, 1)

    def bwd(g):
        g = np.ascontiguousarray(g)
        grads = []
        if groups == 1:
            dw = np.tensordot(g, pt, axes=([0, 2, 3], [0, 4, 5]))
        else:
            dws = []
            for gi in range(groups):
                gg = g[:, gi * cog:(gi + 1) * cog]
                pg = pt[:, gi * cig:(gi + 1) * cig]
                dws.append(np.tensordot(gg, pg, axes=([0, 2, 3], [0, 4, 5])))
            dw = np.concatenate(dws, axis=0)
        grads.append((w, dw))
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        grads.append((x, _conv_input_grad(g, w.data, stride, padding, h, wid, groups)))
        return grads

    return _node(y, "conv2d", (x, w) if b is None else (x, w, b), bwd)


def _conv_input_grad(g, wdata, stride, padding, h, wid, groups):
    n, cout = g.shape[:2]
    cpg, kh, kw = wdata.shape[1:]
    cin = cpg * groups
    ho, wo = g.shape[2:]
    hd = (ho - 1) * stride + 1
    wd = (wo - 1) * stride + 1
    if stride > 1:
        gd = np.zeros((n, cout, hd, wd), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    pt = _patches(gp, kh, kw, 1)
    wf = wdata[:, :, ::-1, ::-1]
    cog = cout // groups
    if groups == 1:
        core = np.tensordot(pt, wf, axes=([1, 2, 3], [0, 2, 3]))
        core = core.transpose(0, 3, 1, 2)
    else:
        parts = []
        for gi in range(groups):
            pg = pt[:, gi * cog:(gi + 1) * cog]
            wg = wf[gi * cog:(gi + 1) * cog]
            parts.append(np.tensordot(pg, wg, axes=([1, 2, 3], [0, 2, 3])))
        core = np.concatenate(parts, axis=3).transpose(0, 3, 1, 2)
    # with flooring remainder the last rows/cols of the padded input never
    # touched an output and keep zero gradient
    dxp = np.zeros((n, cin, h + 2 * padding, wid + 2 * padding), dtype=g.dtype)
    dxp[:, :, :core.shape[2], :core.shape[3]] = core
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + wid]
    return dxp


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (n, d_in) @ w (d_out, d_in).T + b (d_out,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"linear expects 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[1]} != weight width {w.shape[1]}")
    if w.data.dtype != x.data.dtype:
        raise ConfigError("weight dtype differs from input dtype")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"bias must have shape ({w.shape[0]},)")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def bwd(g):
        grads = [(x, g @ w.data), (w, g.T @ x.data)]
        if b is not None:
            grads.append((b, g.sum(axis=0)))
        return grads

    return _node(y, "linear", (x, w) if b is None else (x, w, b), bwd)


def global_pool(x: Tensor, mode: str) -> Tensor:
    """Pool each channel plane of an NCHW tensor to 1x1 (max routes the
    gradient to the first maximum in row-major order)."""
    if x.ndim != 4:
        raise DimensionError(f"global_pool expects a 4-D tensor, got {x.shape}")
    n, c, h, w = x.shape
    if mode == "avg":
        data = x.data.mean(axis=(2, 3), keepdims=True)
        inv = 1.0 / (h * w)

        def bwd(g):
            return [(x, np.broadcast_to(g * inv, x.shape).copy())]

        return _node(data, "global_pool", (x,), bwd)
    if mode == "max":
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        data = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)

        def bwd(g):
            dx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(dx, idx[:, :, None], g.reshape(n, c, 1), axis=2)
            return [(x, dx.reshape(x.shape))]

        return _node(data, "global_pool", (x,), bwd)
    raise ConfigError(f"unknown pool mode {mode!r}; use 'max' or 'avg'")


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along one axis; all other extents must match exactly."""
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat needs at least one tensor")
    nd = tensors[0].ndim
    axis = axis % nd
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != nd:
            raise DimensionError("concat: mixed ranks")
        if t.data.dtype != ref.data.dtype:
            raise ConfigError("concat: mixed dtypes")
        for ax in range(nd):
            if ax != axis and t.shape[ax] != ref.shape[ax]:
                raise DimensionError(
                    f"concat: extent mismatch on axis {ax}: {t.shape} vs {ref.shape}")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        out = []
        ofs = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * nd
            sl[axis] = slice(ofs, ofs + s)
            out.append((t, g[tuple(sl)]))
            ofs += s
        return out

    return _node(data, "concat", tuple(tensors), bwd)


def split(x: Tensor, sizes, axis: int) -> list:
    """Slice a tensor into consecutive chunks whose sizes sum to the extent."""
    sizes = [int(s) for s in sizes]
    axis = axis % x.ndim
    if any(s < 1 for s in sizes):
        raise ConfigError("split sizes must be positive")
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(
            f"split sizes {sizes} do not sum to extent {x.shape[axis]}")
    outs = []
    ofs = 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(ofs, ofs + s)
        sl = tuple(sl)

        def bwd(g, _sl=sl):
            dx = np.zeros(x.shape, dtype=g.dtype)
            dx[_sl] = g
            return [(x, dx)]

        outs.append(_node(x.data[sl], "split", (x,), bwd))
        ofs += s
    return outs


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window of an NCHW tensor."""
    if x.ndim != 4:
        raise DimensionError("crop2d expects a 4-D tensor")
    if h < 1 or w < 1 or h > x.shape[2] or w > x.shape[3]:
        raise DimensionError(f"cannot crop {x.shape} to {h}x{w}")
    if (h, w) == x.shape[2:]:
        return x

    def bwd(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, :h, :w] = g
        return [(x, dx)]

    return _node(x.data[:, :, :h, :w], "crop2d", (x,), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Duplicate each pixel of an NCHW tensor into a 2x2 block."""
    if x.ndim != 4:
        raise DimensionError("upsample_nearest2x expects a 4-D tensor")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return [(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))]

    return _node(data, "upsample_nearest2x", (x,), bwd)


_INTERP_CACHE: dict = {}


def bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-interpolation matrix M (n_out x n_in) for half-pixel-centre
    bilinear resampling with edge clamping; resize = M @ plane @ M_cols.T."""
    key = (n_out, n_in, np.dtype(dtype).str)
    got = _INTERP_CACHE.get(key)
    if got is not None:
        return got
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.clip(np.floor(src).astype(np.int64), 0, max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    m = m.astype(dtype)
    _INTERP_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor (half-pixel centres, clamped edges).

    A same-size request is an exact no-op returning the input tensor.
    """
    if x.ndim != 4:
        raise DimensionError("upsample_bilinear expects a 4-D tensor")
    if out_h < 1 or out_w < 1:
        raise DimensionError("output extents must be positive")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    mr = bilinear_matrix(out_h, h, x.data.dtype)
    mc = bilinear_matrix(out_w, w, x.data.dtype)
    tmp = np.tensordot(mr, x.data, axes=([1], [2])).transpose(1, 2, 0, 3)
    data = np.tensordot(tmp, mc, axes=([3], [1]))

    def bwd(g):
        t = np.tensordot(mr.T, g, axes=([1], [2])).transpose(1, 2, 0, 3)
        return [(x, np.tensordot(t, mc.T, axes=([3], [1])))]

    return _node(data, "upsample_bilinear", (x,), bwd)
