"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays; a Tape records applied ops so backward() can
replay them in reverse. Every VJP is itself written in terms of taped ops,
so running backward with build_graph=True records the gradient computation
onto the same tape and a second backward over the extended tape yields
second-order gradients (needed for the R1 penalty). Ops whose VJP cannot be
expressed through taped ops are rejected in build_graph mode.

Float32 is the training dtype; verification code passes float64 arrays and
every op preserves the input dtype.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """An op produced NaN or +-Inf."""


class ShapeError(ValueError):
    """Input shapes violate an op's contract."""


class SecondOrderError(RuntimeError):
    """An op on the differentiated path does not support build_graph mode."""


# --------------------------------------------------------------------------
# tensor and tape

class Tensor:
    """Immutable dense array value, optionally attached to a tape node.

    Ops never mutate tensor data. The optimizer rebinds .data between tapes,
    which is the one sanctioned mutation point (no tape is alive then).
    """

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node=None):
        self.data = data
        self.node = node  # (tape, index) or None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, None)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = "attached" if self.node is not None else "detached"
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, {tag})"

    # arithmetic sugar; everything routes through apply()
    def __add__(self, other):
        return apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return apply("mul", self, -1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __getitem__(self, key):
        return apply("slice", self, key=_normalize_key(key, self.shape))

    def sum(self, axis=None, keepdims: bool = False):
        return apply("sum", self, axis=_normalize_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply("mean", self, axis=_normalize_axis(axis, self.ndim), keepdims=keepdims)

    def square(self):
        return apply("square", self)

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def tanh(self):
        return apply("tanh", self)

    def sigmoid(self):
        return apply("sigmoid", self)

    def softplus(self):
        return apply("softplus", self)

    def leaky_relu(self, alpha: float = 0.2):
        return apply("leaky_relu", self, alpha=alpha)

    def reciprocal(self):
        return apply("reciprocal", self)

    def reshape(self, shape):
        return apply("reshape", self, shape=tuple(shape))

    def broadcast(self, shape):
        return apply("broadcast", self, shape=tuple(shape))

    def transpose(self, axes):
        return apply("transpose", self, axes=tuple(axes))

    def flip(self, axis: int):
        return apply("flip", self, axis=int(axis))

    def cumsum(self, axis: int, reverse: bool = False):
        return apply("cumsum", self, axis=int(axis), reverse=bool(reverse))

    def pad2d(self, ph: int, pw: int):
        return apply("pad", self, widths=((0, 0), (0, 0), (ph, ph), (pw, pw)))


def tensor(value, dtype=None) -> Tensor:
    """Public constructor: wraps value as a detached constant tensor.

    Non-float inputs are converted to the default training dtype.
    """
    data = np.asarray(value, dtype=dtype)
    if data.dtype.kind != "f":
        data = data.astype(DEFAULT_DTYPE)
    if not _all_finite(data):
        raise NonFiniteError("tensor() input contains NaN or Inf")
    return Tensor(data)


class Node:
    __slots__ = ("op", "spec", "indices", "tensors", "out", "attrs")

    def __init__(self, op, spec, indices, tensors, out, attrs):
        self.op = op
        self.spec = spec  # None for leaves
        self.indices = indices
        self.tensors = tensors
        self.out = out
        self.attrs = attrs


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Single-owner op recorder. Use as a context manager.

    Entering pushes the tape as the active recorder; exiting detaches all
    tensors it produced so parameters can move to a fresh tape next step.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = True

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        self.close()
        return False

    def close(self):
        for node in self.nodes:
            node.out.node = None
        self.nodes.clear()

    def watch(self, t: Tensor) -> int:
        """Attach t as a leaf so it can receive gradients."""
        nd = t.node
        if nd is not None and nd[0] is self:
            return nd[1]
        if not _all_finite(t.data):
            raise NonFiniteError("watched tensor contains NaN or Inf")
        idx = len(self.nodes)
        self.nodes.append(Node(None, None, (), (), t, None))
        t.node = (self, idx)
        return idx

    def record(self, op, spec, tensors, out, attrs):
        indices = tuple(self.watch(t) for t in tensors)
        idx = len(self.nodes)
        self.nodes.append(Node(op, spec, indices, tensors, out, attrs))
        out.node = (self, idx)

    @contextmanager
    def stop_recording(self):
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def paused():
    """Temporarily stop recording on the active tape (no-op without one)."""
    t = current_tape()
    if t is None:
        yield
        return
    with t.stop_recording():
        yield


# --------------------------------------------------------------------------
# op registry

class OpSpec:
    __slots__ = ("name", "fwd", "vjp", "closed", "preserves_finite")

    def __init__(self, name, fwd, vjp, closed=True, preserves_finite=False):
        self.name = name
        self.fwd = fwd
        self.vjp = vjp
        # closed: VJP expressed in taped ops, safe under build_graph
        self.closed = closed
        # preserves_finite: output values are a subset/rearrangement of
        # input values (plus zeros), so the finite check can be skipped
        self.preserves_finite = preserves_finite


_OPS: dict[str, OpSpec] = {}


def _all_finite(data: np.ndarray) -> bool:
    # dtype-native sum is the cheap path; NaN/Inf propagate into it. A
    # non-finite sum can also come from benign float32 overflow, so confirm
    # with the exact check before declaring failure.
    s = data.sum()
    if math.isfinite(float(s)):
        return True
    return bool(np.isfinite(data).all())


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Evaluate a registered op and record it on the active tape.

    The result is attached when any input is attached to the active tape;
    otherwise the computation is eager and detached.
    """
    spec = _OPS.get(op_kind)
    if spec is None:
        raise ValueError(f"unknown op kind: {op_kind!r}")
    tape = current_tape()
    tensors = []
    ref_dtype = None
    for x in inputs:
        if isinstance(x, Tensor):
            if ref_dtype is None:
                ref_dtype = x.data.dtype
            tensors.append(x)
        else:
            tensors.append(x)  # placeholder, wrapped below
    if ref_dtype is None:
        ref_dtype = np.dtype(DEFAULT_DTYPE)
    for i, x in enumerate(tensors):
        if not isinstance(x, Tensor):
            arr = np.asarray(x, dtype=ref_dtype)
            if not _all_finite(arr):
                raise NonFiniteError(f"{op_kind}: constant input contains NaN or Inf")
            tensors[i] = Tensor(arr)
    out_data = spec.fwd(*[t.data for t in tensors], **attrs)
    if not spec.preserves_finite and not _all_finite(out_data):
        raise NonFiniteError(f"op {op_kind!r} produced non-finite values")
    out = Tensor(out_data)
    if tape is not None and tape.recording:
        for t in tensors:
            nd = t.node
            if nd is not None and nd[0] is tape:
                tape.record(op_kind, spec, tuple(tensors), out, attrs)
                break
    return out


def backward(loss: Tensor, wrt: Sequence[Tensor], build_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar loss for each tensor in wrt.

    With build_graph=True the VJP ops are recorded on the same tape, so the
    returned gradients are attached and can be differentiated again. Each
    tape node is visited at most once; nodes off the wrt->loss path are
    skipped entirely.
    """
    if loss.node is None:
        raise ValueError("loss is not attached to a tape")
    if loss.data.size != 1:
        raise ValueError("loss must be scalar")
    tape, loss_idx = loss.node
    if current_tape() is not tape:
        raise RuntimeError("backward must run while the loss's tape is active")
    nodes = tape.nodes

    wrt_idx = []
    for p in wrt:
        nd = p.node
        wrt_idx.append(nd[1] if (nd is not None and nd[0] is tape) else -1)

    n = loss_idx + 1
    reach_loss = np.zeros(n, dtype=bool)
    reach_loss[loss_idx] = True
    for i in range(loss_idx, -1, -1):
        if reach_loss[i]:
            for j in nodes[i].indices:
                reach_loss[j] = True
    from_wrt = np.zeros(n, dtype=bool)
    for j in wrt_idx:
        if 0 <= j < n:
            from_wrt[j] = True
    for i in range(n):
        if not from_wrt[i]:
            for j in nodes[i].indices:
                if from_wrt[j]:
                    from_wrt[i] = True
                    break
    needed = reach_loss & from_wrt
    keep = {j for j in wrt_idx if j >= 0}

    grads: dict[int, Tensor] = {}
    if needed[loss_idx]:
        grads[loss_idx] = Tensor(np.ones_like(loss.data))

    prev = tape.recording
    tape.recording = bool(build_graph)
    try:
        for i in range(loss_idx, -1, -1):
            if not needed[i]:
                continue
            node = nodes[i]
            if node.spec is None:
                continue  # leaf: grad stays for collection
            g = grads.get(i)
            if i not in keep:
                grads.pop(i, None)
            if g is None:
                continue
            if build_graph and not node.spec.closed:
                raise SecondOrderError(
                    f"op {node.op!r} does not support build_graph mode")
            need = tuple(bool(needed[j]) for j in node.indices)
            partials = node.spec.vjp(node, g, need)
            for j, gj in zip(node.indices, partials):
                if gj is None or not needed[j]:
                    continue
                prior = grads.get(j)
                grads[j] = gj if prior is None else apply("add", prior, gj)
    finally:
        tape.recording = prev

    out = []
    for p, j in zip(wrt, wrt_idx):
        g = grads.get(j) if j >= 0 else None
        out.append(g if g is not None else Tensor(np.zeros_like(p.data)))
    return out


# --------------------------------------------------------------------------
# shape helpers

def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _normalize_key(key, shape):
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise ShapeError("too many indices")
    out = []
    for ax, k in enumerate(key):
        dim = shape[ax]
        if isinstance(k, int):
            if not -dim <= k < dim:
                raise ShapeError(f"index {k} out of range for axis {ax} of size {dim}")
            out.append(("index", k % dim))
        elif isinstance(k, slice):
            out.append(("slice", k.start, k.stop, k.step))
        else:
            raise ShapeError(f"unsupported index element: {k!r}")
    for ax in range(len(key), len(shape)):
        out.append(("slice", None, None, None))
    return tuple(out)


def _build_key(norm_key):
    parts = []
    for item in norm_key:
        if item[0] == "index":
            parts.append(item[1])
        else:
            parts.append(slice(item[1], item[2], item[3]))
    return tuple(parts)


def _binary_shape(sa, sb, op):
    if sa == sb:
        return
    if len(sa) == 0 or len(sb) == 0:
        return
    if len(sa) == len(sb) and all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb)):
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible "
                     "(equal rank with size-1 axes, or a scalar, required)")


def _unbroadcast(g: Tensor, target_shape) -> Tensor:
    if tuple(g.shape) == tuple(target_shape):
        return g
    if len(target_shape) == 0:
        return g.sum()
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, target_shape))
                 if ts == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# --------------------------------------------------------------------------
# elementwise and linear ops

def _same_dtype(a, b, op):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _fwd_add(a, b):
    _same_dtype(a, b, "add")
    _binary_shape(a.shape, b.shape, "add")
    return a + b


def _vjp_add(node, g, need):
    a, b = node.tensors
    ga = _unbroadcast(g, a.shape) if need[0] else None
    gb = _unbroadcast(g, b.shape) if need[1] else None
    return ga, gb


def _fwd_sub(a, b):
    _same_dtype(a, b, "sub")
    _binary_shape(a.shape, b.shape, "sub")
    return a - b


def _vjp_sub(node, g, need):
    a, b = node.tensors
    ga = _unbroadcast(g, a.shape) if need[0] else None
    gb = _unbroadcast(apply("mul", g, -1.0), b.shape) if need[1] else None
    return ga, gb


def _fwd_mul(a, b):
    _same_dtype(a, b, "mul")
    _binary_shape(a.shape, b.shape, "mul")
    return a * b


def _vjp_mul(node, g, need):
    a, b = node.tensors
    ga = _unbroadcast(apply("mul", g, b), a.shape) if need[0] else None
    gb = _unbroadcast(apply("mul", g, a), b.shape) if need[1] else None
    return ga, gb


def _fwd_matmul(a, b):
    _same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(node, g, need):
    a, b = node.tensors
    ga = apply("matmul", g, b.transpose((1, 0))) if need[0] else None
    gb = apply("matmul", a.transpose((1, 0)), g) if need[1] else None
    return ga, gb


def _fwd_affine(x, w, b):
    _same_dtype(x, w, "affine")
    _same_dtype(x, b, "affine")
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("affine: expected x (B,N), w (N,M), b (M,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    return x @ w + b


def _vjp_affine(node, g, need):
    x, w, b = node.tensors
    gx = apply("matmul", g, w.transpose((1, 0))) if need[0] else None
    gw = apply("matmul", x.transpose((1, 0)), g) if need[1] else None
    gb = g.sum(axis=0) if need[2] else None
    return gx, gw, gb


def _fwd_leaky_relu(x, alpha=0.2):
    if 0.0 <= alpha < 1.0:
        # max(x, alpha*x) picks x exactly when x >= 0; avoids the where mask
        return np.maximum(x, x * np.asarray(alpha, dtype=x.dtype))
    return np.where(x > 0, x, x * np.asarray(alpha, dtype=x.dtype))


def _vjp_leaky_relu(node, g, need):
    x = node.tensors[0]
    alpha = node.attrs["alpha"]
    mask = np.where(x.data > 0,
                    np.asarray(1, dtype=x.dtype),
                    np.asarray(alpha, dtype=x.dtype))
    return (apply("mul", g, mask),)


def _fwd_softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _vjp_softplus(node, g, need):
    x = node.tensors[0]
    return (apply("mul", g, apply("sigmoid", x)),)


def _fwd_sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z))


def _vjp_sigmoid(node, g, need):
    y = node.out
    return (apply("mul", g, apply("mul", y, apply("sub", 1.0, y))),)


def _fwd_tanh(x):
    return np.tanh(x)


def _vjp_tanh(node, g, need):
    y = node.out
    return (apply("mul", g, apply("sub", 1.0, apply("square", y))),)


def _fwd_exp(x):
    with np.errstate(over="ignore"):
        return np.exp(x)


def _vjp_exp(node, g, need):
    return (apply("mul", g, node.out),)


def _fwd_log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def _vjp_log(node, g, need):
    return (apply("mul", g, apply("reciprocal", node.tensors[0])),)


def _fwd_reciprocal(x):
    with np.errstate(divide="ignore"):
        return 1.0 / x


def _vjp_reciprocal(node, g, need):
    y = node.out
    return (apply("mul", apply("mul", g, apply("square", y)), -1.0),)


def _fwd_square(x):
    return x * x


def _vjp_square(node, g, need):
    return (apply("mul", apply("mul", g, node.tensors[0]), 2.0),)


# --------------------------------------------------------------------------
# reductions and shape ops

def _fwd_sum(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _reduction_vjp(node, g, scale=None):
    x = node.tensors[0]
    axis = node.attrs["axis"]
    keepdims = node.attrs["keepdims"]
    if axis is None:
        shaped = g if g.ndim == 0 else g.reshape(())
    elif keepdims:
        shaped = g
    else:
        kd_shape = list(x.shape)
        for a in axis:
            kd_shape[a] = 1
        shaped = g.reshape(kd_shape)
    out = shaped.broadcast(x.shape)
    if scale is not None:
        out = apply("mul", out, scale)
    return (out,)


def _vjp_sum(node, g, need):
    return _reduction_vjp(node, g)


def _fwd_mean(x, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims)


def _vjp_mean(node, g, need):
    x = node.tensors[0]
    axis = node.attrs["axis"]
    if axis is None:
        count = x.size
    else:
        count = 1
        for a in axis:
            count *= x.shape[a]
    return _reduction_vjp(node, g, scale=1.0 / count)


def _fwd_concat(*xs, axis=0):
    if not xs:
        raise ShapeError("concat: no inputs")
    for x in xs[1:]:
        _same_dtype(xs[0], x, "concat")
    return np.concatenate(xs, axis=axis)


def _vjp_concat(node, g, need):
    axis = node.attrs["axis"]
    out = []
    offset = 0
    for t, needed in zip(node.tensors, need):
        extent = t.shape[axis]
        if needed:
            key = [("slice", None, None, None)] * g.ndim
            key[axis] = ("slice", offset, offset + extent, None)
            out.append(apply("slice", g, key=tuple(key)))
        else:
            out.append(None)
        offset += extent
    return tuple(out)


def _fwd_reshape(x, shape):
    return np.reshape(x, shape)


def _vjp_reshape(node, g, need):
    return (g.reshape(node.tensors[0].shape),)


def _fwd_broadcast(x, shape):
    if x.ndim != 0 and x.ndim != len(shape):
        raise ShapeError(f"broadcast: rank change {x.shape} -> {shape} requires reshape")
    return np.ascontiguousarray(np.broadcast_to(x, shape))


def _vjp_broadcast(node, g, need):
    x = node.tensors[0]
    if x.ndim == 0:
        return (g.sum().reshape(()),)
    axes = tuple(i for i in range(x.ndim) if x.shape[i] == 1 and g.shape[i] != 1)
    if not axes:
        return (g,)
    return (g.sum(axis=axes, keepdims=True),)


def _fwd_slice(x, key):
    return x[_build_key(key)]


def _vjp_slice(node, g, need):
    x = node.tensors[0]
    return (apply("slice_adjoint", g, key=node.attrs["key"], in_shape=tuple(x.shape)),)


def _fwd_slice_adjoint(g, key, in_shape):
    out = np.zeros(in_shape, dtype=g.dtype)
    out[_build_key(key)] = g
    return out


def _vjp_slice_adjoint(node, g, need):
    return (apply("slice", g, key=node.attrs["key"]), )


def _fwd_transpose(x, axes):
    return np.transpose(x, axes)


def _vjp_transpose(node, g, need):
    axes = node.attrs["axes"]
    inverse = tuple(np.argsort(axes))
    return (g.transpose(inverse),)


def _fwd_pad(x, widths):
    return np.pad(x, widths)


def _vjp_pad(node, g, need):
    widths = node.attrs["widths"]
    key = tuple(("slice", lo, g.shape[i] - hi if hi else None, None)
                for i, (lo, hi) in enumerate(widths))
    return (apply("slice", g, key=key),)


def _fwd_flip(x, axis):
    return np.flip(x, axis)


def _vjp_flip(node, g, need):
    return (g.flip(node.attrs["axis"]),)


def _fwd_cumsum(x, axis, reverse=False):
    if reverse:
        return np.flip(np.cumsum(np.flip(x, axis), axis=axis), axis)
    return np.cumsum(x, axis=axis)


def _vjp_cumsum(node, g, need):
    axis = node.attrs["axis"]
    reverse = node.attrs["reverse"]
    return (g.cumsum(axis, reverse=not reverse),)


# --------------------------------------------------------------------------
# conv2d (stride 1; downsampling is done with strided slicing)

_CONV_PATHS: dict = {}


def _fwd_conv2d(x, w, pad=(0, 0)):
    _same_dtype(x, w, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: expected x (B,C,H,W) and w (O,C,kh,kw)")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    ph, pw = pad
    kh, kw = w.shape[2], w.shape[3]
    if ph > kh - 1 or pw > kw - 1:
        raise ShapeError("conv2d: pad must be <= kernel-1 (keeps the VJP closed)")
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    sig = (win.shape, w.shape)
    path = _CONV_PATHS.get(sig)
    if path is None:
        path = np.einsum_path("bchwij,ocij->bohw", win, w, optimize="optimal")[0]
        _CONV_PATHS[sig] = path
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=path)


def _vjp_conv2d(node, g, need):
    x, w = node.tensors
    ph, pw = node.attrs["pad"]
    kh, kw = w.shape[2], w.shape[3]
    gx = gw = None
    if need[0]:
        wr = w.flip(2).flip(3).transpose((1, 0, 2, 3))
        gx = apply("conv2d", g, wr, pad=(kh - 1 - ph, kw - 1 - pw))
    if need[1]:
        xp = x.pad2d(ph, pw) if (ph or pw) else x
        xt = xp.transpose((1, 0, 2, 3))
        gt = g.transpose((1, 0, 2, 3))
        gw = apply("conv2d", xt, gt, pad=(0, 0)).transpose((1, 0, 2, 3))
    return gx, gw


# --------------------------------------------------------------------------
# bilinear plane sampling (tri-plane lookup primitive)

def _gs_geometry(planes_shape, coords):
    """Shared index/weight computation for gather and scatter.

    align_corners convention: -1 maps to texel 0, +1 to texel n-1;
    out-of-range coords clamp to the border.
    """
    B, C, H, W = planes_shape
    dt = coords.dtype
    u = (coords[..., 0] + 1) * (0.5 * (W - 1))
    v = (coords[..., 1] + 1) * (0.5 * (H - 1))
    u = np.clip(u, 0, W - 1)
    v = np.clip(v, 0, H - 1)
    j0 = np.minimum(np.floor(u), W - 2).astype(np.int64) if W > 1 else np.zeros(u.shape, np.int64)
    i0 = np.minimum(np.floor(v), H - 2).astype(np.int64) if H > 1 else np.zeros(v.shape, np.int64)
    fu = (u - j0).astype(dt)
    fv = (v - i0).astype(dt)
    base = (np.arange(B, dtype=np.int64) * (H * W))[:, None]
    i1 = np.minimum(i0 + 1, H - 1)
    j1 = np.minimum(j0 + 1, W - 1)
    idx = (base + i0 * W + j0, base + i0 * W + j1,
           base + i1 * W + j0, base + i1 * W + j1)
    wts = ((1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu)
    return idx, wts, fu, fv


def _fwd_grid_sample(planes, coords):
    _same_dtype(planes, coords, "grid_sample_bilinear")
    squeeze = planes.ndim == 3
    if squeeze:
        if coords.ndim != 2 or coords.shape[-1] != 2:
            raise ShapeError("grid_sample_bilinear: coords must be (N,2) for a (C,H,W) plane")
        planes = planes[None]
        coords = coords[None]
    if planes.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError("grid_sample_bilinear: expected (B,C,H,W) planes and (B,N,2) coords")
    if planes.shape[0] != coords.shape[0]:
        raise ShapeError("grid_sample_bilinear: batch mismatch")
    if 0 in planes.shape:
        raise ShapeError("grid_sample_bilinear: zero-sized plane")
    B, C, H, W = planes.shape
    idx, wts, _, _ = _gs_geometry(planes.shape, coords)
    flat = planes.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    out = wts[0][..., None] * flat[idx[0]]
    for k in range(1, 4):
        out += wts[k][..., None] * flat[idx[k]]
    return out[0] if squeeze else out


def _vjp_grid_sample(node, g, need):
    planes, coords = node.tensors
    squeeze = planes.ndim == 3
    gp = gc = None
    if need[0]:
        gp = apply("gs_plane_adjoint", g, coords.detach(),
                   plane_shape=tuple(planes.shape))
    if need[1]:
        if current_tape() is not None and current_tape().recording:
            raise SecondOrderError(
                "grid_sample_bilinear coords path does not support build_graph mode")
        gc = Tensor(_gs_coord_grad(planes.data, coords.data, g.data))
    return gp, gc


def _fwd_gs_plane_adjoint(g, coords, plane_shape):
    squeeze = len(plane_shape) == 3
    shape4 = (1,) + tuple(plane_shape) if squeeze else tuple(plane_shape)
    B, C, H, W = shape4
    g4 = g[None] if squeeze else g
    c3 = coords[None] if squeeze else coords
    idx, wts, _, _ = _gs_geometry(shape4, c3)
    # one shared index vector, one bincount per channel: far cheaper than
    # a single bincount over B*H*W*C expanded indices
    nbins = B * H * W
    allidx = np.concatenate([idx[k].ravel() for k in range(4)])
    stacked = np.concatenate(
        [(wts[k][..., None] * g4).reshape(-1, C) for k in range(4)], axis=0)
    out = np.empty((C, nbins), dtype=g.dtype)
    for c in range(C):
        out[c] = np.bincount(allidx, weights=stacked[:, c], minlength=nbins)
    out = out.reshape(C, B, H, W).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def _vjp_gs_plane_adjoint(node, g, need):
    coords = node.tensors[1]
    gg = apply("grid_sample_bilinear", g, coords.detach()) if need[0] else None
    return gg, None


def _gs_coord_grad(planes, coords, g):
    """First-order gradient of grid_sample w.r.t. coords (border clamp
    zeroes the gradient outside [-1,1], matching the clamp subgradient)."""
    squeeze = planes.ndim == 3
    if squeeze:
        planes = planes[None]
        coords = coords[None]
        g = g[None]
    B, C, H, W = planes.shape
    idx, _, fu, fv = _gs_geometry(planes.shape, coords)
    flat = planes.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    p00, p01, p10, p11 = (flat[idx[k]] for k in range(4))
    d_du = (1 - fv)[..., None] * (p01 - p00) + fv[..., None] * (p11 - p10)
    d_dv = (1 - fu)[..., None] * (p10 - p00) + fu[..., None] * (p11 - p01)
    gu = np.sum(g * d_du, axis=-1) * (0.5 * (W - 1))
    gv = np.sum(g * d_dv, axis=-1) * (0.5 * (H - 1))
    u_raw = (coords[..., 0] + 1) * (0.5 * (W - 1))
    v_raw = (coords[..., 1] + 1) * (0.5 * (H - 1))
    gu = np.where((u_raw < 0) | (u_raw > W - 1), 0, gu)
    gv = np.where((v_raw < 0) | (v_raw > H - 1), 0, gv)
    out = np.stack([gu, gv], axis=-1).astype(coords.dtype)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------
# registry assembly

def _register(name, fwd, vjp, closed=True, preserves_finite=False):
    _OPS[name] = OpSpec(name, fwd, vjp, closed, preserves_finite)


_register("add", _fwd_add, _vjp_add)
_register("sub", _fwd_sub, _vjp_sub)
_register("mul", _fwd_mul, _vjp_mul)
_register("matmul", _fwd_matmul, _vjp_matmul)
_register("affine", _fwd_affine, _vjp_affine)
_register("conv2d", _fwd_conv2d, _vjp_conv2d)
_register("leaky_relu", _fwd_leaky_relu, _vjp_leaky_relu, preserves_finite=True)
_register("softplus", _fwd_softplus, _vjp_softplus)
_register("sigmoid", _fwd_sigmoid, _vjp_sigmoid)
_register("tanh", _fwd_tanh, _vjp_tanh)
_register("exp", _fwd_exp, _vjp_exp)
_register("log", _fwd_log, _vjp_log)
_register("reciprocal", _fwd_reciprocal, _vjp_reciprocal)
_register("square", _fwd_square, _vjp_square)
_register("sum", _fwd_sum, _vjp_sum)
_register("mean", _fwd_mean, _vjp_mean)
_register("concat", _fwd_concat, _vjp_concat, preserves_finite=True)
_register("reshape", _fwd_reshape, _vjp_reshape, preserves_finite=True)
_register("broadcast", _fwd_broadcast, _vjp_broadcast, preserves_finite=True)
_register("slice", _fwd_slice, _vjp_slice, preserves_finite=True)
_register("slice_adjoint", _fwd_slice_adjoint, _vjp_slice_adjoint, preserves_finite=True)
_register("transpose", _fwd_transpose, _vjp_transpose, preserves_finite=True)
_register("pad", _fwd_pad, _vjp_pad, preserves_finite=True)
_register("flip", _fwd_flip, _vjp_flip, preserves_finite=True)
_register("cumsum", _fwd_cumsum, _vjp_cumsum)
_register("grid_sample_bilinear", _fwd_grid_sample, _vjp_grid_sample)
_register("gs_plane_adjoint", _fwd_gs_plane_adjoint, _vjp_gs_plane_adjoint)


# --------------------------------------------------------------------------
# functional wrappers

def affine(x, w, b) -> Tensor:
    return apply("affine", x, w, b)


def conv2d(x, w, pad: int | tuple = 0) -> Tensor:
    if isinstance(pad, int):
        pad = (pad, pad)
    return apply("conv2d", x, w, pad=tuple(pad))


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=int(axis))


def grid_sample_bilinear(planes, coords) -> Tensor:
    return apply("grid_sample_bilinear", planes, coords)


def softplus(x) -> Tensor:
    return apply("softplus", x)


def sigmoid(x) -> Tensor:
    return apply("sigmoid", x)


SECOND_ORDER_OPS = frozenset(name for name, spec in _OPS.items() if spec.closed)
