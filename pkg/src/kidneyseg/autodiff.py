"""Reverse-mode automatic differentiation for the segmentation networks.

A Tensor wraps a float array plus an optional gradient accumulator. A
Tape records every differentiable operation in execution order; its
backward pass walks the records in exact reverse order and accumulates
each input's gradient as a sum over all uses. Ops are plain functions
taking the tape first; passing tape=None runs the forward math without
recording, which is the inference path.

Feature maps are laid out (channels, depth, height, width). Training
and gradient checking run in 64-bit; 32-bit is allowed for inference.
"""

import numpy as np

from .errors import InvalidRate, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "scale",
    "elementwise_mul",
    "relu",
    "conv3d_valid",
    "maxpool2",
    "transposed_conv2",
    "softmax_channels",
    "concat_cropped",
    "select_channels",
    "pad_spatial",
    "crop_center",
    "upsample_nearest",
    "spatial_dropout",
    "sum_all",
    "gradcheck",
]


class Tensor:
    """Dense n-D float tensor with an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        flags = "+grad" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}{flags})"


class Tape:
    """Ordered record of executed ops; backward replays them reversed."""

    def __init__(self):
        self.records = []  # (output tensor, backward closure)

    def record(self, out, backward):
        self.records.append((out, backward))

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and push gradients to every input."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, backward in reversed(self.records):
            if out.grad is not None:
                backward(out.grad)


def _result(tape, data, inputs, make_backward):
    """Create an op output, recording the backward rule when tracked."""
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, make_backward())
    return out


# ------------------------------------------------------ elementwise ops


def add(tape, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def make():
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        return backward

    return _result(tape, a.data + b.data, (a, b), make)


def scale(tape, a, factor):
    factor = float(factor)

    def make():
        def backward(g):
            a.accumulate_grad(g * factor)

        return backward

    return _result(tape, a.data * factor, (a,), make)


def elementwise_mul(tape, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data

    def make():
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * b_data)
            if b.requires_grad:
                b.accumulate_grad(g * a_data)

        return backward

    return _result(tape, a_data * b_data, (a, b), make)


def relu(tape, x):
    mask = x.data > 0

    def make():
        def backward(g):
            x.accumulate_grad(g * mask)

        return backward

    return _result(tape, np.where(mask, x.data, 0.0), (x,), make)


def sum_all(tape, x):
    def make():
        def backward(g):
            x.accumulate_grad(np.full_like(x.data, float(g)))

        return backward

    return _result(tape, np.asarray(x.data.sum()), (x,), make)


# ------------------------------------------------------- convolutions


def conv3d_valid(tape, x, w, b):
    """Valid 3-D convolution: (Ci,D,H,W) x (Co,Ci,k,k,k) -> (Co,D-k+1,...)."""
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 4-D input and 5-D kernel, got {x.shape}, {w.shape}")
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d kernel must be cubic, got {w.shape}")
    if x.shape[0] != ci:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[0]}, kernel {ci}")
    if min(x.shape[1:]) < k:
        raise ShapeError(f"conv3d spatial dims {x.shape[1:]} smaller than kernel {k}")
    if b.shape != (co,):
        raise ShapeError(f"conv3d bias must have shape ({co},), got {b.shape}")

    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k, k), axis=(1, 2, 3))
    out = np.einsum("cdhwijl,ocijl->odhw", win, w.data, optimize=True)
    out += b.data[:, None, None, None]

    def make():
        def backward(g):
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(1, 2, 3)))
            if w.requires_grad:
                w.accumulate_grad(np.einsum("cdhwijl,odhw->ocijl", win, g, optimize=True))
            if x.requires_grad:
                pad = [(0, 0)] + [(k - 1, k - 1)] * 3
                gp = np.pad(g, pad)
                gwin = np.lib.stride_tricks.sliding_window_view(gp, (k, k, k), axis=(1, 2, 3))
                flipped = w.data[:, :, ::-1, ::-1, ::-1]
                x.accumulate_grad(np.einsum("odhwijl,ocijl->cdhw", gwin, flipped, optimize=True))

        return backward

    return _result(tape, out, (x, w, b), make)


def transposed_conv2(tape, x, w, b):
    """Transposed convolution, kernel 2^3 stride 2: doubles spatial dims.

    Kernel layout is (C_in, C_out, 2, 2, 2). Stride equals kernel size,
    so output blocks do not overlap.
    """
    if x.data.ndim != 4 or w.data.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"transposed_conv2 needs (Ci,Co,2,2,2) kernel, got {w.shape}")
    ci, co = w.shape[0], w.shape[1]
    if x.shape[0] != ci:
        raise ShapeError(f"transposed_conv2 channel mismatch: input {x.shape[0]}, kernel {ci}")
    if b.shape != (co,):
        raise ShapeError(f"transposed_conv2 bias must have shape ({co},), got {b.shape}")
    _, d, h, wd = x.shape
    blocks = np.einsum("cdhw,coijl->odihjwl", x.data, w.data, optimize=True)
    out = blocks.reshape(co, 2 * d, 2 * h, 2 * wd)
    out += b.data[:, None, None, None]

    def make():
        def backward(g):
            gv = g.reshape(co, d, 2, h, 2, wd, 2)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(1, 2, 3)))
            if w.requires_grad:
                w.accumulate_grad(np.einsum("odihjwl,cdhw->coijl", gv, x.data, optimize=True))
            if x.requires_grad:
                x.accumulate_grad(np.einsum("odihjwl,coijl->cdhw", gv, w.data, optimize=True))

        return backward

    return _result(tape, out, (x, w, b), make)


def maxpool2(tape, x):
    """2x2x2 max pooling, stride 2. Spatial dims must be even."""
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape[1:]}")
    view = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
    flat = view.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, d // 2, h // 2, w // 2, 8)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def make():
        def backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gx = (
                gflat.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2)
                .transpose(0, 1, 4, 2, 5, 3, 6)
                .reshape(c, d, h, w)
            )
            x.accumulate_grad(gx)

        return backward

    return _result(tape, out, (x,), make)


# ------------------------------------------------ shape/channel plumbing


def softmax_channels(tape, x):
    """Softmax over the channel axis; each voxel's channel vector sums to 1."""
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=0, keepdims=True)

    def make():
        def backward(g):
            dot = (g * out).sum(axis=0, keepdims=True)
            x.accumulate_grad(out * (g - dot))

        return backward

    return _result(tape, out, (x,), make)


def _center_offsets(big, small):
    offs = []
    for bs, ss in zip(big, small):
        diff = bs - ss
        if diff < 0 or diff % 2:
            raise ShapeError(f"cannot center {small} inside {big}")
        offs.append(diff // 2)
    return offs


def concat_cropped(tape, skip, up):
    """Center-crop the skip path to the up path's spatial dims and concat.

    Skip channels come first in the output.
    """
    if skip.data.ndim != 4 or up.data.ndim != 4:
        raise ShapeError("concat_cropped expects (C,D,H,W) tensors")
    oz, oy, ox = _center_offsets(skip.shape[1:], up.shape[1:])
    sd, sh, sw = up.shape[1:]
    cropped = skip.data[:, oz : oz + sd, oy : oy + sh, ox : ox + sw]
    out = np.concatenate([cropped, up.data], axis=0)
    cs = skip.shape[0]

    def make():
        def backward(g):
            if skip.requires_grad:
                gs = np.zeros_like(skip.data)
                gs[:, oz : oz + sd, oy : oy + sh, ox : ox + sw] = g[:cs]
                skip.accumulate_grad(gs)
            if up.requires_grad:
                up.accumulate_grad(g[cs:])

        return backward

    return _result(tape, out, (skip, up), make)


def select_channels(tape, x, start, stop):
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"channel slice [{start}:{stop}] outside 0..{x.shape[0]}")

    def make():
        def backward(g):
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            x.accumulate_grad(gx)

        return backward

    return _result(tape, x.data[start:stop].copy(), (x,), make)


def pad_spatial(tape, x, pad):
    """Zero-pad each spatial axis by `pad` voxels on both sides."""
    pad = int(pad)
    if pad < 0:
        raise ShapeError(f"negative padding {pad}")
    widths = [(0, 0)] + [(pad, pad)] * 3

    def make():
        def backward(g):
            if pad:
                x.accumulate_grad(g[:, pad:-pad, pad:-pad, pad:-pad])
            else:
                x.accumulate_grad(g)

        return backward

    return _result(tape, np.pad(x.data, widths), (x,), make)


def crop_center(tape, x, target_spatial):
    oz, oy, ox = _center_offsets(x.shape[1:], target_spatial)
    td, th, tw = target_spatial
    data = x.data[:, oz : oz + td, oy : oy + th, ox : ox + tw].copy()

    def make():
        def backward(g):
            gx = np.zeros_like(x.data)
            gx[:, oz : oz + td, oy : oy + th, ox : ox + tw] = g
            x.accumulate_grad(gx)

        return backward

    return _result(tape, data, (x,), make)


def upsample_nearest(tape, x, factor):
    """Repeat every voxel `factor` times along each spatial axis."""
    f = int(factor)
    if f < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    data = x.data.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
    c, d, h, w = x.shape

    def make():
        def backward(g):
            gx = g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6))
            x.accumulate_grad(gx)

        return backward

    return _result(tape, data, (x,), make)


def spatial_dropout(tape, x, rate, rng, training):
    """Zero whole channels with probability `rate`; scale survivors.

    Inverted-dropout scaling (1/(1-rate) at train time) keeps inference
    a pure identity. Identity when training is False or rate is 0.
    """
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        def make_id():
            def backward(g):
                x.accumulate_grad(g)

            return backward

        return _result(tape, x.data.copy(), (x,), make_id)

    keep = rng.random(x.shape[0]) >= rate
    factors = (keep / (1.0 - rate)).astype(x.data.dtype)[:, None, None, None]

    def make():
        def backward(g):
            x.accumulate_grad(g * factors)

        return backward

    return _result(tape, x.data * factors, (x,), make)


# ----------------------------------------------------------- gradcheck


def gradcheck(f, x, eps=1e-4):
    """Max relative error between reverse-mode and finite-difference grads.

    `f(tape, tensor) -> scalar Tensor` must be deterministic. The
    denominator is clamped at 1 so near-zero gradients compare by
    absolute error.
    """
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    tape = Tape()
    tape.backward(f(tape, xt))
    ga = xt.grad if xt.grad is not None else np.zeros_like(x0)

    gfd = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x0.copy(), x0.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(None, Tensor(xp)).data)
        fm = float(f(None, Tensor(xm)).data)
        gfd[i] = (fp - fm) / (2.0 * eps)
        it.iternext()

    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gfd)), 1.0)
    return float((np.abs(ga - gfd) / denom).max())
