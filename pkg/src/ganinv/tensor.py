"""Dense float64 kernels: matrix product, 2-D convolution, upsampling, batch statistics.

Tensors are plain C-contiguous ``numpy.float64`` arrays. Images and feature
maps are laid out as (batch, channel, height, width); flat activations as
(batch, features).

Summation order
---------------
Every product goes through :func:`matmul`, which feeds BLAS fixed-shape
row tiles (height chosen from the inner and output extents only, with the
output padded to at least ``MIN_COLS`` columns). A fixed-shape GEMM computes
each output row from that row of the left operand alone, so the result for a
row never depends on how many other rows are in the batch or where it sits.
Convolutions are an im2col product over channel-last patches (inner index
ordered kernel row, kernel column, channel); the input adjoint scatter-adds
the patch gradients back over kernel offsets in row-major order. Everything else is elementwise or a numpy reduction over a
fixed axis set.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ganinv.errors import DimensionError, NumericError

FLOAT = np.float64
MIN_COLS = 8


def as_tensor(data, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=FLOAT)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"{name} has an empty extent: {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, what: str = "result") -> np.ndarray:
    # a finite sum proves every entry finite; only an overflowing sum needs the full scan
    if not math.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")
    return arr


def _operand(x, name):
    # BLAS takes transposed (Fortran-ordered) operands as they are
    x = np.asarray(x, dtype=FLOAT)
    if not (x.flags.c_contiguous or x.flags.f_contiguous):
        x = np.ascontiguousarray(x)
    if x.ndim != 2 or 0 in x.shape:
        raise DimensionError(f"{name} must be a non-empty matrix, got shape {x.shape}")
    return x


def _tile_rows(k: int, n: int) -> int:
    return 128 if k * n >= 1 << 18 else 256


def matmul(a, b, row_invariant: bool = True) -> np.ndarray:
    """Matrix product ``a @ b``.

    With ``row_invariant`` (the default) each output row is bitwise
    independent of the other rows of ``a``. Products that reduce over the
    batch (parameter gradients) pass ``row_invariant=False`` and take a single
    BLAS call, still deterministic for fixed operands.
    """
    a = _operand(a, "left operand")
    b = _operand(b, "right operand")
    m, k = a.shape
    if b.shape[0] != k:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    if not row_invariant:
        return check_finite(a @ b, "matmul")
    n = b.shape[1]
    ncols = max(n, MIN_COLS)
    if ncols != n:
        padded = np.zeros((k, ncols), dtype=FLOAT)
        padded[:, :n] = b
        b = padded
    t = _tile_rows(k, ncols)
    full, rem = divmod(m, t)
    out = np.empty((full * t + (t if rem else 0), ncols), dtype=FLOAT)
    for i in range(full):
        np.matmul(a[i * t:(i + 1) * t], b, out=out[i * t:(i + 1) * t])
    if rem:
        tail = np.zeros((t, k), dtype=FLOAT)
        tail[:rem] = a[full * t:]
        np.matmul(tail, b, out=out[full * t:])
    if out.shape != (m, n):
        out = np.ascontiguousarray(out[:m, :n])
    return check_finite(out, "matmul")


def pad_pair(pad) -> tuple[int, int]:
    """Normalize ``pad`` (int, or (before, after)) to a (before, after) pair."""
    if isinstance(pad, (int, np.integer)):
        before = after = int(pad)
    else:
        before, after = (int(p) for p in pad)
    if before < 0 or after < 0:
        raise DimensionError(f"negative padding {pad}")
    return before, after


def conv_output_extent(size: int, k: int, stride: int, pad) -> int:
    before, after = pad_pair(pad)
    span = size + before + after - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded input {size + before + after}")
    if span % stride:
        raise DimensionError(
            f"non-integral output extent: ({size}+{before}+{after}-{k})/{stride} + 1")
    return span // stride + 1


def _check_conv_args(x, w, stride, pad):
    x = as_tensor(x, 4, "conv input")
    w = as_tensor(w, 4, "conv kernels")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels, kernels expect {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernels must be square, got {w.shape[2:]}")
    if stride < 1:
        raise DimensionError(f"bad stride {stride}")
    ho = conv_output_extent(x.shape[2], w.shape[2], stride, pad)
    wo = conv_output_extent(x.shape[3], w.shape[3], stride, pad)
    return x, w, ho, wo


def _padded_nhwc(x, top, bottom, left, right):
    xt = x.transpose(0, 2, 3, 1)
    if top == bottom == left == right == 0:
        return np.ascontiguousarray(xt)
    return np.pad(xt, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _kernel_matrix(w):
    # inner index ordered (kernel row, kernel col, channel) to match _im2col
    o = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(o, -1)


def _kernel_from_matrix(m, shape):
    o, c, kh, kw = shape
    return np.ascontiguousarray(m.reshape(o, kh, kw, c).transpose(0, 3, 1, 2))


def _im2col(xp, kh, kw, stride, ho, wo):
    b, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)


def _col2im(gcols, shape, stride, ho, wo):
    kh, kw = gcols.shape[3:5]
    out = np.zeros(shape, dtype=FLOAT)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
    return out


def _out_extents(xp, kh, kw, stride):
    return (xp.shape[1] - kh) // stride + 1, (xp.shape[2] - kw) // stride + 1


def _conv_valid(xp, kmat, kh, kw, stride):
    """Valid cross-correlation of an NHWC padded input; returns NHWC output."""
    b = xp.shape[0]
    ho, wo = _out_extents(xp, kh, kw, stride)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    return matmul(cols, kmat.T).reshape(b, ho, wo, kmat.shape[0])


def _conv_valid_backward(xp, kmat, kh, kw, grad_out, stride, need_input, need_kernels):
    """``grad_out`` is NHWC; returns NHWC padded-input grad and kernel-matrix grad."""
    b, ho, wo, o = grad_out.shape
    g2 = grad_out.reshape(b * ho * wo, o)
    grad_xp = grad_k = None
    if need_kernels:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        grad_k = matmul(g2.T, cols, row_invariant=False)
    if need_input:
        if stride == 1 and o < xp.shape[3]:
            grad_xp = _input_grad_gather(grad_out, kmat, kh, kw)
        else:
            gcols = matmul(g2, kmat).reshape(b, ho, wo, kh, kw, xp.shape[3])
            grad_xp = _col2im(gcols, xp.shape, stride, ho, wo)
    return grad_xp, grad_k


def _input_grad_gather(grad_out, kmat, kh, kw):
    """Stride-1 input gradient as a full correlation with the flipped kernels.

    Cheaper than scattering columns when there are fewer output than input
    channels: the column buffer holds kh*kw*O values per position, not kh*kw*C.
    """
    o = grad_out.shape[3]
    c = kmat.shape[1] // (kh * kw)
    flipped = kmat.reshape(o, kh, kw, c)[:, ::-1, ::-1, :].transpose(3, 1, 2, 0)
    gpad = np.pad(grad_out, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    return _conv_valid(gpad, flipped.reshape(c, kh * kw * o), kh, kw, 1)


def _nchw(a):
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def conv2d(x, w, stride: int = 1, pad=0) -> np.ndarray:
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,K,K), zero padding.

    ``pad`` is either one amount for all four borders or a (before, after)
    pair applied to both spatial axes. The output extent
    (H + before + after - K) / stride + 1 must be integral.
    """
    x, w, _, _ = _check_conv_args(x, w, stride, pad)
    lo, hi = pad_pair(pad)
    k = w.shape[2]
    out = _conv_valid(_padded_nhwc(x, lo, hi, lo, hi), _kernel_matrix(w), k, k, stride)
    return check_finite(_nchw(out), "conv2d")


def conv2d_backward(x, w, grad_out, stride: int = 1, pad=0,
                    need_input: bool = True, need_kernels: bool = True):
    """Adjoints of :func:`conv2d` with respect to its input and its kernels.

    Returns ``(grad_input, grad_kernels)``; either is ``None`` when not requested.
    """
    x, w, ho, wo = _check_conv_args(x, w, stride, pad)
    grad_out = as_tensor(grad_out, 4, "grad_out")
    expected = (x.shape[0], w.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {expected}")
    lo, hi = pad_pair(pad)
    k = w.shape[2]
    xp = _padded_nhwc(x, lo, hi, lo, hi)
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
    gxp, gk = _conv_valid_backward(xp, _kernel_matrix(w), k, k, g, stride,
                                   need_input, need_kernels)
    gx = gw = None
    if gxp is not None:
        h, wd = x.shape[2:]
        gx = check_finite(_nchw(gxp[:, lo:lo + h, lo:lo + wd]), "conv2d input gradient")
    if gk is not None:
        gw = check_finite(_kernel_from_matrix(gk, w.shape), "conv2d kernel gradient")
    return gx, gw


def upsample2x(x) -> np.ndarray:
    """Nearest-neighbour upsampling: every pixel becomes a 2x2 block."""
    x = as_tensor(x, 4, "upsample input")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x_backward(grad_out) -> np.ndarray:
    """Adjoint of :func:`upsample2x`: sum over each 2x2 block."""
    g = as_tensor(grad_out, 4, "upsample grad")
    b, c, h2, w2 = g.shape
    if h2 % 2 or w2 % 2:
        raise DimensionError(f"upsampled extents must be even, got {g.shape}")
    return g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# Nearest 2x upsampling followed by a stride-1 "same" convolution splits into
# four sub-pixel convolutions on the original grid. Each phase kernel's taps
# are sums of the original taps (k=5 -> 3x3). All phases share one window, so
# one im2col and one product with the four phase kernels stacked on the
# output axis cover the whole layer.

def fusable(k: int, stride: int, pad) -> bool:
    return stride == 1 and isinstance(pad, int) and 2 * pad == k - 1


def _phase_offsets(k, pad, phase):
    return [(phase + i - pad) // 2 for i in range(k)]


def _fused_window(k, pad):
    offs = _phase_offsets(k, pad, 0) + _phase_offsets(k, pad, 1)
    return min(offs), max(offs)


def _stacked_kernels(w, pad):
    o, c, k, _ = w.shape
    lo, hi = _fused_window(k, pad)
    span = hi - lo + 1
    eff = np.zeros((2, 2, o, c, span, span), dtype=FLOAT)
    for a in (0, 1):
        ra = _phase_offsets(k, pad, a)
        for b in (0, 1):
            rb = _phase_offsets(k, pad, b)
            for i in range(k):
                for j in range(k):
                    eff[a, b, :, :, ra[i] - lo, rb[j] - lo] += w[:, :, i, j]
    return eff


def _check_fused(x, w, pad):
    x = as_tensor(x, 4, "upsample-conv input")
    w = as_tensor(w, 4, "upsample-conv kernels")
    if x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernels {w.shape} do not fit input {x.shape}")
    if not fusable(w.shape[2], 1, pad):
        raise DimensionError(
            f"fused upsample-conv needs 2*pad == k-1, got k={w.shape[2]} pad={pad}")
    return x, w


def upsample_conv2d(x, w, pad: int) -> np.ndarray:
    """Equivalent to ``conv2d(upsample2x(x), w, 1, pad)`` for same-padded kernels."""
    x, w = _check_fused(x, w, pad)
    b, c, h, wd = x.shape
    o = w.shape[0]
    lo, hi = _fused_window(w.shape[2], pad)
    span = hi - lo + 1
    kmat = _kernel_matrix(_stacked_kernels(w, pad).reshape(4 * o, c, span, span))
    out = _conv_valid(_padded_nhwc(x, -lo, hi, -lo, hi), kmat, span, span, 1)
    # (b, h, w, a, c, o) -> (b, o, 2h+a, 2w+c)
    out = out.reshape(b, h, wd, 2, 2, o).transpose(0, 5, 1, 3, 2, 4)
    return check_finite(np.ascontiguousarray(out).reshape(b, o, 2 * h, 2 * wd),
                        "upsample_conv2d")


def upsample_conv2d_backward(x, w, grad_out, pad: int,
                             need_input: bool = True, need_kernels: bool = True):
    """Adjoints of :func:`upsample_conv2d`; returns ``(grad_input, grad_kernels)``."""
    x, w = _check_fused(x, w, pad)
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    grad_out = as_tensor(grad_out, 4, "grad_out")
    if grad_out.shape != (b, o, 2 * h, 2 * wd):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match output")
    lo, hi = _fused_window(k, pad)
    span = hi - lo + 1
    xp = _padded_nhwc(x, -lo, hi, -lo, hi)
    g = grad_out.reshape(b, o, h, 2, wd, 2).transpose(0, 2, 4, 3, 5, 1)
    g = np.ascontiguousarray(g).reshape(b, h, wd, 4 * o)
    stacked_shape = (4 * o, c, span, span)
    kmat = _kernel_matrix(_stacked_kernels(w, pad).reshape(stacked_shape))
    gxp, gk = _conv_valid_backward(xp, kmat, span, span, g, 1, need_input, need_kernels)
    gx = gw = None
    if need_kernels:
        geff = _kernel_from_matrix(gk, stacked_shape).reshape(2, 2, o, c, span, span)
        gw = np.zeros(w.shape, dtype=FLOAT)
        for a in (0, 1):
            ra = _phase_offsets(k, pad, a)
            for bb in (0, 1):
                rb = _phase_offsets(k, pad, bb)
                for i in range(k):
                    for j in range(k):
                        gw[:, :, i, j] += geff[a, bb, :, :, ra[i] - lo, rb[j] - lo]
        check_finite(gw, "upsample_conv2d kernel gradient")
    if need_input:
        gx = check_finite(_nchw(gxp[:, -lo:-lo + h, -lo:-lo + wd]),
                          "upsample_conv2d input gradient")
    return gx, gw


def batch_stats(x, axes) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and variance (divide by N) over ``axes``.

    Two-pass: the variance is the mean squared deviation from the mean.
    """
    x = np.asarray(x, dtype=FLOAT)
    axes = tuple(sorted(int(a) % x.ndim if -x.ndim <= a < x.ndim else _bad_axis(a, x)
                        for a in axes))
    if not axes or len(set(axes)) != len(axes):
        raise DimensionError(f"invalid normalization axes {axes}")
    count = math.prod(x.shape[a] for a in axes)
    if count == 0:
        raise DimensionError("empty reduction")
    mean = x.mean(axis=axes, keepdims=True)
    var = np.square(x - mean).mean(axis=axes)
    return np.squeeze(mean, axis=axes), var


def _bad_axis(a, x):
    raise DimensionError(f"axis {a} out of range for {x.ndim}-D tensor")
