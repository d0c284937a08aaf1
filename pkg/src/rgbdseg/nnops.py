"""Convolution, pooling, resampling and the pixelwise loss, on the tape.

All image tensors here are channel-major ``(c, h, w)``. Convolution supports
stride, zero padding and dilation (hole) factors; pooling optionally uses
Caffe-style ceil output arithmetic so a 426 crop reduces to the 54x54 grid.
"""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import Tensor, accumulate_grad, apply_op

log = logging.getLogger(__name__)


def conv_out_size(n, kernel, stride, padding, dilation):
    """floor((n + 2*pad - dilation*(kernel-1) - 1) / stride) + 1"""
    return (n + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv2d(x, weights, bias=None, stride=1, padding=0, dilation=1):
    """2-d convolution (cross-correlation) of (c_in,h,w) with (c_out,c_in,kh,kw)."""
    if x.ndim != 3 or weights.ndim != 4:
        raise ValueError(f"conv2d: need (c,h,w) input and (co,ci,kh,kw) weights, got {x.shape}, {weights.shape}")
    c_in, h, w = x.shape
    c_out, ci_w, kh, kw = weights.shape
    if ci_w != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels, weights expect {ci_w}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if min(sh, sw) < 1 or min(dh, dw) < 1 or min(ph, pw) < 0:
        raise ValueError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    if dh * (kh - 1) + 1 > h + 2 * ph or dw * (kw - 1) + 1 > w + 2 * pw:
        raise ValueError("conv2d: dilated kernel does not fit the padded input")
    h_out = conv_out_size(h, kh, sh, ph, dh)
    w_out = conv_out_size(w, kw, sw, pw, dw)
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv2d: output {h_out}x{w_out} has a dim < 1")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # gather coordinates: (h_out, w_out, kh, kw) into the padded plane
    ys = (sh * np.arange(h_out)[:, None] + dh * np.arange(kh)[None, :])
    xs = (sw * np.arange(w_out)[:, None] + dw * np.arange(kw)[None, :])
    ys2 = ys[:, None, :, None]
    xs2 = xs[None, :, None, :]
    patches = xp[:, ys2, xs2]  # (c_in, h_out, w_out, kh, kw)
    cols = patches.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    w_mat = weights.data.reshape(c_out, -1)
    out = (w_mat @ cols).reshape(c_out, h_out, w_out)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[:, None, None]

    inputs = (x, weights) if bias is None else (x, weights, bias)

    def bwd(g):
        g_mat = g.reshape(c_out, -1)
        accumulate_grad(weights, (g_mat @ cols.T).reshape(weights.shape))
        if bias is not None:
            accumulate_grad(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            d_cols = w_mat.T @ g_mat
            d_patches = d_cols.reshape(c_in, kh, kw, h_out, w_out).transpose(0, 3, 4, 1, 2)
            dxp = np.zeros_like(xp)
            c_idx = np.arange(c_in)[:, None, None, None, None]
            np.add.at(dxp, (c_idx, ys2[None], xs2[None]), d_patches)
            accumulate_grad(x, dxp[:, ph:ph + h, pw:pw + w])

    return apply_op("conv2d", inputs, out, bwd)


def maxpool2d(x, window, stride=None, ceil_mode=False):
    """Max pooling over (c,h,w); ties route the gradient to the first position
    in window scan order. ceil_mode pads with -inf to cover the ragged edge."""
    if x.ndim != 3:
        raise ValueError(f"maxpool2d: need (c,h,w), got {x.shape}")
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    c, h, w = x.shape
    if wh > h or ww > w:
        raise ValueError(f"maxpool2d: window {wh}x{ww} larger than input {h}x{w}")
    if ceil_mode:
        h_out = -(-(h - wh) // sh) + 1
        w_out = -(-(w - ww) // sw) + 1
    else:
        h_out = (h - wh) // sh + 1
        w_out = (w - ww) // sw + 1
    need_h = (h_out - 1) * sh + wh
    need_w = (w_out - 1) * sw + ww
    xp = x.data
    if need_h > h or need_w > w:
        xp = np.pad(x.data, ((0, 0), (0, need_h - h), (0, need_w - w)), constant_values=-np.inf)

    ys = (sh * np.arange(h_out)[:, None] + np.arange(wh)[None, :])
    xs = (sw * np.arange(w_out)[:, None] + np.arange(ww)[None, :])
    windows = xp[:, ys[:, None, :, None], xs[None, :, None, :]]  # (c,h_out,w_out,wh,ww)
    flat = windows.reshape(c, h_out, w_out, wh * ww)
    arg = flat.argmax(axis=3)  # first occurrence on ties (row-major in window)
    out = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        ky, kx = arg // ww, arg % ww
        oy = np.arange(h_out)[None, :, None]
        ox = np.arange(w_out)[None, None, :]
        rows = oy * sh + ky
        cols = ox * sw + kx
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        c_idx = np.arange(c)[:, None, None]
        np.add.at(dxp, (c_idx, rows, cols), g)
        accumulate_grad(x, dxp[:, :h, :w])

    return apply_op("maxpool2d", (x,), out, bwd)


def _resize_axis_coords(n_in, n_out):
    # align-corners-false sampling: src = (dst + 0.5) * n_in/n_out - 0.5,
    # clamped to [0, n_in - 1]; linear weight t between floor and floor+1
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling of (c,h,w) to (c,out_h,out_w), align-corners-false."""
    if x.ndim != 3:
        raise ValueError(f"bilinear_resize: need (c,h,w), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output dims must be >= 1")
    c, h, w = x.shape
    y0, y1, ty = _resize_axis_coords(h, out_h)
    x0, x1, tx = _resize_axis_coords(w, out_w)
    ty_c = ty[None, :, None]
    tx_c = tx[None, None, :]
    w00 = (1 - ty_c) * (1 - tx_c)
    w01 = (1 - ty_c) * tx_c
    w10 = ty_c * (1 - tx_c)
    w11 = ty_c * tx_c
    d = x.data
    out = (
        w00 * d[:, y0[:, None], x0[None, :]]
        + w01 * d[:, y0[:, None], x1[None, :]]
        + w10 * d[:, y1[:, None], x0[None, :]]
        + w11 * d[:, y1[:, None], x1[None, :]]
    )

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(d)
        c_idx = np.arange(c)[:, None, None]
        np.add.at(dx, (c_idx, y0[:, None], x0[None, :]), g * w00)
        np.add.at(dx, (c_idx, y0[:, None], x1[None, :]), g * w01)
        np.add.at(dx, (c_idx, y1[:, None], x0[None, :]), g * w10)
        np.add.at(dx, (c_idx, y1[:, None], x1[None, :]), g * w11)
        accumulate_grad(x, dx)

    return apply_op("bilinear_resize", (x,), out, bwd)


IGNORE_INDEX = 255


def softmax_cross_entropy(logits, labels, ignore_index=IGNORE_INDEX):
    """Mean -log softmax(logits)[label] over non-ignored pixels.

    logits: (k,h,w) tensor; labels: (h,w) integer array with values in [0,k)
    or ignore_index. All pixels ignored is defined as loss 0 with zero
    gradient (logged as a diagnostic).
    """
    labels = np.asarray(labels)
    if logits.ndim != 3 or labels.shape != logits.shape[1:]:
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[0]
    valid = labels != ignore_index
    lab_valid = labels[valid]
    if lab_valid.size and (lab_valid.min() < 0 or lab_valid.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {k})")
    n = int(valid.sum())
    if n == 0:
        log.warning("softmax_cross_entropy: every pixel ignored; loss defined as 0")
        return apply_op("softmax_cross_entropy", (logits,), np.array(0.0), lambda g: None)

    z = logits.data - logits.data.max(axis=0, keepdims=True)
    ez = np.exp(z)
    softmax = ez / ez.sum(axis=0, keepdims=True)
    log_softmax = z - np.log(ez.sum(axis=0, keepdims=True))
    picked = np.take_along_axis(log_softmax, labels.clip(0, k - 1)[None], axis=0)[0]
    loss = -picked[valid].sum() / n

    def bwd(g):
        dz = softmax.copy()
        onehot_rows = labels[valid]
        yy, xx = np.nonzero(valid)
        dz[onehot_rows, yy, xx] -= 1.0
        dz *= valid[None] / n
        accumulate_grad(logits, dz * g)

    return apply_op("softmax_cross_entropy", (logits,), np.array(loss), bwd)
