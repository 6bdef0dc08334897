"""Dense tensor kernels used by every network in the package.

Feature maps are numpy arrays laid out height x width x channels,
C-contiguous, so channels are the innermost (fastest varying) axis.
Production code runs in float32; the kernels follow the dtype of their
inputs so tests can drive them in float64 when checking gradients.

All functions here are pure: same inputs give bit-identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError

DTYPE = np.float32


@dataclass
class ConvKernel:
    """Weights and geometry of a single convolution layer.

    weights has shape (kh, kw, in_channels, out_channels); bias has
    length out_channels.  Padding is zero-fill.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ContractViolationError(
                f"kernel weights must be 4-d (kh, kw, inC, outC), got shape {self.weights.shape}"
            )
        kh, kw, _, out_c = self.weights.shape
        if kh < 1 or kw < 1:
            raise ContractViolationError(f"kernel extent must be >= 1, got {kh}x{kw}")
        if out_c < 1:
            raise ContractViolationError("kernel must have at least one output channel")
        if self.stride < 1:
            raise ContractViolationError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ContractViolationError(f"padding must be >= 0, got {self.padding}")
        if self.bias.shape != (out_c,):
            raise ContractViolationError(
                f"bias length {self.bias.shape} does not match out channels {out_c}"
            )

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((padding, padding), (padding, padding), (0, 0)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Gather all kh x kw windows of an HxWxC array into rows.

    Returns an (out_h * out_w, kh * kw * C) matrix whose row (i * out_w + j)
    is the flattened window at output position (i, j).
    """
    h, w, c = x.shape
    out_h = (h - kh) // stride + 1
    out_w = (w - kw) // stride + 1
    sh, sw, sc = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(out_h, out_w, kh, kw, c),
        strides=(stride * sh, stride * sw, sh, sw, sc),
        writeable=False,
    )
    return windows.reshape(out_h * out_w, kh * kw * c)


def col2im(cols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add im2col rows back into an array of `padded_shape` (inverse map)."""
    h, w, c = padded_shape
    out_h = (h - kh) // stride + 1
    out_w = (w - kw) // stride + 1
    grid = cols.reshape(out_h, out_w, kh, kw, c)
    x = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            x[i : i + stride * out_h : stride, j : j + stride * out_w : stride, :] += grid[:, :, i, j, :]
    return x


def conv2d_with_cache(x: np.ndarray, kernel: ConvKernel):
    """Forward convolution returning (output, im2col matrix, padded shape).

    The extra values let a gradient tape reuse the gathered windows.
    """
    if x.ndim != 3:
        raise ContractViolationError(f"conv2d input must be HxWxC, got shape {x.shape}")
    kh, kw, in_c, out_c = kernel.weights.shape
    if x.shape[2] != in_c:
        raise ContractViolationError(
            f"channel axis mismatch: input has {x.shape[2]} channels, kernel expects {in_c}"
        )
    xp = _pad_hw(x, kernel.padding)
    h, w, _ = xp.shape
    out_h = (h - kh) // kernel.stride + 1
    out_w = (w - kw) // kernel.stride + 1
    if out_h < 1 or out_w < 1:
        raise ContractViolationError(
            f"input extent {x.shape[0]}x{x.shape[1]} too small for kernel "
            f"{kh}x{kw} stride {kernel.stride} pad {kernel.padding}"
        )
    cols = im2col(xp, kh, kw, kernel.stride)
    w_mat = kernel.weights.reshape(kh * kw * in_c, out_c)
    y = cols @ w_mat + kernel.bias
    return y.reshape(out_h, out_w, out_c), cols, xp.shape


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Cross-correlation style convolution with bias, zero padding."""
    return conv2d_with_cache(x, kernel)[0]


def max_pool_with_cache(x: np.ndarray, window: tuple, stride: tuple):
    """Forward max pooling returning (output, flat argmax indices into x)."""
    if x.ndim != 3:
        raise ContractViolationError(f"max_pool input must be HxWxC, got shape {x.shape}")
    wh, ww = window
    sh_, sw_ = stride
    h, w, c = x.shape
    if wh > h or ww > w:
        raise ContractViolationError(
            f"pool window {wh}x{ww} larger than input {h}x{w}"
        )
    out_h = (h - wh) // sh_ + 1
    out_w = (w - ww) // sw_ + 1
    sh, sw, sc = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(out_h, out_w, wh, ww, c),
        strides=(sh_ * sh, sw_ * sw, sh, sw, sc),
        writeable=False,
    )
    flat = windows.reshape(out_h, out_w, wh * ww, c)
    arg = flat.argmax(axis=2)  # ties resolve to the first (row-major) position
    y = np.take_along_axis(flat, arg[:, :, None, :], axis=2)[:, :, 0, :]
    # Translate per-window argmax into flat indices of x for the backward pass.
    oi = np.arange(out_h)[:, None, None]
    oj = np.arange(out_w)[None, :, None]
    ci = np.arange(c)[None, None, :]
    ri = oi * sh_ + arg // ww
    rj = oj * sw_ + arg % ww
    flat_idx = (ri * w + rj) * c + ci
    return y, flat_idx


def max_pool(x: np.ndarray, window: tuple, stride: tuple) -> np.ndarray:
    """Per-channel max over each window position."""
    return max_pool_with_cache(x, window, stride)[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, computed branch-free per sign."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cross_correlate_with_cache(template: np.ndarray, search: np.ndarray):
    """Forward correlation returning (response, im2col matrix of search)."""
    if template.ndim != 3 or search.ndim != 3:
        raise ContractViolationError("cross_correlate expects HxWxC template and search")
    d_h, d_w, tc = template.shape
    s_h, s_w, sc = search.shape
    if tc != sc:
        raise ContractViolationError(
            f"channel axis mismatch: template has {tc} channels, search has {sc}"
        )
    if d_h > s_h or d_w > s_w:
        raise ContractViolationError(
            f"template {d_h}x{d_w} larger than search {s_h}x{s_w}"
        )
    cols = im2col(search, d_h, d_w, 1)
    out_h = s_h - d_h + 1
    out_w = s_w - d_w + 1
    y = cols @ template.reshape(-1)
    return y.reshape(out_h, out_w), cols


def cross_correlate(template: np.ndarray, search: np.ndarray) -> np.ndarray:
    """Sliding inner product of the template over the search map.

    Output (i, j) is the sum over all channels of template * the co-located
    search window at offset (i, j); shape (S_h - D_h + 1, S_w - D_w + 1).
    """
    return cross_correlate_with_cache(template, search)[0]


def channel_scale(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Multiply channel c of an HxWxC map by weights[c]."""
    if features.ndim != 3:
        raise ContractViolationError(f"channel_scale input must be HxWxC, got {features.shape}")
    weights = np.asarray(weights)
    if weights.shape != (features.shape[2],):
        raise ContractViolationError(
            f"weight length {weights.shape} does not match channel count {features.shape[2]}"
        )
    return features * weights[None, None, :]


def _resize_coords(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned source coordinates: endpoints map to endpoints exactly."""
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of an HxWxC image."""
    if out_h < 1 or out_w < 1:
        raise ContractViolationError(f"resize target {out_h}x{out_w} must be >= 1x1")
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = _resize_coords(h, out_h)
    xs = _resize_coords(w, out_w)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(image.dtype)
    fx = (xs - x0).astype(image.dtype)
    top = image[y0][:, x0] * (1 - fx)[None, :, None] + image[y0][:, x1] * fx[None, :, None]
    bot = image[y1][:, x0] * (1 - fx)[None, :, None] + image[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic convolution weights (a = -0.5) for |t| in [0, 2)."""
    a = -0.5
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t < 1
    far = (t >= 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bicubic interpolation (separable Keys kernel).

    Used for response-map upsampling; edges are clamped.
    """
    if out_h < 1 or out_w < 1:
        raise ContractViolationError(f"resize target {out_h}x{out_w} must be >= 1x1")
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        out = image.copy()
        return out[:, :, 0] if squeeze else out

    def axis_weights(n_in, n_out):
        coords = _resize_coords(n_in, n_out)
        base = np.floor(coords).astype(np.intp)
        frac = coords - base
        taps = base[:, None] + np.arange(-1, 3)[None, :]
        weights = _cubic_kernel(frac[:, None] - np.arange(-1, 3)[None, :])
        taps = np.clip(taps, 0, n_in - 1)
        return taps, weights.astype(image.dtype)

    ty, wy = axis_weights(h, out_h)
    tx, wx = axis_weights(w, out_w)
    # Interpolate rows then columns.
    rows = (image[ty] * wy[:, :, None, None]).sum(axis=1)          # (out_h, w, c)
    cols = (rows[:, tx] * wx[None, :, :, None]).sum(axis=2)        # (out_h, out_w, c)
    return cols[:, :, 0] if squeeze else cols


def ensure_finite(x: np.ndarray, context: str) -> np.ndarray:
    """Raise NumericError when an array contains NaN or Inf."""
    from .errors import NumericError

    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {context}")
    return x
