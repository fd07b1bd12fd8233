"""Dense tensor kernel the rest of the package is built on.

Everything operates on plain numpy arrays in row-major order:
feature batches are ``(N, C, H, W)``, dense weights ``(out, in)``,
conv kernels ``(K, C, kh, kw)``.  Convolution is cross-correlation
(no kernel flip) with zero padding.  Public operations validate shapes
and raise ``NumericError`` instead of returning NaN/Inf.

Precision is carried by the array dtype: float32 for training, float64
for gradient-check paths.
"""

import numpy as np

from .errors import NumericError

DTYPES = {32: np.float32, 64: np.float64}


def dtype_for(precision):
    """Map a precision flag (32 or 64) to a numpy dtype."""
    try:
        return DTYPES[int(precision)]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {precision!r}")


def ensure_finite(x, what="result"):
    """Raise NumericError if x contains NaN or Inf; return x unchanged."""
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a, b):
    """Matrix product of a (r, k) and b (k, c)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return ensure_finite(a @ b, "matmul")


def _conv_out_hw(h, w, kh, kw, stride, padding):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold (N, C, H, W) into patch rows of shape (N*oh*ow, C*kh*kw).

    Row order is n-major, then output row, then output column, so a plain
    matmul against the flattened kernel realizes the convolution.
    """
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride=1, padding=0):
    """Adjoint of im2col: scatter-add patch rows back into (N, C, H, W)."""
    n, c, h, w = x_shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if padding:
        img = img[:, :, padding:padding + h, padding:padding + w]
    return img


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlate x (N, C, H, W) with kernel (K, C, kh, kw).

    Output is (N, K, H', W') with H' = floor((H + 2p - kh)/stride) + 1.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ck}")
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(k, -1).T
    out = out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2)
    return ensure_finite(np.ascontiguousarray(out), "conv2d")


def conv2d_transpose(grad_out, kernel, stride=1, padding=0, output_hw=None):
    """Exact adjoint of conv2d with the same kernel/stride/padding.

    For every x and g: <conv2d(x, k), g> == <x, conv2d_transpose(g, k)>.
    When stride > 1 the input height/width is ambiguous; pass output_hw
    to pin it (defaults to the smallest consistent size).
    """
    grad_out = np.asarray(grad_out)
    kernel = np.asarray(kernel)
    n, k, oh, ow = grad_out.shape
    k2, c, kh, kw = kernel.shape
    if k != k2:
        raise ValueError(f"filter-count mismatch: grad has {k}, kernel has {k2}")
    if output_hw is None:
        h = (oh - 1) * stride + kh - 2 * padding
        w = (ow - 1) * stride + kw - 2 * padding
    else:
        h, w = output_hw
    if _conv_out_hw(h, w, kh, kw, stride, padding) != (oh, ow):
        raise ValueError(
            f"grad_out {grad_out.shape} inconsistent with input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    dcol = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, k) @ kernel.reshape(k, -1)
    return ensure_finite(col2im(dcol, (n, c, h, w), kh, kw, stride, padding),
                         "conv2d_transpose")


def maxpool2d(x, window, stride):
    """Max pooling over (N, C, H, W); returns (output, argmax indices).

    Indices are flat positions into each H*W plane, used by the backward
    pass for gradient routing.  Ties break to the lowest flat index.
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} exceeds input {h}x{w}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    patches = np.empty((n, c, oh, ow, window * window), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            patches[..., i * window + j] = \
                x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    # Patch order is row-major within the window, so argmax's first-match
    # rule picks the lowest flat input index on ties.
    arg = patches.argmax(axis=-1)
    out = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + arg // window
    cols = np.arange(ow)[None, :] * stride + arg % window
    idx = rows * w + cols
    return ensure_finite(out, "maxpool2d"), idx.astype(np.int64)


def maxpool2d_backward(grad_out, idx, input_hw):
    """Scatter-add pooled gradients back through the recorded argmax routes."""
    n, c, oh, ow = grad_out.shape
    h, w = input_hw
    flat = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    rows = np.arange(n * c)[:, None]
    np.add.at(flat, (rows, idx.reshape(n * c, oh * ow)),
              grad_out.reshape(n * c, oh * ow))
    return flat.reshape(n, c, h, w)


def column_max(w):
    """Per-column maximum over rows of a (r, c) matrix; element j is
    max_i w[i, j]."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError(f"column_max expects a non-empty 2-D matrix, got shape {w.shape}")
    return w.max(axis=0)
