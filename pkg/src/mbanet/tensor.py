"""Dense numeric kernels: 2-D convolution, max pooling and matrix multiply.

Tensors are plain :class:`numpy.ndarray` objects in row-major (C) order.
Feature maps use the ``(batch, channels, height, width)`` layout; a single
``(channels, height, width)`` map is accepted anywhere a batch is and the
result comes back without the batch axis.

Every kernel has a hand-written backward pass. Reductions run through a
fixed sequence of numpy/BLAS calls, so identical inputs give bit-identical
outputs for a fixed BLAS thread count.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConvGeometry",
    "ShapeError",
    "conv2d_forward",
    "conv2d_backward",
    "im2col",
    "col2im",
    "maxpool2d",
    "maxpool2d_backward",
    "matmul",
    "matmul_backward",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    def output_size(self, height, width):
        q, s, p = self.kernel_size, self.stride, self.padding
        ho = (height + 2 * p - q) // s + 1
        wo = (width + 2 * p - q) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"kernel {q} with padding {p} does not fit a {height}x{width} input"
            )
        return ho, wo

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)


def _as_batch(x, name="x"):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be 3-D (C,H,W) or 4-D (B,C,H,W), got shape {x.shape}")


def _check_conv(x, w, geometry):
    if w.shape != geometry.weight_shape:
        dims = ("out_channels", "in_channels", "kernel height", "kernel width")
        for d, got, want in zip(dims, w.shape, geometry.weight_shape):
            if got != want:
                raise ShapeError(f"weight {d} is {got}, geometry expects {want}")
        raise ShapeError(f"weight shape {w.shape} != {geometry.weight_shape}")
    if x.shape[1] != geometry.in_channels:
        raise ShapeError(
            f"input channel dimension is {x.shape[1]}, geometry expects "
            f"{geometry.in_channels}"
        )


def im2col(x, kernel_size, stride=1, padding=0):
    """Unfold ``x`` (B,C,H,W) into patches of shape (B, C*q*q, Ho*Wo).

    Row ``c*q*q + dy*q + dx`` of sample ``b`` holds input channel ``c`` seen
    through kernel tap ``(dy, dx)`` at every output position.
    """
    b, c, h, w = x.shape
    q = kernel_size
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (q, q), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (B,C,Ho,Wo,q,q) -> (B,C,q,q,Ho,Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * q * q, ho * wo)
    return cols, (ho, wo)


def col2im(cols, x_shape, kernel_size, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    b, c, h, w = x_shape
    q = kernel_size
    ho = (h + 2 * padding - q) // stride + 1
    wo = (w + 2 * padding - q) // stride + 1
    patches = cols.reshape(b, c, q, q, ho, wo)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    # fixed tap order keeps the accumulation deterministic
    for dy in range(q):
        ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
        for dx in range(q):
            xs = slice(dx, dx + stride * (wo - 1) + 1, stride)
            out[:, :, ys, xs] += patches[:, :, dy, dx]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d_forward(x, w, geometry, bias=None):
    """Cross-correlate ``x`` with ``w`` (no kernel flip).

    Returns an array of shape (B, M, Ho, Wo), or (M, Ho, Wo) for an
    unbatched input.
    """
    x, single = _as_batch(x)
    w = np.asarray(w)
    _check_conv(x, w, geometry)
    geometry.output_size(x.shape[2], x.shape[3])
    cols, (ho, wo) = im2col(x, geometry.kernel_size, geometry.stride, geometry.padding)
    out = conv_from_cols(cols, w, bias).reshape(x.shape[0], geometry.out_channels, ho, wo)
    return out[0] if single else out


def conv_from_cols(cols, w, bias=None):
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    if bias is not None:
        out += bias[:, None]
    return out


def conv2d_backward(x, w, grad_out, geometry, with_bias=False, cols=None):
    """Gradients of :func:`conv2d_forward` with respect to input and weight.

    ``grad_x`` is the transposed convolution of ``grad_out``; ``grad_w`` is
    the correlation of ``x`` with ``grad_out``. With ``with_bias`` a third
    item, the per-channel bias gradient, is returned. ``cols`` may carry the
    :func:`im2col` patches already computed in the forward pass.
    """
    x, single = _as_batch(x)
    grad_out = np.asarray(grad_out)
    if single:
        grad_out = grad_out[None]
    w = np.asarray(w)
    _check_conv(x, w, geometry)
    ho, wo = geometry.output_size(x.shape[2], x.shape[3])
    expected = (x.shape[0], geometry.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    q, s, p = geometry.kernel_size, geometry.stride, geometry.padding
    if cols is None:
        cols, _ = im2col(x, q, s, p)
    g = grad_out.reshape(x.shape[0], geometry.out_channels, ho * wo)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_cols = np.matmul(w.reshape(geometry.out_channels, -1).T, g)
    grad_x = col2im(grad_cols, x.shape, q, s, p)
    if single:
        grad_x = grad_x[0]
    if with_bias:
        return grad_x, grad_w, g.sum(axis=(0, 2))
    return grad_x, grad_w


def _pool_offsets(window):
    return [(dy, dx) for dy in range(window) for dx in range(window)]


def maxpool2d(x, window=2, stride=2):
    """Max pooling with floor truncation of ragged borders.

    Returns ``(out, argmax)`` where ``argmax`` holds, per output element, the
    row-major position inside its window of the selected input. Ties go to
    the first occurrence.
    """
    x, single = _as_batch(x)
    h, w = x.shape[2], x.shape[3]
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than {h}x{w} input")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = arg = None
    for pos, (dy, dx) in enumerate(_pool_offsets(window)):
        view = x[:, :, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride]
        if out is None:
            out = view.copy()
            arg = np.zeros(out.shape, dtype=np.int64)
        else:
            # strict comparison keeps the first occurrence on ties
            better = view > out
            out = np.where(better, view, out)
            arg[better] = pos
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool2d_backward(grad_out, argmax, x_shape, window=2, stride=2):
    """Route ``grad_out`` to the stored argmax positions; zeros elsewhere."""
    single = len(x_shape) == 3
    if single:
        grad_out, argmax, x_shape = grad_out[None], argmax[None], (1,) + tuple(x_shape)
    if argmax.shape != grad_out.shape:
        raise ShapeError(f"argmax shape {argmax.shape} != grad_out shape {grad_out.shape}")
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    for pos, (dy, dx) in enumerate(_pool_offsets(window)):
        ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
        xs = slice(dx, dx + stride * (wo - 1) + 1, stride)
        grad_x[:, :, ys, xs] += np.where(argmax == pos, grad_out, 0)
    return grad_x[0] if single else grad_x


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    return a @ b


def matmul_backward(a, b, grad_out):
    """Return ``(grad_a, grad_b)`` for ``out = a @ b``."""
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != ({a.shape[0]}, {b.shape[1]})"
        )
    return grad_out @ b.T, a.T @ grad_out
