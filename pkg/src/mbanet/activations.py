"""ReLU, multi-bias activation (MBA), adaptive piecewise linear (APL) and maxout.

All functions take a batch axis first: ``x`` has shape ``(B, N, *spatial)``
where ``spatial`` is ``(H, W)`` after a convolution and empty after a fully
connected layer. Gradients at exact kinks are taken from the inactive side
(the subgradient 0).

MBA output channels are ordered ``n`` major, ``k`` minor: band ``(n, k)``
lives at channel ``n * K + k``. The weight layout of the layer consuming the
bands depends on this ordering.
"""

import numpy as np

from .tensor import ShapeError

__all__ = [
    "relu_forward",
    "relu_backward",
    "mba_forward",
    "mba_backward",
    "mba_param_count",
    "default_mba_biases",
    "apl_forward",
    "apl_backward",
    "apl_param_count",
    "maxout_forward",
    "maxout_backward",
]


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def _check_biases(x, biases):
    biases = np.asarray(biases)
    if biases.ndim != 2:
        raise ShapeError(f"MBA biases must be 2-D (N, K), got shape {biases.shape}")
    if x.ndim < 2 or x.shape[1] != biases.shape[0]:
        raise ShapeError(
            f"MBA biases cover {biases.shape[0]} channels but input has shape {x.shape}"
        )
    return biases


def _band_view(x, biases):
    # (B, N, 1, *spatial) + (N, K, 1...) -> (B, N, K, *spatial)
    extra = x.ndim - 2
    b = biases.reshape(biases.shape + (1,) * extra)
    return x[:, :, None] + b


def mba_forward(x, biases):
    """Decouple each of the ``N`` input channels into ``K`` band maps.

    Band ``(n, k)`` at element ``i`` is ``relu(x[n, i] + biases[n, k])``.
    Returns shape ``(B, N*K, *spatial)``.
    """
    biases = _check_biases(x, biases)
    z = _band_view(x, biases)
    out = np.maximum(z, 0)
    return out.reshape((x.shape[0], -1) + x.shape[2:])


def mba_backward(x, biases, grad_out):
    """Return ``(grad_x, grad_biases)`` for :func:`mba_forward`."""
    biases = _check_biases(x, biases)
    n, k = biases.shape
    expected = (x.shape[0], n * k) + x.shape[2:]
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != MBA output shape {expected}")
    g = grad_out.reshape((x.shape[0], n, k) + x.shape[2:])
    g = g * (_band_view(x, biases) > 0)
    grad_x = g.sum(axis=2)
    grad_b = g.sum(axis=(0,) + tuple(range(3, g.ndim)))
    return grad_x, grad_b


def mba_param_count(n_channels, k):
    return n_channels * k


def default_mba_biases(n_channels, k, spread=0.75, dtype=np.float64):
    """Evenly spaced initial biases in ``[-spread, spread]``, same for every channel.

    A single band starts at zero so that ``K=1`` reduces to a plain ReLU.
    """
    if k == 1:
        row = np.zeros(1)
    else:
        row = np.linspace(-spread, spread, k)
    return np.tile(row, (n_channels, 1)).astype(dtype)


def _check_apl(x, slopes, hinges):
    slopes = np.asarray(slopes)
    hinges = np.asarray(hinges)
    if slopes.shape != hinges.shape:
        raise ShapeError(f"APL slopes {slopes.shape} and hinges {hinges.shape} differ")
    if slopes.shape[1:] != x.shape[2:]:
        raise ShapeError(
            f"APL parameters cover spatial shape {slopes.shape[1:]}, input has {x.shape[2:]}"
        )
    return slopes, hinges


def apl_forward(x, slopes, hinges):
    """``relu(x) + sum_k slopes[k] * relu(hinges[k] - x)``.

    ``slopes`` and ``hinges`` have shape ``(K, *spatial)``: one value per band
    and location, shared by every channel. Channel count is preserved.
    """
    slopes, hinges = _check_apl(x, slopes, hinges)
    # (B, N, 1, *spatial) against (K, *spatial)
    t = np.maximum(hinges - x[:, :, None], 0)
    return np.maximum(x, 0) + (slopes * t).sum(axis=2)


def apl_backward(x, slopes, hinges, grad_out):
    """Return ``(grad_x, grad_slopes, grad_hinges)`` for :func:`apl_forward`."""
    slopes, hinges = _check_apl(x, slopes, hinges)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    d = hinges - x[:, :, None]
    active = d > 0
    g = grad_out[:, :, None]
    grad_x = grad_out * (x > 0) - (g * slopes * active).sum(axis=2)
    grad_slopes = (g * np.maximum(d, 0)).sum(axis=(0, 1))
    grad_hinges = (g * active).sum(axis=(0, 1)) * slopes
    return grad_x, grad_slopes, grad_hinges


def apl_param_count(k, height=1, width=1):
    return 2 * k * height * width


def maxout_forward(xs):
    """Elementwise max over the K stacked maps of ``xs`` (B, K, N, *spatial).

    Returns ``(out, argmax)``; ties select the first map.
    """
    xs = np.asarray(xs)
    if xs.ndim < 3 or xs.shape[1] == 0:
        raise ShapeError(f"maxout needs at least one stacked map, got shape {xs.shape}")
    arg = xs.argmax(axis=1)
    out = np.take_along_axis(xs, arg[:, None], axis=1)[:, 0]
    return out, arg


def maxout_backward(grad_out, argmax, k):
    onehot = argmax[:, None] == np.arange(k).reshape((1, k) + (1,) * (argmax.ndim - 1))
    return onehot * grad_out[:, None]
