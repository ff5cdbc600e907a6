"""Array numerics underneath the fusion network.

All functions take and return float64 numpy arrays in channel-first layout
([C, H, W], batch normalization uses [N, C, H, W]).  They never write to
their inputs; ``batch_norm`` is the one op with side effects, updating the
running statistics on its state object in train mode.  Each backward
companion is the exact chain-rule transpose of its forward map, which the
finite-difference suite verifies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigurationError,
    DegenerateStatisticsError,
    DimensionError,
    UsageError,
)
from .rng import SeededRng

__all__ = [
    "conv2d",
    "conv2d_backward",
    "avg_smooth",
    "avg_smooth_backward",
    "upsample",
    "batch_norm",
    "batch_norm_backward",
    "NormState",
    "relu",
    "sigmoid",
    "dropout",
]


def _as_float64(x, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Convolution


def _dilated_windows(padded: np.ndarray, k: int, dilation: int,
                     height: int, width: int) -> np.ndarray:
    """The k x k dilated taps at every output pixel, flattened for matmul.

    Returns shape (Cin * k * k, height * width) over the zero-padded input.
    """
    cin = padded.shape[0]
    win = np.empty((cin, k, k, height, width))
    for ty in range(k):
        for tx in range(k):
            win[:, ty, tx] = padded[:, ty * dilation:ty * dilation + height,
                                    tx * dilation:tx * dilation + width]
    return win.reshape(cin * k * k, height * width)


def _check_conv_args(x: np.ndarray, kernels: np.ndarray, dilation: int) -> None:
    cout, cin, kh, kw = kernels.shape
    if kh != kw:
        raise ConfigurationError(f"kernels must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {kh}")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ConfigurationError(f"dilation must be a positive integer, got {dilation!r}")
    if x.shape[0] != cin:
        raise DimensionError(
            f"input has {x.shape[0]} channels but kernels expect {cin}"
        )


def conv2d(x, kernels, bias, dilation: int = 1) -> np.ndarray:
    """Same-size 2-D convolution with zero padding and dilated taps.

    ``x`` is [Cin, H, W], ``kernels`` is [Cout, Cin, k, k] with odd k, and
    ``bias`` is [Cout].  Tap (ty, tx) of the kernel reads the input at
    (y + dilation*(ty - c), x + dilation*(tx - c)) with c = (k-1)//2, so the
    output keeps the input's spatial size and out-of-range taps contribute
    zero.
    """
    x = _as_float64(x, "input", 3)
    kernels = _as_float64(kernels, "kernels", 4)
    bias = _as_float64(bias, "bias", 1)
    _check_conv_args(x, kernels, dilation)
    cout, cin, k, _ = kernels.shape
    if bias.shape[0] != cout:
        raise DimensionError(f"bias has {bias.shape[0]} entries, expected {cout}")
    height, width = x.shape[1:]
    pad = (k - 1) // 2 * dilation
    padded = np.zeros((cin, height + 2 * pad, width + 2 * pad))
    padded[:, pad:pad + height, pad:pad + width] = x
    flat = _dilated_windows(padded, k, dilation, height, width)
    out = kernels.reshape(cout, cin * k * k) @ flat
    out = out.reshape(cout, height, width) + bias[:, None, None]
    return out


def conv2d_backward(grad_out, x, kernels, dilation: int = 1):
    """Gradients of :func:`conv2d` at (x, kernels).

    Returns ``(grad_x, grad_kernels, grad_bias)`` for the upstream gradient
    ``grad_out`` of shape [Cout, H, W].
    """
    grad_out = _as_float64(grad_out, "grad_out", 3)
    x = _as_float64(x, "input", 3)
    kernels = _as_float64(kernels, "kernels", 4)
    _check_conv_args(x, kernels, dilation)
    cout, cin, k, _ = kernels.shape
    height, width = x.shape[1:]
    if grad_out.shape != (cout, height, width):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match output ({cout}, {height}, {width})"
        )
    pad = (k - 1) // 2 * dilation
    padded = np.zeros((cin, height + 2 * pad, width + 2 * pad))
    padded[:, pad:pad + height, pad:pad + width] = x
    flat = _dilated_windows(padded, k, dilation, height, width)
    g2 = grad_out.reshape(cout, height * width)

    grad_kernels = (g2 @ flat.T).reshape(cout, cin, k, k)
    grad_bias = grad_out.sum(axis=(1, 2))

    spread = (kernels.reshape(cout, cin * k * k).T @ g2).reshape(cin, k, k, height, width)
    grad_padded = np.zeros_like(padded)
    for ty in range(k):
        for tx in range(k):
            grad_padded[:, ty * dilation:ty * dilation + height,
                        tx * dilation:tx * dilation + width] += spread[:, ty, tx]
    grad_x = grad_padded[:, pad:pad + height, pad:pad + width]
    return grad_x, grad_kernels, grad_bias


# ---------------------------------------------------------------------------
# Window-mean smoothing


def _window_reach(d: int) -> tuple[int, int]:
    """Offsets covered by a d-wide window: -before .. +after inclusive."""
    before = d // 2
    after = d - 1 - before
    return before, after


def _box_sum(x: np.ndarray, before: int, after: int):
    """Clamped window sums over the two trailing axes.

    Output pixel (y, x) sums inputs over rows [y-before, y+after] and the
    same column range, intersected with the array bounds.  Returns the sums
    and the per-pixel count of in-bounds contributors.
    """
    channels, height, width = x.shape
    integral = np.zeros((channels, height + 1, width + 1))
    integral[:, 1:, 1:] = x.cumsum(axis=1).cumsum(axis=2)

    def bounds(n: int):
        idx = np.arange(n)
        lo = np.maximum(idx - before, 0)
        hi = np.minimum(idx + after, n - 1)
        return lo, hi

    ylo, yhi = bounds(height)
    xlo, xhi = bounds(width)
    sums = (
        integral[:, (yhi + 1)[:, None], (xhi + 1)[None, :]]
        - integral[:, ylo[:, None], (xhi + 1)[None, :]]
        - integral[:, (yhi + 1)[:, None], xlo[None, :]]
        + integral[:, ylo[:, None], xlo[None, :]]
    )
    counts = (yhi - ylo + 1)[:, None] * (xhi - xlo + 1)[None, :]
    return sums, counts.astype(np.float64)


def _check_window(d) -> None:
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ConfigurationError(f"window size must be a positive integer, got {d!r}")


def avg_smooth(x, d: int) -> np.ndarray:
    """Mean over a d x d window around each pixel, channel-wise.

    Odd ``d`` centers the window; even ``d`` covers offsets -d/2 .. d/2-1 on
    each axis.  At the borders the mean runs over the window's intersection
    with the image, so values are never diluted by padding.
    """
    x = _as_float64(x, "input", 3)
    _check_window(d)
    if d == 1:
        return x.copy()
    before, after = _window_reach(d)
    sums, counts = _box_sum(x, before, after)
    return sums / counts


def avg_smooth_backward(grad_out, d: int) -> np.ndarray:
    """Gradient of :func:`avg_smooth`: the transpose of the window mean."""
    grad_out = _as_float64(grad_out, "grad_out", 3)
    _check_window(d)
    if d == 1:
        return grad_out.copy()
    before, after = _window_reach(d)
    _, counts = _box_sum(np.zeros_like(grad_out), before, after)
    # Input pixel u feeds output y whenever u is inside y's window, i.e.
    # y in [u-after, u+before]: the reflected window.
    sums, _ = _box_sum(grad_out / counts, after, before)
    return sums


# ---------------------------------------------------------------------------
# Upsampling


def _bilinear_axis(n: int, factor: int):
    """Clamped source index pairs and fractions for one upsampled axis."""
    pos = (np.arange(n * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, float(n - 1))
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return lo, hi, frac


def upsample(x, factor: int, mode: str = "nearest") -> np.ndarray:
    """Scale the two trailing axes up by an integer factor.

    ``nearest`` replicates each coarse cell into a factor x factor block.
    ``bilinear`` interpolates between coarse-cell centers with edge clamping,
    so fine pixel (y, x) reads coarse position ((y+0.5)/factor - 0.5, ...).
    """
    x = _as_float64(x, "input", 3)
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigurationError(f"factor must be a positive integer, got {factor!r}")
    if mode == "nearest":
        return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)
    if mode == "bilinear":
        _, height, width = x.shape
        ylo, yhi, fy = _bilinear_axis(height, factor)
        xlo, xhi, fx = _bilinear_axis(width, factor)
        wy = fy[None, :, None]
        wx = fx[None, None, :]
        top = (1.0 - wx) * x[:, ylo][:, :, xlo] + wx * x[:, ylo][:, :, xhi]
        bottom = (1.0 - wx) * x[:, yhi][:, :, xlo] + wx * x[:, yhi][:, :, xhi]
        return (1.0 - wy) * top + wy * bottom
    raise ConfigurationError(f"unknown upsample mode {mode!r}")


# ---------------------------------------------------------------------------
# Batch normalization


@dataclass
class NormState:
    """Learnable scale/shift plus running statistics for one normalization."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def initial(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.9) -> "NormState":
        if channels < 1:
            raise ConfigurationError(f"channel count must be positive, got {channels}")
        if epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x, state: NormState, mode: str = "train"):
    """Normalize [N, C, H, W] per channel and apply the learned scale/shift.

    Train mode normalizes with the batch's own mean and population variance
    and folds them into the running statistics (EMA with the state's
    momentum); eval mode normalizes with the stored running statistics.
    Returns ``(output, cache)`` where the cache backs
    :func:`batch_norm_backward` and is None in eval mode.
    """
    x = _as_float64(x, "input", 4)
    if x.shape[1] != state.channels:
        raise DimensionError(
            f"input has {x.shape[1]} channels but the state tracks {state.channels}"
        )
    if mode == "train":
        n, _, height, width = x.shape
        if n * height * width < 2:
            raise DegenerateStatisticsError(
                "train-mode normalization needs at least 2 values per channel"
            )
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat = centered * inv_std[None, :, None, None]
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
        cache = (xhat, inv_std)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        cache = None
    else:
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = state.gamma[None, :, None, None] * xhat + state.beta[None, :, None, None]
    return out, cache


def batch_norm_backward(grad_out, cache, state: NormState):
    """Gradients of train-mode :func:`batch_norm`.

    Returns ``(grad_x, grad_gamma, grad_beta)``.  The input gradient folds in
    the dependence of the batch statistics on the input itself.
    """
    if cache is None:
        raise UsageError("batch_norm_backward needs the cache from a train-mode call")
    grad_out = _as_float64(grad_out, "grad_out", 4)
    xhat, inv_std = cache
    if grad_out.shape != xhat.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match the cached batch {xhat.shape}"
        )
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gh = grad_out * state.gamma[None, :, None, None]
    mean_gh = gh.mean(axis=(0, 2, 3), keepdims=True)
    mean_gh_xhat = (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_x = inv_std[None, :, None, None] * (gh - mean_gh - xhat * mean_gh_xhat)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Elementwise ops


def relu(x) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function, elementwise.

    The output is clamped to the largest representable open interval inside
    (0, 1): float64 saturates the true sigmoid to exactly 0 or 1 for |x| in
    the high thirties, and downstream cross entropy needs strict interior
    values.
    """
    out = expit(np.asarray(x, dtype=np.float64))
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def dropout(x, rate: float, rng: SeededRng | None, mode: str = "train"):
    """Inverted dropout: zero with probability ``rate``, rescale survivors.

    Returns ``(output, keep_scale)`` where ``keep_scale`` is the mask already
    divided by the keep probability (multiply upstream gradients by it), or
    None when the op was an identity (eval mode or rate 0).
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x.copy(), None
    if mode != "train":
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout with a positive rate needs an rng")
    keep = rng.random(x.shape) >= rate
    keep_scale = keep.astype(np.float64) / (1.0 - rate)
    return x * keep_scale, keep_scale
