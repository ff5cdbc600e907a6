"""Loss, optimizer step, training loop and mixing-input statistics.

Training is deliberately plain: full-image batches, stochastic gradient
descent, per-pixel binary cross entropy.  Everything is deterministic given
the training seed and the dataset order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, UsageError
from .network import (
    GROUP_BTEMP,
    FusionNetwork,
    backward,
    forward,
    named_parameters,
)
from .rng import SeededRng

__all__ = [
    "TrainConfig",
    "MixingStats",
    "NATIVE_GRID",
    "UPSAMPLED_GRID",
    "bce_loss",
    "sgd_step",
    "train",
    "collect_mixing_stats",
]

NATIVE_GRID = "native-grid"
UPSAMPLED_GRID = "upsampled-grid"

# Stream ids under the training seed.
_STREAM_SHUFFLE = 4
_STREAM_STEP = 5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int = 1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be at least 1, got {self.batch_size}")


def bce_loss(prob, label) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy over all pixels, plus its gradient.

    ``prob`` must lie strictly inside (0, 1) and ``label`` must be binary.
    The returned gradient is with respect to ``prob``; chained through the
    logistic function it collapses to the stable (p - y) / N form.
    """
    prob = np.asarray(prob, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if prob.shape != label.shape:
        raise DimensionError(f"prob {prob.shape} and label {label.shape} differ in shape")
    if not np.all((label == 0.0) | (label == 1.0)):
        raise DataError("labels must be 0 or 1")
    if not np.all((prob > 0.0) & (prob < 1.0)):
        raise DataError("probabilities must lie strictly inside (0, 1)")
    n = prob.size
    loss = float(-(label * np.log(prob) + (1.0 - label) * np.log1p(-prob)).mean())
    grad = (prob - label) / (n * prob * (1.0 - prob))
    return loss, grad


def sgd_step(net: FusionNetwork, grads: dict[str, np.ndarray], learning_rate: float) -> FusionNetwork:
    """One in-place gradient descent update: p <- p - lr * g.

    A zero learning rate is allowed and leaves every parameter unchanged.
    Normalization running statistics are untouched; they only move inside
    train-mode forward passes.  Returns the same network for chaining.
    """
    if learning_rate < 0.0:
        raise ConfigurationError(f"learning rate must be non-negative, got {learning_rate}")
    params = named_parameters(net)
    names = {name for name, _ in params}
    unknown = set(grads) - names
    if unknown:
        raise UsageError(f"gradients name unknown parameters: {sorted(unknown)}")
    for name, value in params:
        g = grads.get(name)
        if g is None:
            raise UsageError(f"missing gradient for parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != value.shape:
            raise UsageError(
                f"gradient for {name!r} has shape {g.shape}, expected {value.shape}"
            )
        value -= learning_rate * g
    net.version += 1
    return net


def _check_scenes(net: FusionNetwork, scenes) -> None:
    if not scenes:
        raise UsageError("at least one scene is required")
    first = scenes[0]
    for scene in scenes:
        if scene.sar.shape != first.sar.shape or scene.mwr.shape != first.mwr.shape:
            raise DimensionError("all scenes must share one grid geometry")


def train(net: FusionNetwork, scenes, cfg: TrainConfig) -> tuple[FusionNetwork, list[float]]:
    """Optimize the network in place over the scene list.

    Scenes are visited one per forward/backward pass; with batch_size > 1
    gradients are averaged over that many consecutive scenes before each
    update.  Returns the network and the mean per-scene loss of every epoch.
    """
    _check_scenes(net, scenes)
    root = SeededRng(cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        if cfg.shuffle:
            order = root.derive(_STREAM_SHUFFLE, epoch).permutation(len(scenes))
        else:
            order = np.arange(len(scenes))
        losses = []
        pending: dict[str, np.ndarray] = {}
        pending_count = 0
        for pos, scene_index in enumerate(order):
            scene = scenes[int(scene_index)]
            step_rng = root.derive(_STREAM_STEP, epoch, pos)
            fp = forward(net, scene.sar, scene.mwr, mode="train", rng=step_rng,
                         keep_cache=True)
            loss, grad_prob = bce_loss(fp.prob, scene.label)
            losses.append(loss)
            grads = backward(net, fp.cache, grad_prob)
            if cfg.batch_size == 1:
                sgd_step(net, grads, cfg.learning_rate)
                continue
            for name, g in grads.items():
                if name in pending:
                    pending[name] += g
                else:
                    pending[name] = g.copy()
            pending_count += 1
            if pending_count == cfg.batch_size or pos == len(order) - 1:
                mean_grads = {k: v / pending_count for k, v in pending.items()}
                sgd_step(net, mean_grads, cfg.learning_rate)
                pending = {}
                pending_count = 0
        history.append(float(np.mean(losses)))
    return net, history


@dataclass(frozen=True)
class MixingStats:
    """Per-input first and second moments of the mixing inputs.

    For the image-derived groups the moments pool every pixel of every scene
    on the fine grid.  For the btemp group they are computed on the native
    coarse grid of the (already normalized) mwr channels, before any
    upsampling; ``btemp_provenance`` records which grid each btemp entry
    actually came from.  Pixel counts are kept per grid.
    """

    mean: np.ndarray
    sigma: np.ndarray
    btemp_provenance: tuple[str, ...]
    fine_pixel_count: int
    native_pixel_count: int


def collect_mixing_stats(net: FusionNetwork, scenes, btemp_source: str = NATIVE_GRID) -> MixingStats:
    """Pool mixing-input statistics over a dataset with eval-mode forwards.

    ``btemp_source`` selects where the btemp moments come from: the native
    coarse grid (the supported analysis path) or the upsampled fine grid,
    which exists so that the downstream refusal of such statistics can be
    demonstrated.  Standard deviations are population standard deviations.
    """
    _check_scenes(net, scenes)
    if btemp_source not in (NATIVE_GRID, UPSAMPLED_GRID):
        raise UsageError(f"btemp_source must be {NATIVE_GRID!r} or {UPSAMPLED_GRID!r}")
    cfg = net.config
    d_total = cfg.mixing_width
    m = cfg.mwr_channels
    scale_width = d_total - m

    sums = np.zeros(d_total)
    sq_sums = np.zeros(d_total)
    lows = np.full(d_total, np.inf)
    highs = np.full(d_total, -np.inf)
    fine_count = 0
    native_count = 0
    for scene in scenes:
        fp = forward(net, scene.sar, scene.mwr, mode="eval")
        if btemp_source == NATIVE_GRID:
            values = [fp.mixing_inputs[:scale_width], scene.mwr]
        else:
            values = [fp.mixing_inputs[:scale_width], fp.mixing_inputs[scale_width:]]
        for block, sel in zip(values, (slice(0, scale_width), slice(scale_width, d_total))):
            sums[sel] += block.sum(axis=(1, 2))
            sq_sums[sel] += (block**2).sum(axis=(1, 2))
            lows[sel] = np.minimum(lows[sel], block.min(axis=(1, 2)))
            highs[sel] = np.maximum(highs[sel], block.max(axis=(1, 2)))
        fine_count += fp.mixing_inputs.shape[1] * fp.mixing_inputs.shape[2]
        native_count += scene.mwr.shape[1] * scene.mwr.shape[2]

    counts = np.full(d_total, float(fine_count))
    if btemp_source == NATIVE_GRID:
        counts[scale_width:] = float(native_count)
    mean = sums / counts
    variance = np.maximum(sq_sums / counts - mean**2, 0.0)
    # A channel that never varies has zero variance by definition; do not let
    # accumulation roundoff leak into it.
    variance[lows == highs] = 0.0
    return MixingStats(
        mean=mean,
        sigma=np.sqrt(variance),
        btemp_provenance=(btemp_source,) * m,
        fine_pixel_count=fine_count,
        native_pixel_count=native_count,
    )
