"""The multi-scale radar/radiometer fusion network.

The model is a bank of parallel views of one high-resolution radar image:

* a two-convolution linear stem whose output is both the finest-scale block
  of mixing inputs and the shared trunk every coarser branch reads from;
* one branch per dilation rate d, which first averages the trunk over a
  d x d window and then applies three blocks of two dilated convolutions
  each, interleaved with ReLU, batch normalization and dropout;
* the coarse radiometer channels, upsampled to the radar grid with no
  learned transform.

All blocks are concatenated into the mixing inputs and combined per pixel by
a single linear layer plus logistic function, so the final stage is an
ordinary logistic regression over named feature channels.  Gradients are
derived by hand; ``backward`` is the exact transpose of ``forward``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError, UsageError
from .rng import SeededRng

__all__ = [
    "GROUP_SCALE0",
    "GROUP_BTEMP",
    "scale_group_name",
    "InputGroup",
    "ModelConfig",
    "ConvLayer",
    "Branch",
    "FusionNetwork",
    "ForwardPass",
    "build",
    "forward",
    "backward",
    "named_parameters",
    "named_state",
]

GROUP_SCALE0 = "scale-0"
GROUP_BTEMP = "btemp"

# Stream ids for deriving per-layer randomness from one global seed.
_STREAM_STEM = 0
_STREAM_BRANCH = 1
_STREAM_MIXING = 2
_STREAM_DROPOUT = 3


def scale_group_name(dilation: int) -> str:
    return f"scale-{dilation}"


@dataclass(frozen=True)
class InputGroup:
    """A named contiguous block of mixing-input channels."""

    name: str
    start: int
    width: int

    @property
    def stop(self) -> int:
        return self.start + self.width


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``variant`` selects the published channel widths: ``small`` gives every
    group 14 channels, ``large`` widens the four dilated branches to 28.
    ``custom`` accepts any positive widths for toy models.
    """

    variant: str
    group_widths: dict[str, int]
    dilation_rates: tuple[int, ...] = (2, 4, 8, 16)
    kernel_size: int = 3
    stem_depth: int = 2
    branch_depth: int = 6
    dropout_rate: float = 0.1
    mixing_activation: str = "linear"
    upsample_mode: str = "bilinear"
    mwr_channels: int = 14
    mwr_factor: int = 16
    sar_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(d) for d in self.dilation_rates))
        if self.variant not in ("small", "large", "custom"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        rates = self.dilation_rates
        if not rates or any(d < 2 for d in rates) or any(
            b <= a for a, b in zip(rates, rates[1:])
        ):
            raise ConfigurationError(
                f"dilation rates must be strictly increasing and at least 2, got {rates}"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel_size}")
        if self.stem_depth < 1:
            raise ConfigurationError(f"stem depth must be positive, got {self.stem_depth}")
        if self.branch_depth < 2 or self.branch_depth % 2:
            raise ConfigurationError(
                f"branch depth must be a positive even number, got {self.branch_depth}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(
                f"dropout rate must lie in [0, 1), got {self.dropout_rate}"
            )
        if self.mixing_activation not in ("linear", "relu"):
            raise ConfigurationError(
                f"mixing activation must be 'linear' or 'relu', got {self.mixing_activation!r}"
            )
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ConfigurationError(
                f"upsample mode must be 'nearest' or 'bilinear', got {self.upsample_mode!r}"
            )
        if self.mwr_channels < 1 or self.mwr_factor < 1 or self.sar_channels < 1:
            raise ConfigurationError("channel counts and the grid factor must be positive")

        expected = [GROUP_SCALE0] + [scale_group_name(d) for d in rates] + [GROUP_BTEMP]
        if list(self.group_widths) != expected:
            raise ConfigurationError(
                f"group widths must name {expected} in order, got {list(self.group_widths)}"
            )
        if any(w < 1 for w in self.group_widths.values()):
            raise ConfigurationError("every group width must be positive")
        if self.group_widths[GROUP_BTEMP] != self.mwr_channels:
            raise ConfigurationError(
                "the btemp group width must equal the number of mwr channels"
            )
        if self.variant == "small":
            if any(w != 14 for w in self.group_widths.values()):
                raise ConfigurationError("the small variant uses width 14 for every group")
        if self.variant == "large":
            branch_names = [scale_group_name(d) for d in rates]
            if self.group_widths[GROUP_SCALE0] != 14 or self.group_widths[GROUP_BTEMP] != 14:
                raise ConfigurationError(
                    "the large variant uses width 14 for scale-0 and btemp"
                )
            if any(self.group_widths[name] != 28 for name in branch_names):
                raise ConfigurationError("the large variant uses width 28 for every branch")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        """Published configurations: ``small`` (all 14) or ``large`` (branches 28)."""
        if variant not in ("small", "large"):
            raise ConfigurationError(f"variant must be 'small' or 'large', got {variant!r}")
        rates = tuple(overrides.pop("dilation_rates", (2, 4, 8, 16)))
        mwr_channels = overrides.pop("mwr_channels", 14)
        if variant == "small" and mwr_channels != 14:
            raise ConfigurationError("the small variant fixes mwr_channels at 14")
        branch_width = 14 if variant == "small" else 28
        widths = {GROUP_SCALE0: 14}
        widths.update({scale_group_name(d): branch_width for d in rates})
        widths[GROUP_BTEMP] = mwr_channels
        return cls(
            variant=variant,
            group_widths=widths,
            dilation_rates=rates,
            mwr_channels=mwr_channels,
            **overrides,
        )

    @classmethod
    def custom(cls, scale0_width: int, branch_width: int, **overrides) -> "ModelConfig":
        """Toy configuration with uniform branch widths."""
        rates = tuple(overrides.pop("dilation_rates", (2, 4, 8, 16)))
        mwr_channels = overrides.pop("mwr_channels", 14)
        widths = {GROUP_SCALE0: scale0_width}
        widths.update({scale_group_name(d): branch_width for d in rates})
        widths[GROUP_BTEMP] = mwr_channels
        return cls(
            variant="custom",
            group_widths=widths,
            dilation_rates=rates,
            mwr_channels=mwr_channels,
            **overrides,
        )

    @property
    def groups(self) -> list[InputGroup]:
        """The mixing-input partition, in concatenation order."""
        out = []
        start = 0
        for name, width in self.group_widths.items():
            out.append(InputGroup(name, start, width))
            start += width
        return out

    @property
    def mixing_width(self) -> int:
        """Total number of mixing inputs (the logistic layer's fan-in)."""
        return sum(self.group_widths.values())

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "group_widths": dict(self.group_widths),
            "dilation_rates": list(self.dilation_rates),
            "kernel_size": self.kernel_size,
            "stem_depth": self.stem_depth,
            "branch_depth": self.branch_depth,
            "dropout_rate": self.dropout_rate,
            "mixing_activation": self.mixing_activation,
            "upsample_mode": self.upsample_mode,
            "mwr_channels": self.mwr_channels,
            "mwr_factor": self.mwr_factor,
            "sar_channels": self.sar_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        fields = dict(data)
        rates = tuple(int(r) for r in fields.get("dilation_rates", (2, 4, 8, 16)))
        fields["dilation_rates"] = rates
        # Serializers are free to reorder mapping keys (canonical JSON sorts
        # them), so rebuild the widths in canonical group order.
        widths = {str(k): int(v) for k, v in fields["group_widths"].items()}
        order = [GROUP_SCALE0] + [scale_group_name(r) for r in rates] + [GROUP_BTEMP]
        if sorted(widths) == sorted(order):
            widths = {name: widths[name] for name in order}
        fields["group_widths"] = widths
        return cls(**fields)


@dataclass
class ConvLayer:
    kernels: np.ndarray  # [Cout, Cin, k, k]
    bias: np.ndarray     # [Cout]


@dataclass
class Branch:
    dilation: int
    convs: list[ConvLayer]
    norms: list[ops.NormState]


@dataclass
class FusionNetwork:
    """Parameter container for one model instance.

    ``version`` counts parameter updates so that a forward cache can detect
    it has gone stale before being fed to ``backward``.
    """

    config: ModelConfig
    stem: list[ConvLayer]
    branches: list[Branch]
    mixing_coefficients: np.ndarray  # [D]
    mixing_bias: np.ndarray          # scalar, shape ()
    version: int = 0

    @property
    def groups(self) -> list[InputGroup]:
        return self.config.groups


@dataclass
class ForwardPass:
    """Everything a single forward evaluation produces."""

    prob: np.ndarray           # [1, H, W]
    mixing_inputs: np.ndarray  # [D, H, W]
    cache: "_Cache | None" = None


@dataclass
class _BranchCache:
    conv_inputs: list[np.ndarray]
    relu_masks: list[np.ndarray]
    norm_caches: list[tuple]
    drop_scales: list[np.ndarray | None]
    mix_mask: np.ndarray | None


@dataclass
class _Cache:
    mode: str
    net: FusionNetwork
    net_version: int
    stem_inputs: list[np.ndarray]
    branches: list[_BranchCache]
    mixing_inputs: np.ndarray
    prob: np.ndarray


def _init_conv(cin: int, cout: int, k: int, rng: SeededRng) -> ConvLayer:
    fan_in = cin * k * k
    bound = 1.0 / np.sqrt(fan_in)
    kernels = rng.uniform(-bound, bound, (cout, cin, k, k))
    return ConvLayer(kernels=kernels, bias=np.zeros(cout))


def build(config: ModelConfig, rng: SeededRng) -> FusionNetwork:
    """Construct a network with freshly initialized parameters.

    Kernels and mixing coefficients draw from a zero-mean uniform
    distribution scaled by 1/sqrt(fan-in); biases start at zero,
    normalization at identity.  Each layer consumes its own derived stream,
    so widening or deepening the model never disturbs other layers' draws.
    """
    if not isinstance(rng, SeededRng):
        raise UsageError("build needs a SeededRng")
    k = config.kernel_size
    stem_width = config.group_widths[GROUP_SCALE0]
    stem = []
    cin = config.sar_channels
    for i in range(config.stem_depth):
        stem.append(_init_conv(cin, stem_width, k, rng.derive(_STREAM_STEM, i)))
        cin = stem_width

    branches = []
    for b, d in enumerate(config.dilation_rates):
        width = config.group_widths[scale_group_name(d)]
        convs = []
        cin = stem_width
        for j in range(config.branch_depth):
            convs.append(_init_conv(cin, width, k, rng.derive(_STREAM_BRANCH, b, j)))
            cin = width
        norms = [ops.NormState.initial(width) for _ in range(config.branch_depth // 2)]
        branches.append(Branch(dilation=d, convs=convs, norms=norms))

    d_total = config.mixing_width
    bound = 1.0 / np.sqrt(d_total)
    coeffs = rng.derive(_STREAM_MIXING).uniform(-bound, bound, d_total)
    return FusionNetwork(
        config=config,
        stem=stem,
        branches=branches,
        mixing_coefficients=coeffs,
        mixing_bias=np.zeros(()),
    )


def _check_inputs(config: ModelConfig, sar: np.ndarray, mwr: np.ndarray) -> None:
    if sar.ndim != 3 or sar.shape[0] != config.sar_channels:
        raise DimensionError(
            f"sar must be [{config.sar_channels}, H, W], got shape {sar.shape}"
        )
    if mwr.ndim != 3 or mwr.shape[0] != config.mwr_channels:
        raise DimensionError(
            f"mwr must be [{config.mwr_channels}, h, w], got shape {mwr.shape}"
        )
    height, width = sar.shape[1:]
    f = config.mwr_factor
    if mwr.shape[1] * f != height or mwr.shape[2] * f != width:
        raise DimensionError(
            f"grids disagree: sar is {height}x{width} but mwr {mwr.shape[1]}x{mwr.shape[2]} "
            f"with factor {f}"
        )


def forward(
    net: FusionNetwork,
    sar,
    mwr,
    mode: str = "eval",
    rng: SeededRng | None = None,
    keep_cache: bool = False,
) -> ForwardPass:
    """Run the network on one scene.

    ``sar`` is [sar_channels, H, W], ``mwr`` is [mwr_channels, H/f, W/f].
    Train mode uses batch statistics (updating the running ones) and draws
    dropout masks from per-layer streams of ``rng``; eval mode is
    deterministic and needs no rng.  The returned mixing inputs are the
    concatenated feature blocks feeding the final logistic layer, with the
    btemp block equal to the upsampled mwr exactly.
    """
    sar = np.asarray(sar, dtype=np.float64)
    mwr = np.asarray(mwr, dtype=np.float64)
    cfg = net.config
    _check_inputs(cfg, sar, mwr)
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and cfg.dropout_rate > 0.0 and rng is None:
        raise UsageError("train-mode forward needs an rng for dropout")

    stem_inputs = []
    x = sar
    for layer in net.stem:
        stem_inputs.append(x)
        x = ops.conv2d(x, layer.kernels, layer.bias, dilation=1)
    tap = x  # the scale-0 block and the trunk all branches read

    blocks = [tap]
    branch_caches = []
    for b, branch in enumerate(net.branches):
        x = ops.avg_smooth(tap, branch.dilation)
        conv_inputs, relu_masks, norm_caches, drop_scales = [], [], [], []
        for j in range(len(branch.norms)):
            conv_inputs.append(x)
            x = ops.conv2d(x, branch.convs[2 * j].kernels, branch.convs[2 * j].bias,
                           dilation=branch.dilation)
            conv_inputs.append(x)
            x = ops.conv2d(x, branch.convs[2 * j + 1].kernels, branch.convs[2 * j + 1].bias,
                           dilation=branch.dilation)
            mask = x > 0.0
            relu_masks.append(mask)
            x = ops.relu(x)
            x, norm_cache = ops.batch_norm(x[None], branch.norms[j], mode=mode)
            x = x[0]
            norm_caches.append(norm_cache)
            site_rng = rng.derive(_STREAM_DROPOUT, b, j) if rng is not None else None
            x, scale = ops.dropout(x, cfg.dropout_rate, site_rng, mode=mode)
            drop_scales.append(scale)
        if cfg.mixing_activation == "relu":
            mix_mask = x > 0.0
            x = ops.relu(x)
        else:
            mix_mask = None
        blocks.append(x)
        branch_caches.append(_BranchCache(conv_inputs, relu_masks, norm_caches,
                                          drop_scales, mix_mask))

    blocks.append(ops.upsample(mwr, cfg.mwr_factor, mode=cfg.upsample_mode))
    mixing_inputs = np.concatenate(blocks, axis=0)

    logit = float(net.mixing_bias) + np.tensordot(
        net.mixing_coefficients, mixing_inputs, axes=([0], [0])
    )
    prob = ops.sigmoid(logit)[None]

    cache = None
    if keep_cache:
        cache = _Cache(
            mode=mode,
            net=net,
            net_version=net.version,
            stem_inputs=stem_inputs,
            branches=branch_caches,
            mixing_inputs=mixing_inputs,
            prob=prob,
        )
    return ForwardPass(prob=prob, mixing_inputs=mixing_inputs, cache=cache)


def backward(net: FusionNetwork, cache: _Cache, grad_prob) -> dict[str, np.ndarray]:
    """Hand-derived gradients of every parameter for one train-mode forward.

    ``grad_prob`` is the upstream gradient with respect to the returned
    probability map.  The result maps parameter names (as produced by
    :func:`named_parameters`) to arrays of matching shape.
    """
    if cache is None:
        raise UsageError("backward needs the cache of a train-mode forward")
    if cache.mode != "train":
        raise UsageError("backward requires a train-mode cache")
    if cache.net is not net or cache.net_version != net.version:
        raise UsageError("stale cache: the network changed since this forward ran")
    grad_prob = np.asarray(grad_prob, dtype=np.float64)
    if grad_prob.shape != cache.prob.shape:
        raise DimensionError(
            f"grad_prob shape {grad_prob.shape} does not match prob {cache.prob.shape}"
        )

    cfg = net.config
    p = cache.prob[0]
    grad_logit = grad_prob[0] * p * (1.0 - p)

    grads: dict[str, np.ndarray] = {}
    grads["mixing.bias"] = np.array(grad_logit.sum())
    grads["mixing.coefficients"] = np.tensordot(
        cache.mixing_inputs, grad_logit, axes=([1, 2], [0, 1])
    )
    grad_mix = net.mixing_coefficients[:, None, None] * grad_logit[None]

    groups = net.groups
    grad_tap = grad_mix[groups[0].start:groups[0].stop].copy()

    for b, branch in enumerate(net.branches):
        bc = cache.branches[b]
        grp = groups[1 + b]
        g = grad_mix[grp.start:grp.stop]
        if bc.mix_mask is not None:
            g = g * bc.mix_mask
        for j in reversed(range(len(branch.norms))):
            if bc.drop_scales[j] is not None:
                g = g * bc.drop_scales[j]
            g4, d_gamma, d_beta = ops.batch_norm_backward(g[None], bc.norm_caches[j],
                                                          branch.norms[j])
            g = g4[0]
            grads[f"branch.{branch.dilation}.norm{j}.gamma"] = d_gamma
            grads[f"branch.{branch.dilation}.norm{j}.beta"] = d_beta
            g = g * bc.relu_masks[j]
            g, d_k, d_b = ops.conv2d_backward(g, bc.conv_inputs[2 * j + 1],
                                              branch.convs[2 * j + 1].kernels,
                                              dilation=branch.dilation)
            grads[f"branch.{branch.dilation}.conv{2 * j + 1}.kernels"] = d_k
            grads[f"branch.{branch.dilation}.conv{2 * j + 1}.bias"] = d_b
            g, d_k, d_b = ops.conv2d_backward(g, bc.conv_inputs[2 * j],
                                              branch.convs[2 * j].kernels,
                                              dilation=branch.dilation)
            grads[f"branch.{branch.dilation}.conv{2 * j}.kernels"] = d_k
            grads[f"branch.{branch.dilation}.conv{2 * j}.bias"] = d_b
        grad_tap += ops.avg_smooth_backward(g, branch.dilation)

    g = grad_tap
    for i in reversed(range(len(net.stem))):
        g, d_k, d_b = ops.conv2d_backward(g, cache.stem_inputs[i], net.stem[i].kernels,
                                          dilation=1)
        grads[f"stem.{i}.kernels"] = d_k
        grads[f"stem.{i}.bias"] = d_b
    return grads


def named_parameters(net: FusionNetwork) -> list[tuple[str, np.ndarray]]:
    """Learnable arrays in a fixed, checkpoint-stable order."""
    out = []
    for i, layer in enumerate(net.stem):
        out.append((f"stem.{i}.kernels", layer.kernels))
        out.append((f"stem.{i}.bias", layer.bias))
    for branch in net.branches:
        d = branch.dilation
        for j, conv in enumerate(branch.convs):
            out.append((f"branch.{d}.conv{j}.kernels", conv.kernels))
            out.append((f"branch.{d}.conv{j}.bias", conv.bias))
        for j, norm in enumerate(branch.norms):
            out.append((f"branch.{d}.norm{j}.gamma", norm.gamma))
            out.append((f"branch.{d}.norm{j}.beta", norm.beta))
    out.append(("mixing.coefficients", net.mixing_coefficients))
    out.append(("mixing.bias", net.mixing_bias))
    return out


def named_state(net: FusionNetwork) -> list[tuple[str, np.ndarray]]:
    """Non-learnable arrays (normalization running statistics)."""
    out = []
    for branch in net.branches:
        d = branch.dilation
        for j, norm in enumerate(branch.norms):
            out.append((f"branch.{d}.norm{j}.running_mean", norm.running_mean))
            out.append((f"branch.{d}.norm{j}.running_var", norm.running_var))
    return out
