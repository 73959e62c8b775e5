"""U-Net and mU-Net layer graphs over the autodiff primitives.

Both variants share the encoder/decoder trunk: per stage, two 3x3
conv -> batch norm -> PReLU units with an identity addition around the pair
(1x1 projection when channel counts differ), 2x2 max pooling between
encoder stages, a learned 2x2 stride-2 transposed conv between decoder
stages, and a final 1x1 conv producing per-class score maps.

The mU-Net adds, at every stage above the deepest, a residual path (3x3
stride-2 transposed conv + PReLU applied to the pooled features) whose
output is subtracted from the encoder features, and a 3x3 conv + PReLU in
the skip whose output is what the decoder concatenates.  The plain U-Net
concatenates the raw encoder features instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    dropout,
    maxpool2x2,
    prelu,
    subtract,
    transposed_conv2d,
)

__all__ = [
    "NetworkConfig",
    "NetworkGraph",
    "SkipBlockState",
    "build_unet",
    "build_munet",
    "count_parameters",
]

_DTYPES = {"single": np.float32, "double": np.float64}


@dataclass
class NetworkConfig:
    """Geometry and width choices for one network instance."""

    variant: str = "munet"
    stages: int = 5
    base_features: int = 64
    in_channels: int = 1
    out_classes: int = 3
    input_extent: int = 512
    width_multiplier: Fraction = Fraction(1)
    precision: str = "single"

    def __post_init__(self):
        if self.variant not in ("unet", "munet"):
            raise ValueError(f"variant must be 'unet' or 'munet', got {self.variant!r}")
        if self.stages < 2:
            raise ValueError("at least 2 stages are required")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        self.width_multiplier = Fraction(self.width_multiplier)
        divisor = 2 ** (self.stages - 1)
        if self.input_extent % divisor:
            raise ValueError(
                f"input_extent {self.input_extent} not divisible by 2^(stages-1)={divisor}")
        for s in range(self.stages):
            w = self.base_features * self.width_multiplier * 2 ** s
            if w.denominator != 1 or w < 1:
                raise ValueError(
                    f"width_multiplier {self.width_multiplier} gives non-integral "
                    f"width {w} at stage {s + 1}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def feature_widths(self):
        """Per-stage feature counts, shallow to deep (doubling per stage)."""
        return [int(self.base_features * self.width_multiplier * 2 ** s)
                for s in range(self.stages)]


@dataclass
class SkipBlockState:
    """Intermediate signals of one mU-Net skip block, all detached."""

    encoder: Tensor      # features entering the block
    pooled: Tensor       # 2x2 max pool of encoder features
    residual: Tensor     # residual-path output (up-sampled pooled features)
    skip_input: Tensor   # encoder - residual, what the skip conv sees
    skip: Tensor         # skip conv output, what the decoder concatenates


class _ConvUnit:
    """conv 3x3 -> batch norm -> PReLU -> dropout."""

    def __init__(self, name, cin, cout, dtype, rng):
        self.name = name
        self.kernel = Parameter(_trunc_placeholder(rng, (cout, cin, 3, 3), dtype),
                                "conv-kernel", f"{name}.kernel")
        self.bias = Parameter(np.full(cout, 0.1, dtype=dtype), "bias", f"{name}.bias")
        self.bn_scale = Parameter(np.ones(cout, dtype=dtype), "bn-scale", f"{name}.bn_scale")
        self.bn_shift = Parameter(np.zeros(cout, dtype=dtype), "bn-shift", f"{name}.bn_shift")
        self.alpha = Parameter(np.full(cout, 0.25, dtype=dtype), "prelu-alpha",
                               f"{name}.alpha")
        self.bn_state = BatchNormState.fresh(cout, dtype=dtype)

    def params(self):
        return [self.kernel, self.bias, self.bn_scale, self.bn_shift, self.alpha]

    def __call__(self, x, ctx):
        h = conv2d(x, self.kernel, self.bias, 1, "same")
        h = batch_norm(h, self.bn_scale, self.bn_shift, ctx.mode, self.bn_state)
        h = prelu(h, self.alpha)
        return dropout(h, ctx.dropout_keep, ctx.mode, ctx.rng)


class _DoubleConvBlock:
    """Two conv units with an identity addition around the pair."""

    def __init__(self, name, cin, cout, dtype, rng):
        self.name = name
        self.unit1 = _ConvUnit(f"{name}.conv1", cin, cout, dtype, rng)
        self.unit2 = _ConvUnit(f"{name}.conv2", cout, cout, dtype, rng)
        if cin != cout:
            self.proj = Parameter(_trunc_placeholder(rng, (cout, cin, 1, 1), dtype),
                                  "conv-kernel", f"{name}.proj.kernel")
        else:
            self.proj = None

    def params(self):
        out = self.unit1.params() + self.unit2.params()
        if self.proj is not None:
            out.append(self.proj)
        return out

    def __call__(self, x, ctx):
        h = self.unit2(self.unit1(x, ctx), ctx)
        shortcut = x if self.proj is None else conv2d(x, self.proj, None, 1, "same")
        return add(h, shortcut)


class _ResidualPathUp:
    """Object-dependent up-sampling: 3x3 stride-2 transposed conv + PReLU."""

    def __init__(self, name, channels, dtype, rng):
        self.name = name
        self.kernel = Parameter(_trunc_placeholder(rng, (channels, channels, 3, 3), dtype),
                                "conv-kernel", f"{name}.kernel")
        self.bias = Parameter(np.full(channels, 0.1, dtype=dtype), "bias", f"{name}.bias")
        self.alpha = Parameter(np.full(channels, 0.25, dtype=dtype), "prelu-alpha",
                               f"{name}.alpha")

    def params(self):
        return [self.kernel, self.bias, self.alpha]

    def __call__(self, pooled, ctx):
        return prelu(transposed_conv2d(pooled, self.kernel, self.bias, 2), self.alpha)


class _SkipConv:
    """Skip-connection conv: one 3x3 conv + PReLU, feature count unchanged."""

    def __init__(self, name, channels, dtype, rng):
        self.name = name
        self.kernel = Parameter(_trunc_placeholder(rng, (channels, channels, 3, 3), dtype),
                                "conv-kernel", f"{name}.kernel")
        self.bias = Parameter(np.full(channels, 0.1, dtype=dtype), "bias", f"{name}.bias")
        self.alpha = Parameter(np.full(channels, 0.25, dtype=dtype), "prelu-alpha",
                               f"{name}.alpha")

    def params(self):
        return [self.kernel, self.bias, self.alpha]

    def __call__(self, x, ctx):
        return prelu(conv2d(x, self.kernel, self.bias, 1, "same"), self.alpha)


class _DecoderUp:
    """Learned 2x2 stride-2 transposed conv between decoder stages."""

    def __init__(self, name, cin, cout, dtype, rng):
        self.name = name
        self.kernel = Parameter(_trunc_placeholder(rng, (cin, cout, 2, 2), dtype),
                                "conv-kernel", f"{name}.kernel")
        self.bias = Parameter(np.full(cout, 0.1, dtype=dtype), "bias", f"{name}.bias")

    def params(self):
        return [self.kernel, self.bias]

    def __call__(self, x, ctx):
        return transposed_conv2d(x, self.kernel, self.bias, 2)


def _trunc_placeholder(rng, shape, dtype):
    # Shapes are fixed at build time; real values come from init_params.
    # A tiny deterministic fill keeps an un-initialized graph usable.
    return (0.01 * rng.standard_normal(shape)).astype(dtype)


@dataclass
class _ForwardCtx:
    mode: str
    rng: object = None
    dropout_keep: float = 1.0
    taps: dict = None
    residual_path_enabled: bool = True


class NetworkGraph:
    """An explicit U-Net or mU-Net layer graph with named parameter slots."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        widths = cfg.feature_widths()
        dtype = cfg.dtype
        rng = np.random.default_rng(0)

        self.encoders = []
        cin = cfg.in_channels
        for s, w in enumerate(widths, start=1):
            self.encoders.append(_DoubleConvBlock(f"enc{s}", cin, w, dtype, rng))
            cin = w

        n_skip = cfg.stages - 1
        if cfg.variant == "munet":
            self.residual_paths = [_ResidualPathUp(f"res{s}", widths[s - 1], dtype, rng)
                                   for s in range(1, n_skip + 1)]
            self.skip_convs = [_SkipConv(f"skip{s}", widths[s - 1], dtype, rng)
                               for s in range(1, n_skip + 1)]
        else:
            self.residual_paths = []
            self.skip_convs = []

        self.decoder_ups = [_DecoderUp(f"dec{s}.up", widths[s], widths[s - 1], dtype, rng)
                            for s in range(1, n_skip + 1)]
        self.decoders = [_DoubleConvBlock(f"dec{s}", 2 * widths[s - 1], widths[s - 1],
                                          dtype, rng)
                         for s in range(1, n_skip + 1)]

        self.final_kernel = Parameter(
            _trunc_placeholder(rng, (cfg.out_classes, widths[0], 1, 1), dtype),
            "conv-kernel", "final.kernel")
        self.final_bias = Parameter(np.full(cfg.out_classes, 0.1, dtype=dtype),
                                    "bias", "final.bias")

    # -- parameters -------------------------------------------------------

    def parameters(self):
        """All parameters in a stable, documented order."""
        out = []
        for block in self.encoders:
            out.extend(block.params())
        for rp in self.residual_paths:
            out.extend(rp.params())
        for sc in self.skip_convs:
            out.extend(sc.params())
        for up in self.decoder_ups:
            out.extend(up.params())
        for block in self.decoders:
            out.extend(block.params())
        out.extend([self.final_kernel, self.final_bias])
        return out

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def bn_states(self):
        states = []
        for block in self.encoders + self.decoders:
            states.extend([block.unit1.bn_state, block.unit2.bn_state])
        return states

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward ----------------------------------------------------------

    def forward(self, x, mode="eval", rng=None, dropout_keep=1.0, taps=None,
                residual_path_enabled=True):
        """Run the network; returns per-class score maps (B, classes, H, W).

        ``taps``, if given, is a dict filled with detached copies of the
        skip-block signals, keyed ``stage{s}.fm_b`` (features entering the
        skip) and ``stage{s}.fm_a`` (features right after the residual-path
        subtraction; equal to fm_b for the plain U-Net).
        ``residual_path_enabled=False`` bypasses the residual path while
        keeping the skip convs, for limiting-case comparisons.
        """
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=cfg.dtype))
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"forward: expected (B, {cfg.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] != cfg.input_extent or x.shape[3] != cfg.input_extent:
            raise ValueError(
                f"forward: expected {cfg.input_extent}x{cfg.input_extent} input, "
                f"got {x.shape[2]}x{x.shape[3]}")
        if mode == "train" and dropout_keep < 1.0 and rng is None:
            raise ValueError("forward: train mode with dropout requires an rng")

        ctx = _ForwardCtx(mode=mode, rng=rng, dropout_keep=dropout_keep, taps=taps,
                          residual_path_enabled=residual_path_enabled)
        skips = []
        c = x
        for s in range(cfg.stages):
            c = self.encoders[s](c, ctx)
            if s == cfg.stages - 1:
                break
            pooled = maxpool2x2(c)
            if taps is not None:
                taps[f"stage{s + 1}.fm_b"] = c.detach()
            if self.cfg.variant == "munet" and ctx.residual_path_enabled:
                cu = self.residual_paths[s](pooled, ctx)
                diff = subtract(c, cu)
            else:
                diff = c
            if taps is not None:
                taps[f"stage{s + 1}.fm_a"] = diff.detach()
            skip_out = self.skip_convs[s](diff, ctx) if self.cfg.variant == "munet" else diff
            skips.append(skip_out)
            c = pooled

        for s in range(cfg.stages - 2, -1, -1):
            up = self.decoder_ups[s](c, ctx)
            merged = concat_channels(skips[s], up)
            c = self.decoders[s](merged, ctx)

        return conv2d(c, self.final_kernel, self.final_bias, 1, "same")

    def tap_feature_maps(self, x, points):
        """Detached copies of named intermediate signals from an eval pass.

        Valid names are ``stage{s}.fm_b`` and ``stage{s}.fm_a`` for stages
        1 .. stages-1.
        """
        valid = {f"stage{s}.{k}" for s in range(1, self.cfg.stages)
                 for k in ("fm_b", "fm_a")}
        unknown = [p for p in points if p not in valid]
        if unknown:
            raise KeyError(f"unknown tap point(s) {unknown}; valid: {sorted(valid)}")
        taps = {}
        self.forward(x, mode="eval", taps=taps)
        return {p: taps[p] for p in points}

    def run_skip_block(self, stage, feats, mode="eval"):
        """Run one mU-Net skip block on given encoder features.

        ``stage`` is 1-based and must be above the deepest stage.  Returns a
        :class:`SkipBlockState` with every intermediate signal detached.
        """
        if self.cfg.variant != "munet":
            raise ValueError("run_skip_block: only the munet variant has skip blocks")
        if not 1 <= stage <= self.cfg.stages - 1:
            raise ValueError(f"run_skip_block: stage must be in 1..{self.cfg.stages - 1}")
        if not isinstance(feats, Tensor):
            feats = Tensor(np.asarray(feats, dtype=self.cfg.dtype))
        ctx = _ForwardCtx(mode=mode)
        pooled = maxpool2x2(feats)
        cu = self.residual_paths[stage - 1](pooled, ctx)
        diff = subtract(feats, cu)
        skip_out = self.skip_convs[stage - 1](diff, ctx)
        return SkipBlockState(encoder=feats.detach(), pooled=pooled.detach(),
                              residual=cu.detach(), skip_input=diff.detach(),
                              skip=skip_out.detach())

    # -- inspection -------------------------------------------------------

    def manifest(self):
        """Human-readable topology listing: layers, parameter shapes, counts."""
        cfg = self.cfg
        lines = [
            "munet-graph v1",
            f"variant={cfg.variant} stages={cfg.stages} base_features={cfg.base_features} "
            f"width_multiplier={cfg.width_multiplier} in_channels={cfg.in_channels} "
            f"out_classes={cfg.out_classes} input_extent={cfg.input_extent} "
            f"precision={cfg.precision}",
        ]
        groups = {}
        order = []
        for p in self.parameters():
            layer = p.name.rsplit(".", 1)[0]
            if layer not in groups:
                groups[layer] = []
                order.append(layer)
            groups[layer].append(p)
        for layer in order:
            parts = " ".join(f"{p.name.rsplit('.', 1)[1]}={p.role}{list(p.shape)}"
                             for p in groups[layer])
            count = sum(p.data.size for p in groups[layer])
            lines.append(f"layer {layer} {parts} params={count}")
        lines.append(f"total params={self.parameter_count()}")
        return "\n".join(lines) + "\n"

    def topology_hash(self):
        """Hash of the manifest; identifies variant + geometry, not values."""
        return hashlib.sha256(self.manifest().encode()).hexdigest()


def build_unet(cfg: NetworkConfig) -> NetworkGraph:
    """Baseline U-Net: plain concatenation skips, no residual path."""
    if cfg.variant != "unet":
        raise ValueError("build_unet: cfg.variant must be 'unet'")
    return NetworkGraph(cfg)


def build_munet(cfg: NetworkConfig) -> NetworkGraph:
    """mU-Net: residual-path up-sampling, subtraction, and skip convs."""
    if cfg.variant != "munet":
        raise ValueError("build_munet: cfg.variant must be 'munet'")
    return NetworkGraph(cfg)


def count_parameters(cfg: NetworkConfig) -> int:
    """Parameter count from geometry alone, without building the graph.

    Useful for full-size configurations whose arrays would be large; agrees
    with ``NetworkGraph.parameter_count`` on any buildable config.
    """
    widths = cfg.feature_widths()
    total = 0

    def conv_unit(cin, cout):
        # kernel + bias + bn scale/shift + alpha
        return 9 * cout * cin + cout + 2 * cout + cout

    def double_block(cin, cout):
        n = conv_unit(cin, cout) + conv_unit(cout, cout)
        if cin != cout:
            n += cout * cin  # 1x1 projection, no bias
        return n

    cin = cfg.in_channels
    for w in widths:
        total += double_block(cin, w)
        cin = w

    if cfg.variant == "munet":
        for w in widths[:-1]:
            total += 9 * w * w + w + w   # residual path: tconv + bias + alpha
            total += 9 * w * w + w + w   # skip conv: conv + bias + alpha

    for s in range(1, cfg.stages):
        total += 4 * widths[s] * widths[s - 1] + widths[s - 1]  # 2x2 up tconv
        total += double_block(2 * widths[s - 1], widths[s - 1])

    total += cfg.out_classes * widths[0] + cfg.out_classes
    return total
