"""The OFF network: feature backbone, OFF sub-network, classifiers and score fusion.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names such as
``off.l1.block0.conv1.w``. The backbone and its RGB classifier use the
``backbone.`` and ``rgb.`` prefixes; everything under ``off.`` belongs to the
OFF sub-network and is what stage-2 training optimizes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, InvalidShapeError
from .tensor import (
    Tensor,
    add,
    add_n,
    concat_channels,
    conv1x1,
    conv2d_fixed3x3,
    conv3x3,
    global_avg_pool,
    linear,
    maxpool2,
    relu,
    reshape,
    scale,
    sub,
)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -1.0, -1.0]])

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class OffConfig:
    levels: int = 3
    reduced_channels: int = 32
    blocks_per_level: int = 2
    classes: int = 8
    ablate_off_layer: bool = False
    in_channels: int = 1
    # backbone width per level; empty means 16 at level 0 and 32 above
    backbone_channels: tuple[int, ...] = ()
    # 0 means 2 * reduced_channels
    trunk_channels: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError(f"levels must be >= 1, got {self.levels}")
        if self.reduced_channels < 1:
            raise ConfigurationError(f"reduced_channels must be >= 1, got {self.reduced_channels}")
        if self.blocks_per_level < 1:
            raise ConfigurationError(f"blocks_per_level must be >= 1, got {self.blocks_per_level}")
        if self.classes < 2:
            raise ConfigurationError(f"classes must be >= 2, got {self.classes}")
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.backbone_channels and len(self.backbone_channels) != self.levels:
            raise ConfigurationError(
                f"backbone_channels lists {len(self.backbone_channels)} widths for {self.levels} levels"
            )
        if self.trunk_channels < 0:
            raise ConfigurationError(f"trunk_channels must be >= 0, got {self.trunk_channels}")

    @property
    def level_channels(self) -> tuple[int, ...]:
        if self.backbone_channels:
            return tuple(self.backbone_channels)
        return tuple(16 if level == 0 else 32 for level in range(self.levels))

    @property
    def trunk_width(self) -> int:
        return self.trunk_channels or 2 * self.reduced_channels

    def off_channels(self) -> int:
        """Channels the OFF layer contributes to a unit's input."""
        return self.reduced_channels if self.ablate_off_layer else 3 * self.reduced_channels


@dataclass
class FeaturePyramid:
    levels: list[Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]


@dataclass
class OffFeature:
    fx: Tensor
    fy: Tensor
    ft: Tensor

    def parts(self) -> list[Tensor]:
        return [self.fx, self.fy, self.ft]


@dataclass
class ScoreSet:
    """Logits per stream. ``off_pairs[l][t]`` is G_{t,l}; ``off[l]`` is G_l."""

    rgb_segments: list[Tensor] = field(default_factory=list)
    rgb: Tensor | None = None
    off_pairs: list[list[Tensor]] = field(default_factory=list)
    off: list[Tensor] = field(default_factory=list)

    def fused(self) -> Tensor:
        if self.rgb is None or not self.off:
            raise InvalidArgumentError("fusion needs both the RGB and the OFF stream")
        return fuse_streams([self.rgb, self.off[-1]])


# --------------------------------------------------------------------------
# parameter initialisation
# --------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    # variance-preserving through relu; sqrt(1/fan_in) shrinks activations ~0.4x per layer
    a = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-a, a, size=shape).astype(np.float32), requires_grad=True)


def _conv_params(rng, prefix: str, cout: int, cin: int, k: int) -> dict[str, Tensor]:
    fan_in = cin * k * k
    wshape = (cout, cin) if k == 1 else (cout, cin, k, k)
    return {
        f"{prefix}.w": _uniform(rng, wshape, fan_in),
        f"{prefix}.b": Tensor(np.zeros(cout, np.float32), requires_grad=True),
    }


def _classifier_params(prefix: str, classes: int, dim: int) -> dict[str, Tensor]:
    # zero init: uniform class probabilities at step 0
    return {
        f"{prefix}.w": Tensor(np.zeros((classes, dim), np.float32), requires_grad=True),
        f"{prefix}.b": Tensor(np.zeros(classes, np.float32), requires_grad=True),
    }


def _block_params(rng, prefix: str, cin: int, cout: int, stride: int) -> dict[str, Tensor]:
    p = {}
    p.update(_conv_params(rng, f"{prefix}.conv1", cout, cin, 3))
    p.update(_conv_params(rng, f"{prefix}.conv2", cout, cout, 3))
    if stride != 1 or cin != cout:
        p.update(_conv_params(rng, f"{prefix}.proj", cout, cin, 1))
    return p


def init_backbone_params(config: OffConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Backbone convolutions plus the RGB-stream classifier."""
    params: dict[str, Tensor] = {}
    cin = config.in_channels
    for level, cout in enumerate(config.level_channels):
        params.update(_conv_params(rng, f"backbone.l{level}", cout, cin, 3))
        cin = cout
    params.update(_classifier_params("rgb.fc", config.classes, cin))
    return params


def init_off_params(config: OffConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    width = config.trunk_width
    for level, feat_ch in enumerate(config.level_channels):
        pre = f"off.l{level}"
        if level > 0:
            params.update(_block_params(rng, f"{pre}.down", width, width, stride=2))
        params.update(_conv_params(rng, f"{pre}.reduce", config.reduced_channels, feat_ch, 1))
        cin = config.off_channels() + (width if level > 0 else 0)
        for k in range(config.blocks_per_level):
            params.update(_block_params(rng, f"{pre}.block{k}", cin, width, stride=1))
            cin = width
        params.update(_classifier_params(f"{pre}.fc", config.classes, width))
    return params


def init_params(config: OffConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = init_backbone_params(config, rng)
    params.update(init_off_params(config, rng))
    return params


def subset(params: Params, prefix: str) -> dict[str, Tensor]:
    """Entries under ``prefix.`` with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# --------------------------------------------------------------------------
# OFF layer
# --------------------------------------------------------------------------


def spatial_gradient_x(f: Tensor) -> Tensor:
    return conv2d_fixed3x3(f, SOBEL_X)


def spatial_gradient_y(f: Tensor) -> Tensor:
    return conv2d_fixed3x3(f, SOBEL_Y)


def temporal_gradient(f_t: Tensor, f_prev: Tensor) -> Tensor:
    return sub(f_t, f_prev)


def reduce_channels(feat: Tensor, reduce_params: Params) -> Tensor:
    return conv1x1(feat, reduce_params["w"], reduce_params["b"])


def off_layer(feat_a: Tensor, feat_b: Tensor, reduce_params: Params) -> OffFeature:
    """OFF of the segment pair (a, b): Sobel of reduced a, and reduced b minus reduced a.

    Both segments go through the same 1x1 reduction and no nonlinearity follows it.
    """
    if feat_a.shape != feat_b.shape:
        raise InvalidShapeError(f"off_layer: segment features differ, {feat_a.shape} vs {feat_b.shape}")
    r_a = reduce_channels(feat_a, reduce_params)
    r_b = reduce_channels(feat_b, reduce_params)
    return OffFeature(spatial_gradient_x(r_a), spatial_gradient_y(r_a), temporal_gradient(r_b, r_a))


# --------------------------------------------------------------------------
# refinement trunk
# --------------------------------------------------------------------------


def residual_block(x: Tensor, params: Params, stride: int = 1) -> Tensor:
    """relu(conv2(relu(conv1(x))) + shortcut(x)); no normalization."""
    if stride not in (1, 2):
        raise ConfigurationError(f"residual_block: stride must be 1 or 2, got {stride}")
    h = relu(conv3x3(x, params["conv1.w"], params["conv1.b"], stride=stride))
    h = conv3x3(h, params["conv2.w"], params["conv2.b"])
    if "proj.w" in params:
        shortcut = conv1x1(x, params["proj.w"], params["proj.b"], stride=stride)
    elif stride == 1 and x.shape[1] == h.shape[1]:
        shortcut = x
    else:
        raise ConfigurationError("residual_block: changing stride or width needs a projection")
    return relu(add(h, shortcut))


def off_unit(
    feat_a: Tensor,
    feat_b: Tensor,
    trunk_in: Tensor | None,
    level_params: Params,
    config: OffConfig,
) -> Tensor:
    if trunk_in is not None and trunk_in.shape[2:] != feat_a.shape[2:]:
        raise InvalidShapeError(
            f"off_unit: trunk input {trunk_in.shape} does not match level features {feat_a.shape}"
        )
    reduce_params = subset(level_params, "reduce")
    if config.ablate_off_layer:
        if feat_a.shape != feat_b.shape:
            raise InvalidShapeError(f"off_unit: segment features differ, {feat_a.shape} vs {feat_b.shape}")
        parts = [reduce_channels(feat_a, reduce_params)]
    else:
        parts = off_layer(feat_a, feat_b, reduce_params).parts()
    if trunk_in is not None:
        parts.append(trunk_in)
    x = concat_channels(parts)
    for k in range(config.blocks_per_level):
        x = residual_block(x, subset(level_params, f"block{k}"))
    return x


def off_subnetwork(
    pyramid_a: FeaturePyramid,
    pyramid_b: FeaturePyramid,
    config: OffConfig,
    params: Params,
) -> tuple[list[Tensor], Tensor]:
    """Chain OFF units from the finest level to the coarsest.

    Returns the trunk output of every level (each gets a classifier) and
    the final one.
    """
    if len(pyramid_a) != config.levels or len(pyramid_b) != config.levels:
        raise ConfigurationError(
            f"off_subnetwork: expected {config.levels} levels, got {len(pyramid_a)} and {len(pyramid_b)}"
        )
    outputs: list[Tensor] = []
    trunk = None
    for level in range(config.levels):
        level_params = subset(params, f"off.l{level}")
        if trunk is not None:
            trunk = residual_block(trunk, subset(level_params, "down"), stride=2)
        trunk = off_unit(pyramid_a[level], pyramid_b[level], trunk, level_params, config)
        outputs.append(trunk)
    return outputs, trunk


# --------------------------------------------------------------------------
# backbone and classification
# --------------------------------------------------------------------------


def backbone_forward(frame: Tensor, params: Params, config: OffConfig) -> FeaturePyramid:
    """conv3x3 + relu per level, with 2x2 max pooling before every level but the first."""
    factor = 2 ** (config.levels - 1)
    if frame.data.ndim != 4 or frame.shape[2] % factor or frame.shape[3] % factor:
        raise ConfigurationError(
            f"backbone_forward: frame {frame.shape} needs H, W divisible by {factor}"
        )
    levels = []
    x = frame
    for level in range(config.levels):
        if level > 0:
            x = maxpool2(x)
        x = relu(conv3x3(x, params[f"backbone.l{level}.w"], params[f"backbone.l{level}.b"]))
        levels.append(x)
    return FeaturePyramid(levels)


def level_classifier(feature: Tensor, params: Params) -> Tensor:
    pooled = global_avg_pool(feature)
    flat = reshape(pooled, (pooled.shape[0], pooled.shape[1]))
    return linear(flat, params["w"], params["b"])


def aggregate_segments(per_segment_logits: Sequence[Tensor]) -> Tensor:
    """Average the per-segment scores into one video-level score."""
    if not per_segment_logits:
        raise InvalidArgumentError("aggregate_segments: no segments")
    return scale(add_n(list(per_segment_logits)), 1.0 / len(per_segment_logits))


def fuse_streams(stream_scores: Sequence[Tensor]) -> Tensor:
    if not stream_scores:
        raise InvalidArgumentError("fuse_streams: no streams")
    return add_n(list(stream_scores))


def network_forward(
    segments: Sequence[Tensor],
    params: Params,
    config: OffConfig,
    streams: Sequence[str] = ("rgb", "off"),
) -> ScoreSet:
    """Scores of both streams for a batch of clips given as a list of segment frames.

    The OFF stream runs on every adjacent pair (t, t+1) of segments.
    """
    unknown = set(streams) - {"rgb", "off"}
    if unknown:
        raise InvalidArgumentError(f"network_forward: unknown streams {sorted(unknown)}")
    if not segments:
        raise InvalidArgumentError("network_forward: no segments")
    if "off" in streams and len(segments) < 2:
        raise InvalidArgumentError("network_forward: the OFF stream needs at least 2 segments")

    pyramids = [backbone_forward(seg, params, config) for seg in segments]
    scores = ScoreSet()
    if "rgb" in streams:
        rgb_params = subset(params, "rgb.fc")
        scores.rgb_segments = [level_classifier(p[config.levels - 1], rgb_params) for p in pyramids]
        scores.rgb = aggregate_segments(scores.rgb_segments)
    if "off" in streams:
        per_level: list[list[Tensor]] = [[] for _ in range(config.levels)]
        for t in range(len(pyramids) - 1):
            outputs, _ = off_subnetwork(pyramids[t], pyramids[t + 1], config, params)
            for level, feat in enumerate(outputs):
                per_level[level].append(level_classifier(feat, subset(params, f"off.l{level}.fc")))
        scores.off_pairs = per_level
        scores.off = [aggregate_segments(pair_logits) for pair_logits in per_level]
    return scores
