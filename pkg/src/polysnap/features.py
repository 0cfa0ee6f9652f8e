"""Multi-scale crop encoder and per-vertex feature sampling.

A small strided conv backbone feeds a top-down pathway with lateral
connections (three levels at strides 4/8/16 of the crop by default).  The
levels are each narrowed by two pointwise convolutions, bilinearly
upsampled back to crop resolution, concatenated, and extended with two
fixed coordinate channels.  Vertex embeddings are bilinear point samples
of that fused map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class FeatureConfig:
    """Encoder hyperparameters. Crop is square with power-of-two side."""

    crop_size: int = 128
    in_channels: int = 3
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (32, 48, 64)
    fpn_width: int = 32
    lateral_width: int = 16

    def __post_init__(self):
        c = self.crop_size
        if c < 32 or (c & (c - 1)) != 0:
            raise ValueError(f"crop_size must be a power of two >= 32, got {c}")
        if len(self.stage_widths) < 1:
            raise ValueError("need at least one pyramid stage")

    @property
    def levels(self) -> int:
        return len(self.stage_widths)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(4 * (2 ** i) for i in range(self.levels))

    @property
    def fused_channels(self) -> int:
        # lateral-narrowed levels stacked, plus the two coordinate channels
        return self.levels * self.lateral_width + 2


# per-channel normalization applied to [0, 1] crops before the stem
NORM_MEAN = 0.5
NORM_STD = 0.25


def _he_conv(rng, cout, cin, k, dtype):
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)


def init_feature_params(cfg: FeatureConfig, rng: np.random.Generator,
                        dtype=np.float32, zero_output: bool = False) -> dict[str, Tensor]:
    """Seeded parameter dict for encode/fuse.

    zero_output zero-fills the per-level output convolutions, which makes the
    whole pyramid (and everything fused from it) exactly zero.
    """
    p: dict[str, Tensor] = {}

    def conv(name, cout, cin, k, zero=False):
        w = np.zeros((cout, cin, k, k), dtype=dtype) if zero else _he_conv(rng, cout, cin, k, dtype)
        p[f"{name}.w"] = ad.parameter(w)
        p[f"{name}.b"] = ad.parameter(np.zeros(cout, dtype=dtype))

    conv("encoder.stem.conv1", cfg.stem_width, cfg.in_channels, 3)
    conv("encoder.stem.conv2", cfg.stem_width, cfg.stem_width, 3)
    prev = cfg.stem_width
    for s, w in enumerate(cfg.stage_widths):
        conv(f"encoder.stage{s}.conv1", w, prev, 3)
        conv(f"encoder.stage{s}.conv2", w, w, 3)
        prev = w
    for s, w in enumerate(cfg.stage_widths):
        conv(f"encoder.lateral{s}", cfg.fpn_width, w, 1)
        conv(f"encoder.out{s}", cfg.fpn_width, cfg.fpn_width, 3, zero=zero_output)
        conv(f"fuse.narrow{s}.conv1", cfg.lateral_width, cfg.fpn_width, 1)
        conv(f"fuse.narrow{s}.conv2", cfg.lateral_width, cfg.lateral_width, 1)
    return p


def feature_param_count(cfg: FeatureConfig) -> int:
    """Closed-form parameter count matching init_feature_params."""
    def conv(cout, cin, k):
        return cout * cin * k * k + cout

    total = conv(cfg.stem_width, cfg.in_channels, 3) + conv(cfg.stem_width, cfg.stem_width, 3)
    prev = cfg.stem_width
    for w in cfg.stage_widths:
        total += conv(w, prev, 3) + conv(w, w, 3)
        prev = w
    for w in cfg.stage_widths:
        total += conv(cfg.fpn_width, w, 1) + conv(cfg.fpn_width, cfg.fpn_width, 3)
        total += conv(cfg.lateral_width, cfg.fpn_width, 1) + conv(cfg.lateral_width, cfg.lateral_width, 1)
    return total


def _conv_block(p, name, x, stride):
    return ad.relu(ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=p[f"{name}.w"].shape[2] // 2))


def encode(params: dict[str, Tensor], cfg: FeatureConfig, crop: Tensor) -> list[Tensor]:
    """Encode a (3, H_c, W_c) crop in [0, 1] into pyramid levels.

    Returns one tensor per configured stage, finest first (stride 4).
    """
    if crop.shape != (cfg.in_channels, cfg.crop_size, cfg.crop_size):
        raise ad.ShapeError(
            f"encode: crop shape {crop.shape} does not match config "
            f"({cfg.in_channels}, {cfg.crop_size}, {cfg.crop_size})")
    x = ad.scale(ad.add(crop, Tensor(np.asarray(-NORM_MEAN, dtype=crop.dtype))), 1.0 / NORM_STD)
    x = _conv_block(params, "encoder.stem.conv1", x, 2)
    x = _conv_block(params, "encoder.stem.conv2", x, 1)
    stages = []
    for s in range(cfg.levels):
        x = _conv_block(params, f"encoder.stage{s}.conv1", x, 2)
        x = _conv_block(params, f"encoder.stage{s}.conv2", x, 1)
        stages.append(x)

    laterals = [ad.conv2d(stages[s], params[f"encoder.lateral{s}.w"],
                          params[f"encoder.lateral{s}.b"], stride=1, padding=0)
                for s in range(cfg.levels)]
    # top-down pathway: coarsest level flows into finer ones
    tops = [None] * cfg.levels
    tops[-1] = laterals[-1]
    for s in range(cfg.levels - 2, -1, -1):
        tops[s] = ad.add(laterals[s], ad.bilinear_upsample(tops[s + 1], factor=2))
    return [ad.conv2d(tops[s], params[f"encoder.out{s}.w"], params[f"encoder.out{s}.b"],
                      stride=1, padding=1) for s in range(cfg.levels)]


_coord_cache: dict[tuple[int, int, str], np.ndarray] = {}


def coord_channels(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Fixed (2, H, W) x/y ramps over pixel centers, normalized to [-1, 1]."""
    key = (h, w, np.dtype(dtype).str)
    ch = _coord_cache.get(key)
    if ch is None:
        xs = (2.0 * (np.arange(w) + 0.5) / w - 1.0).astype(dtype)
        ys = (2.0 * (np.arange(h) + 0.5) / h - 1.0).astype(dtype)
        ch = np.stack([np.tile(xs, (h, 1)), np.tile(ys[:, None], (1, w))])
        _coord_cache[key] = ch
    return ch


def fuse(params: dict[str, Tensor], cfg: FeatureConfig, pyramid: list[Tensor]) -> Tensor:
    """Narrow, upsample and stack pyramid levels; append coordinate channels.

    Output is (levels * lateral_width + 2, H_c, W_c) regardless of depth.
    """
    size = (cfg.crop_size, cfg.crop_size)
    ups = []
    for s, level in enumerate(pyramid):
        x = ad.relu(ad.conv2d(level, params[f"fuse.narrow{s}.conv1.w"],
                              params[f"fuse.narrow{s}.conv1.b"]))
        x = ad.conv2d(x, params[f"fuse.narrow{s}.conv2.w"], params[f"fuse.narrow{s}.conv2.b"])
        ups.append(ad.bilinear_upsample(x, size))
    coords = Tensor(coord_channels(*size, dtype=ups[0].dtype))
    return ad.concat(ups + [coords], axis=0)


def sample_vertex_embeddings(fmap: Tensor, vertices: Tensor) -> Tensor:
    """Bilinear samples of the fused map at vertex coordinates: (N, C+2)."""
    return ad.grid_sample(fmap, vertices)
