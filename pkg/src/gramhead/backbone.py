"""CIFAR-style ResNet (6n+2 layers) producing the feature map consumed by heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, Tensor
from .errors import ConfigError, DimensionError


@dataclass
class BackboneConfig:
    depth: int = 20
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    num_stages: int = 3
    image_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.validate()

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6

    @property
    def final_size(self) -> int:
        return self.image_size // 2 ** (self.num_stages - 1)

    def validate(self) -> None:
        if self.depth < 8 or (self.depth - 2) % 6:
            raise ConfigError(f"depth must be 6n+2 with n >= 1, got {self.depth}")
        if self.num_stages != 3 or len(self.stage_channels) != 3:
            raise ConfigError("the CIFAR ResNet family has exactly 3 stages")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage_channels must be nondecreasing: {self.stage_channels}")
        if min(self.stage_channels) < 1 or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.image_size % 2 ** (self.num_stages - 1):
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4")


@dataclass
class StageFeatures:
    """Per-stage outputs; ``maps[-1]`` is the final feature map."""

    maps: list[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.maps[-1]


def tokens(fmap: Tensor) -> Tensor:
    """N x C x H x W -> N x HW x C token layout (row-major over positions)."""
    n, c, h, w = fmap.shape
    return ad.transpose(fmap, (0, 2, 3, 1)).reshape(n, h * w, c)


class Backbone:
    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormStats] = {}
        self.training = True
        self._rng = np.random.default_rng([seed, 0])
        self._blocks: list[tuple[str, int, bool]] = []

        self._conv("stem.conv", config.in_channels, config.stem_channels, 3)
        self._norm("stem.bn", config.stem_channels)
        c_in = config.stem_channels
        for s, c_out in enumerate(config.stage_channels):
            for b in range(config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                name = f"stages.{s}.blocks.{b}"
                self._conv(f"{name}.conv1", c_in, c_out, 3)
                self._norm(f"{name}.bn1", c_out)
                self._conv(f"{name}.conv2", c_out, c_out, 3)
                self._norm(f"{name}.bn2", c_out)
                project = stride != 1 or c_in != c_out
                if project:
                    self._conv(f"{name}.short.conv", c_in, c_out, 1)
                    self._norm(f"{name}.short.bn", c_out)
                self._blocks.append((name, stride, project))
                c_in = c_out
        del self._rng

    def _conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        std = np.sqrt(2.0 / (c_in * k * k))
        w = self._rng.standard_normal((c_out, c_in, k, k)) * std
        self.params[name] = ad.parameter(w, dtype=self.dtype)

    def _norm(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = ad.parameter(np.ones(c), dtype=self.dtype)
        self.params[f"{name}.beta"] = ad.parameter(np.zeros(c), dtype=self.dtype)
        self.bn[name] = BatchNormStats(c, self.dtype)

    @property
    def num_blocks(self) -> int:
        return len(self._blocks)

    def _bn(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        return ad.batchnorm2d(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], self.training)

    def _block(self, x: Tensor, name: str, stride: int, project: bool) -> Tensor:
        p = self.params
        out = ad.conv2d(x, p[f"{name}.conv1"], stride=stride, padding=1)
        out = ad.relu(self._bn(out, f"{name}.bn1"))
        out = ad.conv2d(out, p[f"{name}.conv2"], stride=1, padding=1)
        out = self._bn(out, f"{name}.bn2")
        if project:
            short = self._bn(ad.conv2d(x, p[f"{name}.short.conv"], stride=stride), f"{name}.short.bn")
        else:
            short = x
        return ad.relu(out + short)

    def forward(self, images: Tensor) -> StageFeatures:
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(f"backbone expects N x {expected[0]} x {expected[1]} x {expected[2]}, got {images.shape}")
        x = ad.conv2d(images, self.params["stem.conv"], stride=1, padding=1)
        x = ad.relu(self._bn(x, "stem.bn"))
        maps = []
        per = cfg.blocks_per_stage
        for i, (name, stride, project) in enumerate(self._blocks):
            x = self._block(x, name, stride, project)
            if (i + 1) % per == 0:
                maps.append(x)
        return StageFeatures(maps)

    __call__ = forward


def build_backbone(config: BackboneConfig, seed: int = 0, dtype=np.float32) -> Backbone:
    return Backbone(config, seed=seed, dtype=dtype)


def backbone_forward(backbone: Backbone, images: Tensor) -> StageFeatures:
    return backbone.forward(images)


class StageAggregator:
    """1x1 projections that lift earlier stages to the final channel count."""

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 2])
        final_c = config.stage_channels[-1]
        self.params: dict[str, Tensor] = {}
        for s, c in enumerate(config.stage_channels[:-1]):
            w = rng.standard_normal((final_c, c, 1, 1)) / np.sqrt(c)
            self.params[f"proj.{s}"] = ad.parameter(w, dtype=dtype)


def aggregate_stages(
    features: StageFeatures, mode: str = "final", aggregator: StageAggregator | None = None
) -> Tensor:
    """Token tensor N x HW x C for the heads.

    ``final`` returns the last stage's tokens.  ``multi`` average-pools every
    earlier stage down to the final resolution, projects it to the final
    channel count and sums everything.
    """
    if mode == "final":
        return tokens(features.final)
    if mode != "multi":
        raise ConfigError(f"aggregation mode must be 'final' or 'multi', got {mode!r}")
    if aggregator is None:
        raise ConfigError("multi-level aggregation needs a StageAggregator")
    final = features.final
    acc = final
    for s, fmap in enumerate(features.maps[:-1]):
        k = fmap.shape[2] // final.shape[2]
        pooled = ad.avg_pool2d(fmap, k) if k > 1 else fmap
        acc = acc + ad.conv2d(pooled, aggregator.params[f"proj.{s}"])
    return tokens(acc)
