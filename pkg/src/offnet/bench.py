"""Forward-only throughput of the backbone with and without the OFF sub-network."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import InvalidArgumentError
from .network import FeaturePyramid, OffConfig, backbone_forward, level_classifier, off_subnetwork, subset
from .tensor import Tensor

BENCH_COLUMNS = ("config", "fps_backbone", "fps_off", "ratio")


@dataclass
class BenchResult:
    config: str
    fps_backbone: float
    fps_off: float

    @property
    def ratio(self) -> float:
        return self.fps_off / self.fps_backbone

    def row(self) -> list[str]:
        return [self.config, f"{self.fps_backbone:.3f}", f"{self.fps_off:.3f}", f"{self.ratio:.4f}"]


def describe(config: OffConfig, size: int) -> str:
    return (
        f"levels={config.levels} C_r={config.reduced_channels} blocks={config.blocks_per_level} "
        f"trunk={config.trunk_width} size={size}"
    )


def _backbone_only(frames: Tensor, params, config: OffConfig) -> None:
    pyr = backbone_forward(frames, params, config)
    level_classifier(pyr[config.levels - 1], subset(params, "rgb.fc"))


def _with_off(frames: Tensor, params, config: OffConfig) -> None:
    pyr = backbone_forward(frames, params, config)
    level_classifier(pyr[config.levels - 1], subset(params, "rgb.fc"))
    # the n frames form n-1 adjacent pairs, processed as one batch
    prev = FeaturePyramid([Tensor(f.data[:-1]) for f in pyr.levels])
    nxt = FeaturePyramid([Tensor(f.data[1:]) for f in pyr.levels])
    outputs, _ = off_subnetwork(prev, nxt, config, params)
    for level, feat in enumerate(outputs):
        level_classifier(feat, subset(params, f"off.l{level}.fc"))


def _best_time(fn, repeat: int) -> float:
    fn()  # warmup
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run_bench(
    params: Mapping[str, Tensor],
    config: OffConfig,
    frames: int = 32,
    size: int = 32,
    repeat: int = 3,
    seed: int = 0,
) -> BenchResult:
    if repeat < 1:
        raise InvalidArgumentError(f"repeat must be at least 1, got {repeat}")
    if frames < 2:
        raise InvalidArgumentError(f"need at least 2 frames to form a pair, got {frames}")
    rng = np.random.default_rng(seed)
    batch = Tensor(rng.random((frames, config.in_channels, size, size), dtype=np.float32))
    t_backbone = _best_time(lambda: _backbone_only(batch, params, config), repeat)
    t_off = _best_time(lambda: _with_off(batch, params, config), repeat)
    return BenchResult(describe(config, size), frames / t_backbone, frames / t_off)
