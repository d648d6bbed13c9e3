"""Gradient and orthogonality verification suites used by the CLI and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import network as net
from . import tensor as T
from .data import orthogonality_sweep
from .gradcheck import finite_diff_report

GRAD_TOLERANCE = 1e-4
ORTHO_TOLERANCE = 0.05


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    n_skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRAD_TOLERANCE


def _t(rng, *shape, low=-1.0, high=1.0) -> T.Tensor:
    return T.Tensor(rng.uniform(low, high, size=shape), dtype=np.float64)


def _away_from_zero(rng, *shape, margin=0.1) -> T.Tensor:
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return T.Tensor(x, dtype=np.float64)


def _distinct(rng, *shape) -> T.Tensor:
    # a random permutation of well-separated values: no pooling ties within eps
    n = int(np.prod(shape))
    return T.Tensor(rng.permutation(np.linspace(-1.0, 1.0, n)).reshape(shape), dtype=np.float64)


def _weighted_sum(rng, shape) -> Callable[[T.Tensor], T.Tensor]:
    """Random linear read-out so each output coordinate gets a distinct upstream gradient."""
    probe = T.Tensor(rng.uniform(-1.0, 1.0, size=shape), dtype=np.float64)

    def readout(y: T.Tensor) -> T.Tensor:
        flat = T.reshape(y, (1, -1))
        w = T.reshape(probe, (1, -1))
        return T.tsum(T.linear(flat, w, T.Tensor(np.zeros(1), dtype=np.float64)))

    return readout


def op_checks(seed: int = 0) -> list[tuple[str, Callable[[], object]]]:
    """(name, thunk) pairs; each thunk returns a FiniteDiffReport for one op input."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, Callable[[], object]]] = []

    def add(name, fn, x):
        checks.append((name, lambda fn=fn, x=x: finite_diff_report(fn, x)))

    x4 = _t(rng, 2, 3, 5, 6)
    w33 = _t(rng, 4, 3, 3, 3)
    b4 = _t(rng, 4)
    w11 = _t(rng, 4, 3)
    r_conv = _weighted_sum(rng, (2, 4, 5, 6))
    r_conv_s2 = _weighted_sum(rng, (2, 4, 3, 3))
    r_same = _weighted_sum(rng, (2, 3, 5, 6))

    add("conv2d_fixed3x3[sobel_x]", lambda x: r_same(T.conv2d_fixed3x3(x, net.SOBEL_X)), x4)
    add("conv2d_fixed3x3[sobel_y]", lambda x: r_same(T.conv2d_fixed3x3(x, net.SOBEL_Y)), x4)
    add("conv1x1.x", lambda x: r_conv(T.conv1x1(x, w11, b4)), x4)
    add("conv1x1.w", lambda w: r_conv(T.conv1x1(x4, w, b4)), w11)
    add("conv1x1.b", lambda b: r_conv(T.conv1x1(x4, w11, b)), b4)
    add("conv1x1[stride2].x", lambda x: r_conv_s2(T.conv1x1(x, w11, b4, stride=2)), x4)
    add("conv3x3.x", lambda x: r_conv(T.conv3x3(x, w33, b4)), x4)
    add("conv3x3.w", lambda w: r_conv(T.conv3x3(x4, w, b4)), w33)
    add("conv3x3.b", lambda b: r_conv(T.conv3x3(x4, w33, b)), b4)
    add("conv3x3[stride2].x", lambda x: r_conv_s2(T.conv3x3(x, w33, b4, stride=2)), x4)
    add("conv3x3[stride2].w", lambda w: r_conv_s2(T.conv3x3(x4, w, b4, stride=2)), w33)
    add("relu", lambda x: r_same(T.relu(x)), _away_from_zero(rng, 2, 3, 5, 6))
    add("maxpool2", lambda x: _weighted_sum(np.random.default_rng(seed), (2, 3, 2, 3))(T.maxpool2(x)),
        _distinct(rng, 2, 3, 5, 6))
    r_gap = _weighted_sum(rng, (2, 3, 1, 1))
    add("global_avg_pool", lambda x: r_gap(T.global_avg_pool(x)), x4)
    other = _t(rng, 2, 2, 5, 6)
    r_cat = _weighted_sum(rng, (2, 5, 5, 6))
    add("concat_channels.first", lambda x: r_cat(T.concat_channels([x, other])), x4)
    add("concat_channels.second", lambda o: r_cat(T.concat_channels([x4, o])), other)
    y4 = _t(rng, 2, 3, 5, 6)
    add("sub.a", lambda a: r_same(T.sub(a, y4)), x4)
    add("sub.b", lambda b: r_same(T.sub(x4, b)), y4)
    add("add", lambda a: r_same(T.add(a, y4)), x4)
    add("scale", lambda a: r_same(T.scale(a, -1.7)), x4)
    x2 = _t(rng, 4, 5)
    wl = _t(rng, 3, 5)
    bl = _t(rng, 3)
    r_lin = _weighted_sum(rng, (4, 3))
    add("linear.x", lambda x: r_lin(T.linear(x, wl, bl)), x2)
    add("linear.w", lambda w: r_lin(T.linear(x2, w, bl)), wl)
    add("linear.b", lambda b: r_lin(T.linear(x2, wl, b)), bl)
    labels = rng.integers(0, 3, size=4)
    add("softmax_xent", lambda z: T.softmax_xent(z, labels)[0], _t(rng, 4, 3, low=-3.0, high=3.0))
    return checks


def gradcheck_config() -> net.OffConfig:
    return net.OffConfig(
        levels=2,
        reduced_channels=2,
        blocks_per_level=1,
        classes=3,
        backbone_channels=(3, 4),
        trunk_channels=4,
    )


def network_checks(seed: int = 0, config: net.OffConfig | None = None) -> list[tuple[str, Callable[[], object]]]:
    """One check per parameter tensor of a 2-segment, 2-level network on 8x8 frames.

    The loss sums the cross-entropy of every OFF level and of the RGB stream,
    so every parameter is reached. Parameters (classifiers included) are drawn
    at random so no gradient is identically zero.
    """
    config = config or gradcheck_config()
    rng = np.random.default_rng(seed)
    params = {
        k: T.Tensor(rng.uniform(-0.5, 0.5, size=v.shape), dtype=np.float64)
        for k, v in net.init_params(config, seed).items()
    }
    segments = [T.Tensor(rng.random((2, config.in_channels, 8, 8)), dtype=np.float64) for _ in range(2)]
    labels = rng.integers(0, config.classes, size=2)

    def loss_for(name: str) -> Callable[[T.Tensor], T.Tensor]:
        def forward(value: T.Tensor) -> T.Tensor:
            local = dict(params)
            local[name] = value
            scores = net.network_forward(segments, local, config)
            terms = [T.softmax_xent(level, labels)[0] for level in scores.off]
            terms.append(T.softmax_xent(scores.rgb, labels)[0])
            return T.add_n(terms)

        return forward

    return [
        (f"network:{name}", lambda name=name: finite_diff_report(loss_for(name), params[name]))
        for name in params
    ]


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, thunk in op_checks(seed) + network_checks(seed):
        report = thunk()
        results.append(CheckResult(name, report.max_rel_error, report.n_checked, report.n_skipped))
    return results


@dataclass
class OrthoRow:
    sigma: float
    speed: float
    angle: float
    residual: float

    @property
    def passed(self) -> bool:
        return self.residual < ORTHO_TOLERANCE


def run_orthocheck(sigmas, speeds, directions: int = 8) -> tuple[list[OrthoRow], float]:
    start = time.perf_counter()
    rows = [OrthoRow(*r) for r in orthogonality_sweep(sigmas, speeds, directions)]
    return rows, time.perf_counter() - start
