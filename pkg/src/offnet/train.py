"""Two-stage training, SGD with momentum, and evaluation with stream fusion."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import VideoDataset, test_sample_indices, train_sample_indices
from .errors import ConfigurationError, InvalidArgumentError, InvalidShapeError
from .network import OffConfig, fuse_streams, init_backbone_params, init_off_params, network_forward
from .tensor import Tape, Tensor, add_n, scale, softmax_xent

log = logging.getLogger(__name__)

METRIC_LEVEL_COLUMNS = 3


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    base_lr: float = 0.02
    lr_milestones: tuple[int, ...] = (1000, 1500, 1800)
    momentum: float = 0.9
    batch_size: int = 16
    total_iters: int = 2000
    alpha: int = 3
    beta: int = 5
    seed: int = 0
    # empty means weight 1.0 on every level
    intermediate_loss_weights: tuple[float, ...] = ()
    # rescale the gradient when its global L2 norm exceeds this; 0 disables
    grad_clip_norm: float = 0.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ConfigurationError("batch_size and total_iters must be >= 1")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError(f"lr_milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 0 or ms[-1] >= self.total_iters):
            raise ConfigurationError(f"lr_milestones must lie in [0, total_iters), got {ms}")
        if self.grad_clip_norm < 0:
            raise ConfigurationError(f"grad_clip_norm must be >= 0, got {self.grad_clip_norm}")
        if not 1 <= self.alpha <= self.beta:
            raise ConfigurationError(f"need 1 <= alpha <= beta, got alpha={self.alpha} beta={self.beta}")

    def level_weights(self, levels: int) -> tuple[float, ...]:
        if not self.intermediate_loss_weights:
            return (1.0,) * levels
        if len(self.intermediate_loss_weights) != levels:
            raise ConfigurationError(
                f"{len(self.intermediate_loss_weights)} loss weights given for {levels} levels"
            )
        return self.intermediate_loss_weights


# full-scale stage-2 schedule for RGB input; the desk defaults above are a 10x shrink
FULL_SCALE_STAGE2 = TrainConfig(
    stage=2,
    base_lr=0.02,
    lr_milestones=(10000, 15000, 18000),
    total_iters=20000,
    batch_size=128,
)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """base_lr times 0.1 per milestone already reached (a milestone counts from its own iteration)."""
    passed = sum(1 for m in config.lr_milestones if m <= iteration)
    return config.base_lr * 0.1**passed


def sgd_momentum_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[Mapping[str, Tensor], dict[str, np.ndarray]]:
    """v <- momentum * v + g ; p <- p - lr * v, for every name in ``grads``."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InvalidShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(name)
        if v is not None and v.shape != p.shape:
            raise InvalidShapeError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v = np.asarray(g, dtype=np.float64) if v is None else momentum * v + g
        velocity[name] = v
        p.data = (p.data.astype(np.float64) - lr * v).astype(p.dtype)
    return params, velocity


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm == 0`` only measures.
    """
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def metrics_header(levels: int = METRIC_LEVEL_COLUMNS) -> list[str]:
    n = max(levels, METRIC_LEVEL_COLUMNS)
    return ["iter", "stage", "lr", "loss_total", *[f"loss_l{k}" for k in range(n)], "train_acc", "grad_norm"]


class _BatchSampler:
    """Shuffled passes over the clips; one frame seed per clip per draw."""

    def __init__(self, dataset: VideoDataset, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.order = np.empty(0, dtype=np.int64)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.dataset)
        bs = min(self.config.batch_size, n)
        if self.order.size < bs:
            self.order = np.concatenate([self.order, self.rng.permutation(n)])
        clip_ids, self.order = self.order[:bs], self.order[bs:]
        L = self.dataset.clip_length
        frame_ids = np.array(
            [train_sample_indices(L, self.config.alpha, self.config.beta, self.rng) for _ in clip_ids]
        )
        return clip_ids, frame_ids


def _check_dataset(dataset: VideoDataset, off_config: OffConfig) -> None:
    if dataset.num_classes != off_config.classes or dataset.labels.max() >= off_config.classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes, network is configured for {off_config.classes}"
        )
    if dataset.frames.shape[2] != off_config.in_channels:
        raise ConfigurationError(
            f"dataset frames have {dataset.frames.shape[2]} channels, network expects {off_config.in_channels}"
        )


def _config_echo(off_config: OffConfig, train_config: TrainConfig) -> dict[str, str]:
    from .config import dataclass_items

    echo = dataclass_items(off_config)
    echo.update(dataclass_items(train_config))
    return echo


def _run(
    params: dict[str, Tensor],
    trainable: Sequence[str],
    dataset: VideoDataset,
    off_config: OffConfig,
    train_config: TrainConfig,
    metrics_path: str | Path | None,
) -> list[dict[str, float]]:
    stage = train_config.stage
    streams = ("rgb",) if stage == 1 else ("off",)
    weights = train_config.level_weights(off_config.levels)
    sampler = _BatchSampler(dataset, train_config)
    velocity: dict[str, np.ndarray] = {}
    for name, p in params.items():
        p.requires_grad = name in trainable
        p.grad = None

    rows = []
    header = metrics_header(off_config.levels)
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(header)
    try:
        for it in range(train_config.total_iters):
            lr = lr_at(it, train_config)
            clip_ids, frame_ids = sampler.next()
            labels = dataset.labels[clip_ids]
            segments = dataset.segments(clip_ids, frame_ids)
            with Tape() as tape:
                scores = network_forward(segments, params, off_config, streams=streams)
                if stage == 1:
                    loss, probs = softmax_xent(scores.rgb, labels)
                    level_losses = []
                else:
                    terms, level_losses = [], []
                    for level, logits in enumerate(scores.off):
                        level_loss, probs = softmax_xent(logits, labels)
                        level_losses.append(level_loss.item())
                        terms.append(scale(level_loss, weights[level]))
                    loss = add_n(terms)
            tape.backward(loss)
            grads = {name: params[name].grad for name in trainable if params[name].grad is not None}
            norm = clip_gradients(grads, train_config.grad_clip_norm)
            sgd_momentum_step(params, grads, velocity, lr, train_config.momentum)
            for name in trainable:
                params[name].grad = None

            row = {
                "iter": it,
                "stage": stage,
                "lr": lr,
                "loss_total": loss.item(),
                "train_acc": float((probs.argmax(axis=1) == labels).mean()),
                "grad_norm": norm,
            }
            for level, value in enumerate(level_losses):
                row[f"loss_l{level}"] = value
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row.get(col)) for col in header])
            if it % 100 == 0 or it == train_config.total_iters - 1:
                log.info("stage %d iter %d lr %.5f loss %.4f acc %.3f", stage, it, lr, row["loss_total"], row["train_acc"])
    finally:
        if fh is not None:
            fh.close()
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def stage1_train(
    dataset: VideoDataset,
    off_config: OffConfig,
    train_config: TrainConfig,
    params: dict[str, Tensor] | None = None,
    metrics_path: str | Path | None = None,
) -> Checkpoint:
    """Train the backbone and the RGB classifier on segment-averaged scores."""
    if train_config.stage != 1:
        raise ConfigurationError(f"stage1_train needs stage=1, got {train_config.stage}")
    _check_dataset(dataset, off_config)
    if params is None:
        params = init_backbone_params(off_config, np.random.default_rng(train_config.seed))
    trainable = [k for k in params if k.startswith(("backbone.", "rgb."))]
    _run(params, trainable, dataset, off_config, train_config, metrics_path)
    return Checkpoint(
        params={k: v.data.copy() for k, v in params.items()},
        config=_config_echo(off_config, train_config),
        iteration=train_config.total_iters,
    )


def stage2_train(
    stage1: Checkpoint | None,
    dataset: VideoDataset,
    off_config: OffConfig,
    train_config: TrainConfig,
    metrics_path: str | Path | None = None,
) -> Checkpoint:
    """Train a freshly initialised OFF sub-network on top of a frozen stage-1 backbone.

    Every OFF level is supervised with its own loss; the total is their
    weighted sum.
    """
    if stage1 is None:
        raise InvalidArgumentError("stage 2 needs a stage-1 checkpoint")
    if train_config.stage != 2:
        raise ConfigurationError(f"stage2_train needs stage=2, got {train_config.stage}")
    _check_dataset(dataset, off_config)
    expected = init_backbone_params(off_config, np.random.default_rng(0))
    for name, p in expected.items():
        if name not in stage1.params:
            raise InvalidArgumentError(f"stage-1 checkpoint lacks {name}")
        if stage1.params[name].shape != p.shape:
            raise ConfigurationError(
                f"stage-1 {name} has shape {stage1.params[name].shape}, config implies {p.shape}"
            )
    params = {k: Tensor(stage1.params[k].copy()) for k in expected}
    frozen = {k: v.data.tobytes() for k, v in params.items()}
    params.update(init_off_params(off_config, np.random.default_rng(train_config.seed)))
    trainable = [k for k in params if k.startswith("off.")]
    _run(params, trainable, dataset, off_config, train_config, metrics_path)
    for name, raw in frozen.items():
        if params[name].data.tobytes() != raw:
            raise RuntimeError(f"frozen backbone parameter {name} changed during stage 2")
    return Checkpoint(
        params={k: v.data.copy() for k, v in params.items()},
        config=_config_echo(off_config, train_config),
        iteration=train_config.total_iters,
    )


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def predict_scores(
    params: Mapping[str, Tensor],
    off_config: OffConfig,
    dataset: VideoDataset,
    beta: int,
    streams: Sequence[str] = ("rgb", "off"),
    batch_size: int = 64,
) -> dict[str, np.ndarray]:
    """Video-level scores on the test segments: keys ``rgb`` and ``off_l{k}``."""
    _check_dataset(dataset, off_config)
    frame_idx = np.array(test_sample_indices(dataset.clip_length, beta))
    out: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(dataset), batch_size):
        clip_ids = np.arange(start, min(start + batch_size, len(dataset)))
        frame_ids = np.broadcast_to(frame_idx, (len(clip_ids), len(frame_idx)))
        scores = network_forward(dataset.segments(clip_ids, frame_ids), params, off_config, streams=streams)
        if scores.rgb is not None:
            out.setdefault("rgb", []).append(scores.rgb.data)
        for level, logits in enumerate(scores.off):
            out.setdefault(f"off_l{level}", []).append(logits.data)
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate(
    params: Mapping[str, Tensor],
    off_config: OffConfig,
    dataset: VideoDataset,
    beta: int = 5,
    streams: Sequence[str] = ("rgb", "off", "fused"),
    batch_size: int = 64,
) -> dict[str, float]:
    """Top-1 accuracy of each requested stream.

    ``off`` reports every level (``off_l{k}``) plus the last one as ``off``;
    ``fused`` sums the RGB scores with the last OFF level; ``hypercolumn``
    reports the last level of a network built with ``ablate_off_layer``.
    """
    known = {"rgb", "off", "fused", "hypercolumn"}
    if set(streams) - known:
        raise InvalidArgumentError(f"unknown streams {sorted(set(streams) - known)}")
    if "hypercolumn" in streams and not off_config.ablate_off_layer:
        raise ConfigurationError("the hypercolumn stream needs a network trained with ablate_off_layer")
    need = set()
    if {"rgb", "fused"} & set(streams):
        need.add("rgb")
    if {"off", "fused", "hypercolumn"} & set(streams):
        need.add("off")
    scores = predict_scores(params, off_config, dataset, beta, tuple(sorted(need)), batch_size)
    labels = dataset.labels
    last = f"off_l{off_config.levels - 1}"

    def acc(s: np.ndarray) -> float:
        return float((s.argmax(axis=1) == labels).mean())

    report: dict[str, float] = {}
    if "rgb" in streams:
        report["rgb"] = acc(scores["rgb"])
    if "off" in streams:
        for level in range(off_config.levels):
            report[f"off_l{level}"] = acc(scores[f"off_l{level}"])
        report["off"] = report[f"off_l{off_config.levels - 1}"]
    if "hypercolumn" in streams:
        report["hypercolumn"] = acc(scores[last])
    if "fused" in streams:
        fused = fuse_streams([Tensor(scores["rgb"]), Tensor(scores[last])])
        report["fused"] = acc(fused.data)
    return report
