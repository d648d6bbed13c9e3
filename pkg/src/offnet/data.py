"""Segment sampling, synthetic translating-pattern clips, and the dataset directory format."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError, OutOfBoundsError
from .network import off_layer
from .tensor import Tensor

NUM_DIRECTIONS = 8
MANIFEST_NAME = "manifest.txt"
_MANIFEST_MAGIC = "# offnet-dataset v1"
_MANIFEST_COLUMNS = "id label T H W vx vy"


# --------------------------------------------------------------------------
# segment sampling
# --------------------------------------------------------------------------


def _check_plan(L: int, beta: int, alpha: int = 1) -> int:
    if alpha < 1 or beta < 1:
        raise InvalidArgumentError(f"segment counts must be >= 1, got alpha={alpha} beta={beta}")
    if L < beta:
        raise InvalidArgumentError(f"clip length L={L} is shorter than beta={beta}")
    if alpha > beta:
        raise InvalidArgumentError(f"alpha={alpha} exceeds beta={beta}")
    return L // beta


def train_seed_range(L: int, alpha: int, beta: int) -> range:
    """All admissible frame seeds p for training."""
    interval = _check_plan(L, beta, alpha)
    return range(0, L - 1 - (alpha - 1) * interval + 1)


def train_sample_indices(L: int, alpha: int, beta: int, rng: np.random.Generator) -> list[int]:
    """alpha frame indices p, p + L//beta, ... with the seed p drawn uniformly."""
    interval = _check_plan(L, beta, alpha)
    seeds = train_seed_range(L, alpha, beta)
    p = int(rng.integers(seeds.start, seeds.stop))
    return [p + k * interval for k in range(alpha)]


def test_sample_indices(L: int, beta: int) -> list[int]:
    """beta indices at spacing L//beta, with the leftover frames split evenly on both ends."""
    interval = _check_plan(L, beta)
    offset = (L - 1 - (beta - 1) * interval) // 2
    return [offset + k * interval for k in range(beta)]


# --------------------------------------------------------------------------
# patterns and clips
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Pattern:
    """A continuous intensity pattern centred at the origin, values in [0, 1].

    kind is one of ``gaussian_blob`` (uses sigma), ``square`` (uses side) or
    ``bars`` (vertical cosine bars of the given period inside a square of
    the given side). Edges of square and bars ramp linearly over one pixel,
    which is exactly what bilinear sampling of a pixel box produces.
    """

    kind: str = "gaussian_blob"
    sigma: float = 2.0
    side: float = 8.0
    period: float = 4.0

    def __post_init__(self):
        if self.kind not in ("gaussian_blob", "square", "bars"):
            raise InvalidArgumentError(f"unknown pattern kind {self.kind!r}")

    @property
    def radius(self) -> float:
        if self.kind == "gaussian_blob":
            return 3.0 * self.sigma
        return self.side / 2.0 + 0.5

    def __call__(self, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian_blob":
            return np.exp(-(dx * dx + dy * dy) / (2.0 * self.sigma**2))
        half = self.side / 2.0 + 0.5
        box = np.clip(half - np.abs(dx), 0.0, 1.0) * np.clip(half - np.abs(dy), 0.0, 1.0)
        if self.kind == "square":
            return box
        return box * (0.5 + 0.5 * np.cos(2.0 * np.pi * dx / self.period))


def gaussian_blob(sigma: float) -> Pattern:
    return Pattern("gaussian_blob", sigma=sigma)


def square(side: float) -> Pattern:
    return Pattern("square", side=side)


def bars(side: float, period: float = 4.0) -> Pattern:
    return Pattern("bars", side=side, period=period)


@dataclass
class Clip:
    frames: np.ndarray  # (T, C, H, W) float32
    label: int = 0
    velocity: tuple[float, float] | None = None

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def render_frame(pattern: Pattern, center: tuple[float, float], size: int) -> np.ndarray:
    """Sample the pattern at the pixel centres of a size x size frame (x right, y down)."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return pattern(x - center[0], y - center[1])


def start_range(pattern: Pattern, velocity, T: int, size: int) -> tuple[tuple[float, float], tuple[float, float]]:
    """Bounds on the t=0 centre keeping the pattern inside the frame for all T frames."""
    r = pattern.radius
    bounds = []
    for v in velocity:
        travel = v * (T - 1)
        lo = r - min(0.0, travel)
        hi = size - 1 - r - max(0.0, travel)
        bounds.append((lo, hi))
    return bounds[0], bounds[1]


def gen_translating_clip(
    pattern: Pattern,
    velocity: tuple[float, float],
    T: int,
    size: int,
    start: tuple[float, float] | None = None,
    rng: np.random.Generator | None = None,
    label: int = 0,
) -> Clip:
    """Render I(x, y, t) = I0(x - x0 - vx t, y - y0 - vy t) for t = 0..T-1.

    When ``start`` is None a start point is drawn uniformly from the
    positions that keep the pattern in frame.
    """
    if T < 2:
        raise InvalidArgumentError(f"clips need at least 2 frames, got T={T}")
    vx, vy = float(velocity[0]), float(velocity[1])
    (xlo, xhi), (ylo, yhi) = start_range(pattern, (vx, vy), T, size)
    if start is None:
        if xlo > xhi or ylo > yhi:
            raise OutOfBoundsError(
                f"pattern of radius {pattern.radius} cannot travel {T - 1} frames at {velocity} in {size}px"
            )
        rng = rng if rng is not None else np.random.default_rng()
        start = (rng.uniform(xlo, xhi), rng.uniform(ylo, yhi))
    x0, y0 = float(start[0]), float(start[1])
    if not (xlo <= x0 <= xhi and ylo <= y0 <= yhi):
        raise OutOfBoundsError(f"pattern starting at {start} leaves the {size}px frame")
    frames = np.stack(
        [render_frame(pattern, (x0 + vx * t, y0 + vy * t), size)[None] for t in range(T)]
    ).astype(np.float32)
    return Clip(frames=frames, label=label, velocity=(vx, vy))


def direction_velocity(label: int, speed: float) -> tuple[float, float]:
    """Velocity of class ``label``: angle label * 45 degrees, y pointing down."""
    angle = 2.0 * math.pi * label / NUM_DIRECTIONS
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)
    # cos(90 deg) is 6e-17 in floating point
    return (0.0 if abs(vx) < 1e-12 else vx, 0.0 if abs(vy) < 1e-12 else vy)


def clip_rng(seed: int, clip_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, clip_id]))


def gen_direction_dataset(
    clips_per_class: int,
    T: int,
    size: int,
    speed: float,
    seed: int,
    pattern: Pattern | None = None,
) -> list[Clip]:
    """Balanced 8-direction dataset; every class uses the same blob, only the motion differs.

    Clip ``i`` has label ``i % 8`` and draws its start position from a
    generator seeded by (seed, i), so any subset can be regenerated alone.
    """
    pattern = pattern or gaussian_blob(2.0)
    clips = []
    for clip_id in range(clips_per_class * NUM_DIRECTIONS):
        label = clip_id % NUM_DIRECTIONS
        clips.append(
            gen_translating_clip(
                pattern,
                direction_velocity(label, speed),
                T,
                size,
                rng=clip_rng(seed, clip_id),
                label=label,
            )
        )
    return clips


# --------------------------------------------------------------------------
# dataset directory
# --------------------------------------------------------------------------


@dataclass
class VideoDataset:
    frames: np.ndarray  # (n, T, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    velocities: np.ndarray  # (n, 2) float64
    num_classes: int = NUM_DIRECTIONS

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def clip_length(self) -> int:
        return self.frames.shape[1]

    @classmethod
    def from_clips(cls, clips: Sequence[Clip], num_classes: int = NUM_DIRECTIONS) -> "VideoDataset":
        return cls(
            frames=np.stack([c.frames for c in clips]).astype(np.float32),
            labels=np.array([c.label for c in clips], dtype=np.int64),
            velocities=np.array([c.velocity or (np.nan, np.nan) for c in clips], dtype=np.float64),
            num_classes=num_classes,
        )

    def segments(self, clip_ids: np.ndarray, frame_ids: np.ndarray) -> list[Tensor]:
        """Batch of segments: ``frame_ids[i, s]`` is the frame of clip ``clip_ids[i]`` in segment s."""
        return [Tensor(self.frames[clip_ids, frame_ids[:, s]]) for s in range(frame_ids.shape[1])]


def _blob_name(clip_id: int) -> str:
    return f"clip_{clip_id:06d}.f32"


def write_dataset(out_dir: str | Path, clips: Sequence[Clip], force: bool = False) -> Path:
    """Write one little-endian float32 blob per clip plus a text manifest."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise InvalidArgumentError(f"{out} exists and is not empty (use --force to overwrite)")
        for child in out.iterdir():
            if child.is_file() and (child.name == MANIFEST_NAME or child.suffix == ".f32"):
                child.unlink()
    out.mkdir(parents=True, exist_ok=True)
    channels = clips[0].frames.shape[1] if clips else 1
    lines = [f"{_MANIFEST_MAGIC} channels={channels} classes={NUM_DIRECTIONS}", _MANIFEST_COLUMNS]
    for clip_id, clip in enumerate(clips):
        T, C, H, W = clip.frames.shape
        if C != channels:
            raise InvalidArgumentError(f"clip {clip_id} has {C} channels, expected {channels}")
        vx, vy = clip.velocity if clip.velocity is not None else (float("nan"), float("nan"))
        lines.append(f"{clip_id} {clip.label} {T} {H} {W} {float(vx)!r} {float(vy)!r}")
        (out / _blob_name(clip_id)).write_bytes(clip.frames.astype("<f4").tobytes())
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return out


def read_dataset(data_dir: str | Path) -> VideoDataset:
    root = Path(data_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FormatError(f"{manifest} not found")
    lines = manifest.read_text().splitlines()
    if len(lines) < 2 or not lines[0].startswith(_MANIFEST_MAGIC) or lines[1].strip() != _MANIFEST_COLUMNS:
        raise FormatError(f"{manifest}: missing dataset header")
    meta = dict(tok.split("=", 1) for tok in lines[0][len(_MANIFEST_MAGIC) :].split())
    channels = int(meta.get("channels", 1))
    num_classes = int(meta.get("classes", NUM_DIRECTIONS))
    frames, labels, velocities = [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 7:
            raise FormatError(f"{manifest}:{lineno}: expected 7 fields, got {len(fields)}")
        try:
            clip_id, label, T, H, W = (int(f) for f in fields[:5])
            vx, vy = float(fields[5]), float(fields[6])
        except ValueError as exc:
            raise FormatError(f"{manifest}:{lineno}: {exc}") from None
        blob = root / _blob_name(clip_id)
        expected = T * channels * H * W
        raw = np.fromfile(blob, dtype="<f4") if blob.is_file() else np.empty(0, "<f4")
        if raw.size != expected:
            raise FormatError(f"{blob.name}: expected {expected} values, found {raw.size}")
        frames.append(raw.reshape(T, channels, H, W).astype(np.float32))
        labels.append(label)
        velocities.append((vx, vy))
    if not frames:
        raise FormatError(f"{manifest}: no clips")
    return VideoDataset(
        frames=np.stack(frames),
        labels=np.array(labels, dtype=np.int64),
        velocities=np.array(velocities, dtype=np.float64),
        num_classes=num_classes,
    )


# --------------------------------------------------------------------------
# orthogonality of the OFF to (vx, vy, 1)
# --------------------------------------------------------------------------

# response of either Sobel kernel to a unit ramp
SOBEL_GAIN = 6.0


def _identity_reduce(channels: int) -> dict[str, Tensor]:
    return {
        "w": Tensor(np.eye(channels), dtype=np.float64),
        "b": Tensor(np.zeros(channels), dtype=np.float64),
    }


def orthogonality_residual(clip: Clip, frame_pair: tuple[int, int] = (0, 1)) -> float:
    """Normalized interior residual of vx*gx + vy*gy + Ft on identity features.

    gx = Fx / 6 and gy = -Fy / 6 turn the Sobel responses into image-axis
    derivatives (y down). The spatial terms are averaged over both frames of
    the pair so they sit at the same time point as the forward difference Ft.
    """
    if clip.velocity is None:
        raise InvalidArgumentError("orthogonality_residual: clip has no ground-truth velocity")
    t0, t1 = frame_pair
    dt = t1 - t0
    if dt < 1:
        raise InvalidArgumentError(f"frame pair must move forward in time, got {frame_pair}")
    a = Tensor(clip.frames[t0][None].astype(np.float64))
    b = Tensor(clip.frames[t1][None].astype(np.float64))
    reduce = _identity_reduce(a.shape[1])
    fwd = off_layer(a, b, reduce)
    bwd = off_layer(b, a, reduce)
    inner = (slice(None), slice(None), slice(1, -1), slice(1, -1))
    gx = ((fwd.fx.data + bwd.fx.data) / (2 * SOBEL_GAIN))[inner]
    gy = (-(fwd.fy.data + bwd.fy.data) / (2 * SOBEL_GAIN))[inner]
    ft = fwd.ft.data[inner]
    vx, vy = clip.velocity[0] * dt, clip.velocity[1] * dt
    residual = np.abs(vx * gx + vy * gy + ft).mean()
    scale_ = (np.abs(gx) + np.abs(gy) + np.abs(ft) + 1e-8).mean()
    return float(residual / scale_)


def orthogonality_sweep(
    sigmas: Sequence[float],
    speeds: Sequence[float],
    directions: int = NUM_DIRECTIONS,
    size: int = 64,
) -> list[tuple[float, float, float, float]]:
    """(sigma, speed, angle_deg, residual) for a centred Gaussian blob on every grid cell."""
    rows = []
    for sigma in sigmas:
        for speed in speeds:
            for k in range(directions):
                angle = 360.0 * k / directions
                rad = math.radians(angle)
                v = (speed * math.cos(rad), speed * math.sin(rad))
                c = (size - 1) / 2.0
                clip = gen_translating_clip(
                    gaussian_blob(sigma), v, 2, size, start=(c - v[0] / 2, c - v[1] / 2)
                )
                rows.append((float(sigma), float(speed), angle, orthogonality_residual(clip)))
    return rows
