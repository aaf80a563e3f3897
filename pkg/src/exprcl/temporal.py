"""TimeAug positive sampling and same-identity hard-negative sampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, FrameRecord

_EPS = 1e-9


class SamplingError(RuntimeError):
    pass


class PositivePdf(str, enum.Enum):
    LINEAR_DECREASING = "LINEAR_DECREASING"
    UNIFORM = "UNIFORM"


@dataclass(frozen=True)
class TemporalConfig:
    """Interval thresholds in seconds.

    ``t2_max_seconds`` optionally caps the same-video hard-negative interval;
    ``cross_video`` allows hard negatives from other videos of the identity
    when the anchor's own video is too short.
    """

    t1_seconds: float = 1.0
    t2_seconds: float = 3.0
    positive_pdf: PositivePdf = PositivePdf.LINEAR_DECREASING
    seed: int = 0
    t2_max_seconds: float | None = None
    cross_video: bool = True

    def __post_init__(self):
        object.__setattr__(self, "positive_pdf", PositivePdf(self.positive_pdf))
        if not 0 < self.t1_seconds < self.t2_seconds:
            raise ValueError(f"need 0 < t1_seconds < t2_seconds, got {self.t1_seconds}, {self.t2_seconds}")
        if self.t2_max_seconds is not None and self.t2_max_seconds < self.t2_seconds:
            raise ValueError("t2_max_seconds must be >= t2_seconds")


def draw_interval(cfg: TemporalConfig, rng: np.random.Generator, size: int | None = None):
    """Raw positive interval draw(s) on [0, T1].

    LINEAR_DECREASING uses the density 2(T1 - t)/T1^2, sampled by inverting
    its CDF 1 - (1 - t/T1)^2.
    """
    u = rng.random(size)
    if cfg.positive_pdf is PositivePdf.UNIFORM:
        return cfg.t1_seconds * u
    return cfg.t1_seconds * (1.0 - np.sqrt(1.0 - u))


def _snap(times: np.ndarray, target: float) -> int:
    """Index of the timestamp nearest ``target``; ties go to the earlier frame."""
    d = np.abs(times - target)
    best = d.min()
    return int(np.flatnonzero(d <= best + _EPS)[0])


def sample_positive(
    manifest: DatasetManifest, anchor: FrameRecord, cfg: TemporalConfig, rng: np.random.Generator
) -> FrameRecord:
    frames = manifest.video_frames(anchor.video_id)
    times = np.array([f.timestamp_s for f in frames])
    dt = times - anchor.timestamp_s
    near = (np.abs(dt) <= cfg.t1_seconds + _EPS) & (np.abs(dt) > _EPS)
    if not near.any():
        raise SamplingError(
            f"video {anchor.video_id!r} has no frame within {cfg.t1_seconds}s of t={anchor.timestamp_s}"
        )
    directions = [d for d, side in ((-1, dt < 0), (1, dt > 0)) if (near & side).any()]
    t1 = float(draw_interval(cfg, rng))
    direction = directions[int(rng.integers(len(directions)))]
    side = near & ((dt < 0) if direction < 0 else (dt > 0))
    idx = np.flatnonzero(side)
    pick = idx[_snap(times[idx], anchor.timestamp_s + direction * t1)]
    return frames[pick]


def hard_negative_candidates(
    manifest: DatasetManifest, anchor: FrameRecord, cfg: TemporalConfig
) -> tuple[list[FrameRecord], bool]:
    """Eligible hard negatives and whether they come from other videos."""
    frames = manifest.video_frames(anchor.video_id)
    same = []
    for f in frames:
        gap = abs(f.timestamp_s - anchor.timestamp_s)
        if gap + _EPS >= cfg.t2_seconds and (cfg.t2_max_seconds is None or gap <= cfg.t2_max_seconds + _EPS):
            same.append(f)
    if same or not cfg.cross_video:
        return same, False
    others = [
        f
        for v in manifest.identity_videos(anchor.identity_id)
        if v != anchor.video_id
        for f in manifest.video_frames(v)
    ]
    return others, True


def sample_hard_negative(
    manifest: DatasetManifest, anchor: FrameRecord, cfg: TemporalConfig, rng: np.random.Generator
) -> FrameRecord:
    """Same identity, at least T2 away in the same video, else another video."""
    candidates, _ = hard_negative_candidates(manifest, anchor, cfg)
    if not candidates:
        raise SamplingError(f"identity {anchor.identity_id!r} has no hard negative for {anchor.key}")
    return candidates[int(rng.integers(len(candidates)))]


def has_positive(manifest: DatasetManifest, anchor: FrameRecord, cfg: TemporalConfig) -> bool:
    return any(
        0 < abs(f.timestamp_s - anchor.timestamp_s) <= cfg.t1_seconds + _EPS
        for f in manifest.video_frames(anchor.video_id)
    )

