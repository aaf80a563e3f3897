"""Core domain types and manifest ingestion.

Landmarks follow the 68-point annotation layout (jaw 0-16, right brow 17-21,
left brow 22-26, nose 27-35, right eye 36-41, left eye 42-47, mouth 48-67).
Manifests are stored as CSV or JSONL with landmarks flattened to
``x0, y0, ..., x67, y67``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from bisect import insort
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

N_LANDMARKS = 68

REGIONS: dict[str, range] = {
    "jaw": range(0, 17),
    "right_eyebrow": range(17, 22),
    "left_eyebrow": range(22, 27),
    "nose": range(27, 36),
    "right_eye": range(36, 42),
    "left_eye": range(42, 48),
    "mouth": range(48, 68),
}
EYES = range(36, 48)
MOUTH = range(48, 68)

CSV_COLUMNS = ["video_id", "identity_id", "timestamp_s", "image_ref"] + [
    f"{axis}{i}" for i in range(N_LANDMARKS) for axis in ("x", "y")
]


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Landmarks68:
    """68 ordered (x, y) points in pixel coordinates. Immutable."""

    __slots__ = ("_points",)

    def __init__(self, points: Any):
        pts = np.array(points, dtype=np.float64).reshape(-1, 2) if np.size(points) else np.zeros((0, 2))
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"expected {N_LANDMARKS} landmark points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        self._points = pts

    @property
    def points(self) -> np.ndarray:
        return self._points

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "Landmarks68":
        if len(values) != 2 * N_LANDMARKS:
            raise ValueError(
                f"expected {2 * N_LANDMARKS} landmark numbers ({N_LANDMARKS} points), "
                f"got {len(values)} ({len(values) / 2:g} points)"
            )
        return cls(np.asarray(values, dtype=np.float64).reshape(N_LANDMARKS, 2))

    def flat(self) -> list[float]:
        return [float(v) for v in self._points.reshape(-1)]

    def region(self, name: str) -> np.ndarray:
        return self._points[list(REGIONS[name])]

    def subset(self, indices: Iterable[int]) -> np.ndarray:
        return self._points[list(indices)]

    def translated(self, dx: float, dy: float) -> "Landmarks68":
        return Landmarks68(self._points + np.array([dx, dy]))

    def transformed(self, matrix: np.ndarray) -> "Landmarks68":
        """Apply a 2x3 affine matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        return Landmarks68(self._points @ m[:, :2].T + m[:, 2])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Landmarks68) and np.array_equal(self._points, other._points)

    def __hash__(self) -> int:
        return hash(self._points.tobytes())

    def __repr__(self) -> str:
        return f"Landmarks68(centroid={self._points.mean(axis=0).round(2).tolist()})"


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """One video frame.

    ``image_ref`` is either a path to an image file or an in-memory HxWx3
    uint8 RGB array (synthetic corpora keep pixels in memory).
    """

    video_id: str
    identity_id: str
    timestamp_s: float
    image_ref: Any
    landmarks: Landmarks68

    def __post_init__(self):
        if not (isinstance(self.timestamp_s, (int, float)) and math.isfinite(self.timestamp_s)) or self.timestamp_s < 0:
            raise ValueError(f"timestamp_s must be a finite float >= 0, got {self.timestamp_s!r}")
        if not isinstance(self.landmarks, Landmarks68):
            raise ValueError("every record must carry Landmarks68")

    @property
    def key(self) -> str:
        return f"{self.video_id}@{self.timestamp_s:.6f}"

    def _image_eq(self, other: "FrameRecord") -> bool:
        a, b = self.image_ref, other.image_ref
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and np.array_equal(a, b)
        return str(a) == str(b)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.identity_id == other.identity_id
            and self.timestamp_s == other.timestamp_s
            and self.landmarks == other.landmarks
            and self._image_eq(other)
        )

    def __hash__(self) -> int:
        return hash(self.key)


class DatasetManifest:
    """Ordered frame records plus an identity -> video -> positions index.

    Records are sorted by (identity_id, video_id, timestamp_s) on construction.
    """

    def __init__(self, records: Iterable[FrameRecord]):
        recs = sorted(records, key=lambda r: (r.identity_id, r.video_id, r.timestamp_s))
        index: dict[str, dict[str, list[int]]] = {}
        video_identity: dict[str, str] = {}
        for pos, rec in enumerate(recs):
            owner = video_identity.setdefault(rec.video_id, rec.identity_id)
            if owner != rec.identity_id:
                raise ManifestError(
                    f"video {rec.video_id!r} appears under identities {owner!r} and {rec.identity_id!r}"
                )
            bucket = index.setdefault(rec.identity_id, {}).setdefault(rec.video_id, [])
            if bucket and recs[bucket[-1]].timestamp_s == rec.timestamp_s:
                raise ManifestError(f"duplicate timestamp {rec.timestamp_s} in video {rec.video_id!r}")
            bucket.append(pos)
        self._records = tuple(recs)
        self._index = index
        self._video_identity = video_identity
        self._by_key = {r.key: i for i, r in enumerate(recs)}

    @property
    def records(self) -> tuple[FrameRecord, ...]:
        return self._records

    @property
    def index(self) -> Mapping[str, Mapping[str, Sequence[int]]]:
        return self._index

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, pos: int) -> FrameRecord:
        return self._records[pos]

    def __iter__(self):
        return iter(self._records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self._records, other._records))

    @property
    def identities(self) -> list[str]:
        return list(self._index)

    @property
    def videos(self) -> list[str]:
        return [v for vids in self._index.values() for v in vids]

    def identity_of(self, video_id: str) -> str:
        return self._video_identity[video_id]

    def video_frames(self, video_id: str) -> list[FrameRecord]:
        positions = self._index[self._video_identity[video_id]][video_id]
        return [self._records[p] for p in positions]

    def video_positions(self, video_id: str) -> Sequence[int]:
        return self._index[self._video_identity[video_id]][video_id]

    def identity_videos(self, identity_id: str) -> list[str]:
        return list(self._index[identity_id])

    def position_of(self, record: FrameRecord) -> int:
        return self._by_key[record.key]

    def by_key(self, key: str) -> FrameRecord:
        return self._records[self._by_key[key]]

    def pretrain_videos(self) -> list[str]:
        """Videos with at least two frames; single-frame videos cannot supply positives."""
        return [v for v in self.videos if len(self.video_positions(v)) >= 2]

    def subset(self, identities: Iterable[str]) -> "DatasetManifest":
        keep = set(identities)
        return DatasetManifest(r for r in self._records if r.identity_id in keep)


# ---------------------------------------------------------------------------
# Manifest I/O


def _record_from_row(row: Mapping[str, Any], line: int) -> FrameRecord:
    for name in ("video_id", "identity_id", "timestamp_s", "image_ref"):
        if name not in row or row[name] in (None, ""):
            raise ManifestError(f"missing field {name!r}", line)
    if "landmarks" in row:
        flat = row["landmarks"]
        if not isinstance(flat, list):
            raise ManifestError("landmarks must be a list of 136 numbers", line)
    else:
        flat = []
        for col in CSV_COLUMNS[4:]:
            value = row.get(col)
            if value in (None, ""):
                break
            flat.append(value)
    try:
        flat = [float(v) for v in flat]
        timestamp = float(row["timestamp_s"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"non-numeric value: {exc}", line) from None
    try:
        landmarks = Landmarks68.from_flat(flat)
        return FrameRecord(
            video_id=str(row["video_id"]),
            identity_id=str(row["identity_id"]),
            timestamp_s=timestamp,
            image_ref=str(row["image_ref"]),
            landmarks=landmarks,
        )
    except ValueError as exc:
        raise ManifestError(f"invalid record: {exc}", line) from None


def _check_monotone(records: list[tuple[int, FrameRecord]]) -> None:
    last: dict[str, tuple[float, int]] = {}
    for line, rec in records:
        prev = last.get(rec.video_id)
        if prev is not None and rec.timestamp_s <= prev[0]:
            raise ManifestError(
                f"non-monotone timestamp {rec.timestamp_s} in video {rec.video_id!r} "
                f"(previous {prev[0]} at line {prev[1]})",
                line,
            )
        last[rec.video_id] = (rec.timestamp_s, line)


def load_manifest(path: str | Path, fmt: str | None = None, *, require_file_order: bool = False) -> DatasetManifest:
    """Load a CSV or JSONL manifest.

    Rows may appear in any order; the manifest is re-sorted by
    (identity_id, video_id, timestamp_s). With ``require_file_order`` set,
    timestamps must additionally increase in file order within each video.
    Duplicate timestamps within a video are always rejected.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).upper()
    rows: list[tuple[int, FrameRecord]] = []
    with path.open(newline="") as fh:
        if fmt == "CSV":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or list(reader.fieldnames[:4]) != CSV_COLUMNS[:4]:
                raise ManifestError(f"CSV header must start with {CSV_COLUMNS[:4]}", 1)
            for row in reader:
                rows.append((reader.line_num, _record_from_row(row, reader.line_num)))
        elif fmt == "JSONL":
            for lineno, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    row = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from None
                if not isinstance(row, dict):
                    raise ManifestError("each line must be a JSON object", lineno)
                rows.append((lineno, _record_from_row(row, lineno)))
        else:
            raise ValueError(f"unknown manifest format {fmt!r}")
    if require_file_order:
        _check_monotone(rows)
    try:
        return DatasetManifest(rec for _, rec in rows)
    except ManifestError as exc:
        # locate the offending line for duplicate-timestamp errors
        seen: dict[tuple[str, float], int] = {}
        for line, rec in rows:
            k = (rec.video_id, rec.timestamp_s)
            if k in seen:
                raise ManifestError(str(exc), line) from None
            seen[k] = line
        raise


def save_manifest(manifest: DatasetManifest, path: str | Path, fmt: str | None = None) -> None:
    """Write a manifest. In-memory images cannot be serialized; save pixels first."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).upper()
    for rec in manifest:
        if isinstance(rec.image_ref, np.ndarray):
            raise ValueError(f"record {rec.key} holds in-memory pixels; write images to disk first")
    with path.open("w", newline="") as fh:
        if fmt == "CSV":
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for rec in manifest:
                writer.writerow(
                    [rec.video_id, rec.identity_id, repr(rec.timestamp_s), rec.image_ref]
                    + [repr(v) for v in rec.landmarks.flat()]
                )
        elif fmt == "JSONL":
            for rec in manifest:
                row = {
                    "video_id": rec.video_id,
                    "identity_id": rec.identity_id,
                    "timestamp_s": rec.timestamp_s,
                    "image_ref": rec.image_ref,
                    "landmarks": rec.landmarks.flat(),
                }
                fh.write(json.dumps(row) + "\n")
        else:
            raise ValueError(f"unknown manifest format {fmt!r}")


def load_image(record: FrameRecord) -> np.ndarray:
    """Return the record's pixels as an HxWx3 uint8 RGB array."""
    ref = record.image_ref
    if isinstance(ref, np.ndarray):
        return ref
    import cv2

    img = cv2.imread(str(ref), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {ref!r} for record {record.key}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


# ---------------------------------------------------------------------------
# Landmark validation


def _box_area(points: np.ndarray) -> float:
    span = points.max(axis=0) - points.min(axis=0)
    return float(span[0] * span[1])


def validate_landmarks(lm: Landmarks68, image_w: int, image_h: int) -> list[str]:
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    warnings: list[str] = []
    pts = lm.points
    for i, (x, y) in enumerate(pts):
        if not (0 <= x <= image_w - 1 and 0 <= y <= image_h - 1):
            warnings.append(f"point {i} ({x:g}, {y:g}) outside {image_w}x{image_h} image")
    if _box_area(lm.subset(EYES)) <= 0:
        warnings.append("degenerate eyes region: zero-area bounding box")
    if _box_area(lm.subset(MOUTH)) <= 0:
        warnings.append("degenerate mouth region: zero-area bounding box")
    return warnings


# ---------------------------------------------------------------------------
# Batches, embeddings, reports


class Role(str, enum.Enum):
    ANCHOR = "ANCHOR"
    POSITIVE = "POSITIVE"
    HARD_NEGATIVE = "HARD_NEGATIVE"


@dataclass
class View:
    image: Any
    role: Role
    group_id: int
    source: FrameRecord
    trace: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


@dataclass
class ContrastiveBatch:
    """Views of one pretraining step.

    Views are laid out as all anchors, then all positives, then all hard
    negatives (if any), each block in group order.
    """

    views: list[View]
    exclusion_sets: list[frozenset[int]]

    def __post_init__(self):
        self._anchor: dict[int, int] = {}
        self._positive: dict[int, int] = {}
        self._hard: dict[int, int] = {}
        slots = {Role.ANCHOR: self._anchor, Role.POSITIVE: self._positive, Role.HARD_NEGATIVE: self._hard}
        for idx, view in enumerate(self.views):
            slot = slots[view.role]
            if view.group_id in slot:
                raise ValueError(f"group {view.group_id} has two {view.role.value} views")
            slot[view.group_id] = idx
        if set(self._positive) != set(self._anchor):
            raise ValueError("every group needs exactly one ANCHOR and one POSITIVE")
        if self._hard and set(self._hard) != set(self._anchor):
            raise ValueError("hard negatives must be present for all groups or none")
        if len(self.exclusion_sets) != len(self._anchor):
            raise ValueError("one exclusion set per anchor required")
        for g in self.groups:
            if not {self._anchor[g], self._positive[g]} <= self.exclusion_sets[g]:
                raise ValueError(f"exclusion set of group {g} must contain its anchor and positive")

    @property
    def groups(self) -> list[int]:
        return sorted(self._anchor)

    @property
    def has_hard_negatives(self) -> bool:
        return bool(self._hard)

    def anchor(self, g: int) -> int:
        return self._anchor[g]

    def positive(self, g: int) -> int:
        return self._positive[g]

    def hard_negative(self, g: int) -> int | None:
        return self._hard.get(g)

    def partners(self, g: int) -> set[int]:
        out = {self._anchor[g], self._positive[g]}
        if g in self._hard:
            out.add(self._hard[g])
        return out

    @property
    def keys(self) -> list[str]:
        return [v.source.key for v in self.views]

    def __len__(self) -> int:
        return len(self.views)


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding matrix has non-finite entries")
        if self.normalized and not np.allclose(np.linalg.norm(self.rows, axis=1), 1.0, atol=1e-6):
            raise ValueError("rows flagged normalized but norms differ from 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape


class Task(str, enum.Enum):
    EXPR_CLS = "EXPR_CLS"
    VA_REG = "VA_REG"
    FR_KNN = "FR_KNN"


@dataclass
class EvalReport:
    task: Task
    metrics: dict[str, float]
    config_fingerprint: str
    seed: int
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.task = Task(self.task)
        if not self.metrics:
            raise ValueError("report metrics must be non-empty")
        for name, value in self.metrics.items():
            if not math.isfinite(value):
                raise ValueError(f"metric {name!r} is not finite: {value}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.value,
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(Task(d["task"]), d["metrics"], d["config_fingerprint"], d["seed"], d.get("extra", {}))
