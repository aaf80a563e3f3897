"""Procedural faces with separate identity and expression factors.

Identity lives in appearance (hue) and coarse shape (face aspect, eye
spacing); expression lives only in eye/mouth geometry. Landmarks returned by
:func:`render_face` are the exact geometry that was drawn.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from .data import DatasetManifest, FrameRecord, Landmarks68

N_CLASSES = 4
CLASS_NAMES = ("frown_closed", "frown_open", "smile_closed", "smile_open")

EXPRESSION_BOUNDS = {"mouth_curve": (-1.0, 1.0), "mouth_open": (0.0, 1.0), "eye_open": (0.1, 1.0)}
BACKGROUND = (0.42, 0.42, 0.42)
_SUPERSAMPLE = 4
_NOISE_STD = 0.012


@dataclass(frozen=True)
class Identity:
    hue: float
    face_aspect: float
    eye_spacing: float

    def __post_init__(self):
        if not 0.0 <= self.hue < 1.0:
            raise ValueError(f"hue must be in [0, 1), got {self.hue}")
        if not 0.8 <= self.face_aspect <= 1.2:
            raise ValueError(f"face_aspect must be in [0.8, 1.2], got {self.face_aspect}")
        if not 0.3 <= self.eye_spacing <= 0.5:
            raise ValueError(f"eye_spacing must be in [0.3, 0.5], got {self.eye_spacing}")


@dataclass(frozen=True)
class Expression:
    mouth_curve: float
    mouth_open: float
    eye_open: float

    def __post_init__(self):
        for name, (lo, hi) in EXPRESSION_BOUNDS.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name} must be in [{lo}, {hi}], got {v}")

    @property
    def expression_class(self) -> int:
        return 2 * int(self.mouth_curve >= 0.0) + int(self.mouth_open >= 0.5)

    @property
    def va(self) -> tuple[float, float]:
        return self.mouth_curve, (self.mouth_open + (1.0 - self.eye_open)) / 2.0


@dataclass(frozen=True)
class FaceLatents:
    identity: Identity
    expression: Expression

    @property
    def expression_class(self) -> int:
        return self.expression.expression_class

    @property
    def va(self) -> tuple[float, float]:
        return self.expression.va

    def to_dict(self) -> dict:
        return {"identity": asdict(self.identity), "expression": asdict(self.expression)}

    @classmethod
    def from_dict(cls, d: dict) -> "FaceLatents":
        return cls(Identity(**d["identity"]), Expression(**d["expression"]))


# ---------------------------------------------------------------------------
# Geometry


def _face_frame(identity: Identity, size: int) -> tuple[float, float, float, float]:
    cx, cy = size * 0.5, size * 0.53
    hx = size * 0.30
    hy = size * 0.36 * identity.face_aspect
    return cx, cy, hx, hy


def face_geometry(latents: FaceLatents, size: int) -> np.ndarray:
    """68x2 landmark array for the given latents at canvas ``size``."""
    ident, expr = latents.identity, latents.expression
    cx, cy, hx, hy = _face_frame(ident, size)
    uv = np.zeros((68, 2))

    # jaw: image-left ear around the chin to the image-right ear
    for k in range(17):
        phi = math.radians(188.0 - k * (196.0 / 16))
        uv[k] = (0.97 * math.cos(phi), 0.97 * math.sin(phi))

    es = ident.eye_spacing
    eye_v = -0.22
    eye_w = 0.17
    eye_h = 0.16 * expr.eye_open
    for base, sign in ((36, -1.0), (42, 1.0)):
        ex = sign * es
        outer, inner = ex + sign * eye_w, ex - sign * eye_w
        # outer corner, two upper lid points, inner corner, two lower lid points
        lid_u = (ex + sign * eye_w * 0.4, ex - sign * eye_w * 0.4)
        uv[base + 0] = (outer, eye_v)
        uv[base + 1] = (lid_u[0], eye_v - eye_h)
        uv[base + 2] = (lid_u[1], eye_v - eye_h)
        uv[base + 3] = (inner, eye_v)
        uv[base + 4] = (lid_u[1], eye_v + eye_h)
        uv[base + 5] = (lid_u[0], eye_v + eye_h)

    for base, sign in ((17, -1.0), (22, 1.0)):
        xs = np.linspace(sign * (es + 0.22), sign * (es - 0.20), 5)
        if sign > 0:
            xs = xs[::-1]
        for j, u in enumerate(xs):
            t = (u - sign * es) / 0.22
            uv[base + j] = (u, eye_v - 0.20 + 0.05 * t * t)

    for j in range(4):
        uv[27 + j] = (0.0, -0.18 + j * 0.09)
    for j, u in enumerate(np.linspace(-0.14, 0.14, 5)):
        uv[31 + j] = (u, 0.13 + 0.03 * (1 - abs(u) / 0.14))

    mouth_v, mouth_w = 0.46, 0.40
    curve_amp = 0.14 * expr.mouth_curve
    gap = 0.22 * expr.mouth_open
    lip = 0.07

    def mid(u: float) -> float:
        return mouth_v - curve_amp * (u / mouth_w) ** 2

    def bulge(u: float) -> float:
        return 1.0 - (u / mouth_w) ** 2

    upper_outer = np.linspace(-mouth_w, mouth_w, 7)[1:-1]  # 49..53
    lower_outer = upper_outer[::-1]  # 55..59
    uv[48] = (-mouth_w, mid(-mouth_w))
    for j, u in enumerate(upper_outer):
        uv[49 + j] = (u, mid(u) - (gap / 2 + lip) * bulge(u))
    uv[54] = (mouth_w, mid(mouth_w))
    for j, u in enumerate(lower_outer):
        uv[55 + j] = (u, mid(u) + (gap / 2 + lip) * bulge(u))
    inner_w = mouth_w * 0.8
    uv[60] = (-inner_w, mid(-inner_w))
    for j, u in enumerate(np.linspace(-inner_w, inner_w, 5)[1:-1]):
        uv[61 + j] = (u, mid(u) - (gap / 2) * bulge(u))
    uv[64] = (inner_w, mid(inner_w))
    for j, u in enumerate(np.linspace(inner_w, -inner_w, 5)[1:-1]):
        uv[65 + j] = (u, mid(u) + (gap / 2) * bulge(u))

    return np.column_stack([cx + uv[:, 0] * hx, cy + uv[:, 1] * hy])


def _color(hue: float, sat: float, val: float) -> tuple[float, float, float]:
    return colorsys.hsv_to_rgb(hue % 1.0, sat, val)


def _poly(points: np.ndarray, scale: int) -> np.ndarray:
    return np.round(points * scale * 16).astype(np.int32).reshape(-1, 1, 2)


def render_face(
    latents: FaceLatents, size: int = 64, seed: int = 0, *, return_masks: bool = False
):
    """Draw a face; returns ``(image, landmarks)`` or ``(image, landmarks, masks)``.

    The image is HxWx3 uint8 RGB. ``masks`` maps "eyes"/"mouth" to boolean
    arrays marking the drawn eye and mouth shapes.
    """
    if size < 64:
        raise ValueError(f"size must be >= 64, got {size}")
    pts = face_geometry(latents, size)
    ident = latents.identity
    s = _SUPERSAMPLE
    big = np.empty((size * s, size * s, 3), np.float32)
    big[:] = BACKGROUND
    eyes_mask = np.zeros(big.shape[:2], np.uint8)
    mouth_mask = np.zeros(big.shape[:2], np.uint8)
    shift = 4  # 16x sub-pixel precision in cv2 drawing calls

    cx, cy, hx, hy = _face_frame(ident, size)
    skin = _color(ident.hue, 0.55, 0.85)
    cv2.ellipse(
        big, (int(round(cx * s * 16)), int(round(cy * s * 16))),
        (int(round(hx * s * 16)), int(round(hy * s * 16))), 0, 0, 360, skin, -1, cv2.LINE_AA, shift,
    )
    shade = _color(ident.hue, 0.65, 0.55)
    for base in (17, 22):
        cv2.polylines(big, [_poly(pts[base:base + 5], s)], False, shade, max(1, s), cv2.LINE_AA, shift)
    cv2.polylines(big, [_poly(pts[27:31], s)], False, shade, max(1, s // 2), cv2.LINE_AA, shift)
    cv2.polylines(big, [_poly(pts[31:36], s)], False, shade, max(1, s // 2), cv2.LINE_AA, shift)

    for base in (36, 42):
        ring = _poly(pts[base:base + 6], s)
        cv2.fillPoly(big, [ring], (0.95, 0.95, 0.95), cv2.LINE_AA, shift)
        cv2.fillPoly(eyes_mask, [ring], 1, cv2.LINE_8, shift)
        eye = pts[base:base + 6]
        centre = eye.mean(axis=0)
        r = 0.5 * (eye[:, 1].max() - eye[:, 1].min())
        if r * s >= 1:
            pupil = np.zeros(big.shape[:2], np.uint8)
            cv2.circle(pupil, (int(round(centre[0] * s * 16)), int(round(centre[1] * s * 16))),
                       int(round(r * s * 16)), 1, -1, cv2.LINE_8, shift)
            inside = np.zeros_like(pupil)
            cv2.fillPoly(inside, [ring], 1, cv2.LINE_8, shift)
            big[(pupil & inside).astype(bool)] = (0.08, 0.08, 0.1)

    outer = _poly(pts[48:60], s)
    cv2.fillPoly(big, [outer], (0.62, 0.16, 0.18), cv2.LINE_AA, shift)
    cv2.fillPoly(mouth_mask, [outer], 1, cv2.LINE_8, shift)
    inner = pts[60:68]
    if inner[:, 1].max() - inner[:, 1].min() > 0.5 / s:
        cv2.fillPoly(big, [_poly(inner, s)], (0.12, 0.04, 0.05), cv2.LINE_AA, shift)

    img = cv2.resize(big, (size, size), interpolation=cv2.INTER_AREA)
    rng = np.random.default_rng(seed)
    img = img + rng.normal(0.0, _NOISE_STD, img.shape).astype(np.float32)
    image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    landmarks = Landmarks68(pts)
    if not return_masks:
        return image, landmarks
    masks = {
        "eyes": cv2.resize(eyes_mask, (size, size), interpolation=cv2.INTER_AREA) > 0,
        "mouth": cv2.resize(mouth_mask, (size, size), interpolation=cv2.INTER_AREA) > 0,
    }
    return image, landmarks, masks


# ---------------------------------------------------------------------------
# Latent sampling


def sample_identity(rng: np.random.Generator) -> Identity:
    return Identity(
        hue=float(rng.uniform(0.0, 1.0)),
        face_aspect=float(rng.uniform(0.8, 1.2)),
        eye_spacing=float(rng.uniform(0.3, 0.5)),
    )


def sample_expression(rng: np.random.Generator, expression_class: int | None = None) -> Expression:
    curve = float(rng.uniform(-1.0, 1.0))
    mouth_open = float(rng.uniform(0.0, 1.0))
    if expression_class is not None:
        curve = abs(curve) if expression_class >= 2 else -abs(curve)
        mouth_open = 0.5 + mouth_open / 2 if expression_class % 2 else mouth_open / 2
        if expression_class < 2 and curve == 0.0:
            curve = -1e-6
    return Expression(curve, min(mouth_open, 1.0), float(rng.uniform(0.1, 1.0)))


def stratified_hues(n: int, rng: np.random.Generator) -> list[float]:
    """One hue per stratum [k/n, (k+1)/n), strata shuffled across identities."""
    return [float(min((k + u) / n, np.nextafter(1.0, 0.0))) for k, u in zip(rng.permutation(n), rng.random(n))]


def _reflect(value: float, lo: float, hi: float) -> float:
    width = hi - lo
    v = (value - lo) % (2 * width)
    return lo + (v if v <= width else 2 * width - v)


def _walk(expr: Expression, dt: float, drift: float, rng: np.random.Generator) -> Expression:
    steps = rng.normal(0.0, drift * math.sqrt(dt), size=3)
    values = {}
    for (name, (lo, hi)), step in zip(EXPRESSION_BOUNDS.items(), steps):
        values[name] = _reflect(getattr(expr, name) + step, lo, hi)
    return Expression(**values)


def _video_latents(latents0: FaceLatents, n_frames: int, fps: float, drift: float,
                   rng: np.random.Generator) -> list[FaceLatents]:
    out = [latents0]
    for _ in range(1, n_frames):
        expr = _walk(out[-1].expression, 1.0 / fps, drift, rng) if drift > 0 else out[-1].expression
        out.append(replace(latents0, expression=expr))
    return out


def _n_frames(duration_s: float, fps: float) -> int:
    # tolerate float noise in duration * fps
    return max(1, int(math.floor(duration_s * fps + 1e-9)))


def generate_video(
    latents0: FaceLatents,
    duration_s: float,
    fps: float,
    drift: float,
    seed: int,
    *,
    size: int = 64,
    video_id: str = "video",
    identity_id: str = "identity",
    labels: dict | None = None,
) -> list[FrameRecord]:
    """Frames at ``k / fps`` with a reflected random walk on the expression.

    The walk is Brownian with standard deviation ``drift`` per second of
    elapsed time. When ``labels`` is given, it is filled with record key ->
    FaceLatents.
    """
    if duration_s <= 0 or fps <= 0:
        raise ValueError("duration_s and fps must be positive")
    if drift < 0:
        raise ValueError("drift must be >= 0")
    rng = np.random.default_rng(seed)
    n = _n_frames(duration_s, fps)
    frames = []
    for k, lat in enumerate(_video_latents(latents0, n, fps, drift, rng)):
        image, lm = render_face(lat, size, seed=int(rng.integers(2**31)))
        rec = FrameRecord(video_id, identity_id, k / fps, image, lm)
        if labels is not None:
            labels[rec.key] = lat
        frames.append(rec)
    return frames


def generate_corpus(
    n_identities: int,
    videos_per_id: int,
    duration_s: float,
    fps: float,
    drift: float,
    seed: int,
    *,
    size: int = 64,
) -> tuple[DatasetManifest, dict[str, FaceLatents]]:
    """Video corpus plus its label sidecar (record key -> FaceLatents).

    Identity hues are stratified so that no two identities share a colour;
    the other identity factors are i.i.d.
    """
    if n_identities <= 0 or videos_per_id <= 0:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    hues = stratified_hues(n_identities, rng)
    labels: dict[str, FaceLatents] = {}
    records: list[FrameRecord] = []
    for i in range(n_identities):
        ident = replace(sample_identity(rng), hue=hues[i])
        for v in range(videos_per_id):
            lat0 = FaceLatents(ident, sample_expression(rng))
            records += generate_video(
                lat0, duration_s, fps, drift, int(rng.integers(2**31)), size=size,
                video_id=f"id{i:04d}_v{v:02d}", identity_id=f"id{i:04d}", labels=labels,
            )
    return DatasetManifest(records), labels


def generate_labeled_set(
    n_identities: int, per_identity: int, seed: int, *, size: int = 64, id_prefix: str = "probe"
) -> tuple[DatasetManifest, dict[str, FaceLatents]]:
    """Still images with i.i.d. expressions, class-balanced within each identity.

    Stands in for a labeled downstream dataset: each identity is one
    pseudo-video of independent frames spaced 1 s apart.
    """
    if n_identities <= 0 or per_identity <= 0:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    labels: dict[str, FaceLatents] = {}
    records = []
    for i in range(n_identities):
        ident = sample_identity(rng)
        offset = int(rng.integers(N_CLASSES))
        for k in range(per_identity):
            lat = FaceLatents(ident, sample_expression(rng, (k + offset) % N_CLASSES))
            image, lm = render_face(lat, size, seed=int(rng.integers(2**31)))
            rec = FrameRecord(f"{id_prefix}{i:04d}", f"{id_prefix}{i:04d}", float(k), image, lm)
            labels[rec.key] = lat
            records.append(rec)
    return DatasetManifest(records), labels


# ---------------------------------------------------------------------------
# Sidecar and on-disk export


def save_labels(labels: dict[str, FaceLatents], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for key in sorted(labels):
            lat = labels[key]
            row = {
                "key": key,
                "latents": lat.to_dict(),
                "expression_class": lat.expression_class,
                "va": list(lat.va),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_labels(path: str | Path) -> dict[str, FaceLatents]:
    out = {}
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["key"]] = FaceLatents.from_dict(row["latents"])
    return out


def export_images(manifest: DatasetManifest, image_dir: str | Path) -> DatasetManifest:
    """Write in-memory pixels as PNG files; returns a path-referencing manifest."""
    image_dir = Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for rec in manifest:
        if isinstance(rec.image_ref, np.ndarray):
            path = image_dir / f"{rec.video_id}_{rec.timestamp_s:010.4f}.png"
            cv2.imwrite(str(path), cv2.cvtColor(rec.image_ref, cv2.COLOR_RGB2BGR))
            rec = FrameRecord(rec.video_id, rec.identity_id, rec.timestamp_s, str(path), rec.landmarks)
        records.append(rec)
    return DatasetManifest(records)
