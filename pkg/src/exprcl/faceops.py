"""Landmark-driven geometry and appearance operations.

Images are HxWx3 arrays; uint8 inputs are accepted everywhere and float
images are assumed to lie in [0, 1].
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import NamedTuple

import cv2
import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .data import EYES, MOUTH, Landmarks68

log = logging.getLogger(__name__)

# eye + nose landmarks: the rigid part of the face used for alignment
ALIGNMENT_SUBSET = tuple(range(27, 48))
DESCRIPTOR_SIZE = 56


class GeometryError(ValueError):
    pass


class FaceSwapError(RuntimeError):
    pass


class CropError(ValueError):
    pass


def as_float(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32, copy=False)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Hull and polygon helpers


def landmark_hull(lm: Landmarks68 | np.ndarray) -> np.ndarray:
    """Convex hull vertices of the points, counterclockwise in the (x, y) plane."""
    pts = lm.points if isinstance(lm, Landmarks68) else np.asarray(lm, dtype=np.float64)
    try:
        hull = ConvexHull(pts)
    except (QhullError, ValueError) as exc:
        raise GeometryError(f"degenerate landmark set: {exc}") from None
    return pts[hull.vertices]


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def polygon_mask(poly: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside ``poly``."""
    mask = np.zeros(shape[:2], np.uint8)
    cv2.fillPoly(mask, [np.round(poly * 16).astype(np.int32).reshape(-1, 1, 2)], 1, cv2.LINE_8, 4)
    return mask.astype(bool)


# ---------------------------------------------------------------------------
# Alignment


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: float  # radians; matrix [[cos, -sin], [sin, cos]] acting on (x, y)
    tx: float
    ty: float
    residual_rms: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        c, s = self.scale * np.cos(self.rotation), self.scale * np.sin(self.rotation)
        return np.array([[c, -s, self.tx], [s, c, self.ty]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        m = self.matrix
        return np.asarray(pts) @ m[:, :2].T + m[:, 2]


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    var_s = float((a**2).sum())
    if var_s <= 1e-12:
        raise GeometryError("source landmarks have zero variance")
    # closed-form least squares for z -> s e^{i theta} z + t over complex points
    num_re = float((a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]).sum())
    num_im = float((a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum())
    rotation = float(np.arctan2(num_im, num_re))
    scale = float(np.hypot(num_re, num_im) / var_s)
    c, s = scale * np.cos(rotation), scale * np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    t = mu_d - rot @ mu_s
    resid = src @ rot.T + t - dst
    rms = float(np.sqrt((resid**2).sum(axis=1).mean()))
    return SimilarityTransform(scale, rotation, float(t[0]), float(t[1]), rms)


def estimate_alignment(
    src_lm: Landmarks68, dst_lm: Landmarks68, subset: tuple[int, ...] = ALIGNMENT_SUBSET
) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``src_lm`` onto ``dst_lm``."""
    return _fit_similarity(src_lm.subset(subset), dst_lm.subset(subset))


def interocular_distance(lm: Landmarks68) -> float:
    return float(np.linalg.norm(lm.region("left_eye").mean(axis=0) - lm.region("right_eye").mean(axis=0)))


# ---------------------------------------------------------------------------
# Colour transfer


def color_correct(
    src_img: np.ndarray, dst_img: np.ndarray, region: np.ndarray, *, eps: float = 1e-6
) -> tuple[np.ndarray, bool]:
    """Match per-channel mean and std of ``src_img`` to ``dst_img`` inside ``region``.

    ``region`` is a polygon (Nx2) or a boolean mask. Returns the float image
    and whether the mean-shift-only fallback was used (zero source variance).
    Pixels outside the region are returned unchanged.
    """
    src, dst = as_float(src_img), as_float(dst_img)
    if src.shape != dst.shape:
        raise ValueError(f"image shapes differ: {src.shape} vs {dst.shape}")
    mask = region if region.dtype == bool else polygon_mask(region, src.shape)
    if not mask.any():
        raise GeometryError("colour-correction region is empty")
    out = src.copy()
    s_px, d_px = src[mask].astype(np.float64), dst[mask].astype(np.float64)
    mu_s, mu_d = s_px.mean(axis=0), d_px.mean(axis=0)
    sd_s, sd_d = s_px.std(axis=0), d_px.std(axis=0)
    fallback = bool(np.any(sd_s < eps))
    if fallback:
        log.debug("zero in-region source variance; mean shift only")
        gain = np.ones(3)
    else:
        gain = sd_d / sd_s
    out[mask] = np.clip((s_px - mu_s) * gain + mu_d, 0.0, 1.0).astype(np.float32)
    return out, fallback


# ---------------------------------------------------------------------------
# FaceSwap


class SwapResult(NamedTuple):
    image: np.ndarray  # uint8
    landmarks: Landmarks68  # s_emo landmarks mapped into the s_id frame
    transform: SimilarityTransform
    alpha: np.ndarray  # blending weight of the transplanted region
    color_fallback: bool


def feather_alpha(mask: np.ndarray, band: float) -> np.ndarray:
    """Weight rising from 0 at the mask boundary to 1 at ``band`` pixels inside."""
    if band <= 0:
        return mask.astype(np.float32)
    dist = cv2.distanceTransform(mask.astype(np.uint8), cv2.DIST_L2, 5)
    return np.clip(dist / band, 0.0, 1.0).astype(np.float32) * mask


def face_swap(
    s_emo: tuple[np.ndarray, Landmarks68],
    s_id: tuple[np.ndarray, Landmarks68],
    *,
    feather_frac: float = 0.05,
    alignment_residual_max: float = 0.25,
) -> SwapResult:
    """Transplant the landmark-hull region of ``s_emo`` into ``s_id``.

    ``s_emo`` is similarity-aligned to ``s_id`` on the eye/nose landmarks,
    colour-corrected toward ``s_id`` inside ``s_id``'s landmark hull, and
    blended in with a weight that fades to zero at the hull boundary. Pixels
    outside the hull are copied from ``s_id`` unchanged.
    """
    emo_img, emo_lm = s_emo
    id_img, id_lm = s_id
    if emo_img.shape != id_img.shape:
        # resample s_emo into s_id's canvas; landmarks follow
        h, w = id_img.shape[:2]
        sy, sx = h / emo_img.shape[0], w / emo_img.shape[1]
        emo_img = cv2.resize(emo_img, (w, h), interpolation=cv2.INTER_LINEAR)
        emo_lm = Landmarks68(emo_lm.points * np.array([sx, sy]))
    try:
        tf = estimate_alignment(emo_lm, id_lm)
        hull = landmark_hull(id_lm)
    except GeometryError as exc:
        raise FaceSwapError(str(exc)) from None
    iod = interocular_distance(id_lm)
    if tf.residual_rms > alignment_residual_max * iod:
        raise FaceSwapError(
            f"alignment residual {tf.residual_rms:.3f} exceeds {alignment_residual_max} x interocular {iod:.3f}"
        )
    h, w = id_img.shape[:2]
    warped = cv2.warpAffine(
        emo_img, tf.matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )
    mask = polygon_mask(hull, id_img.shape)
    if not mask.any():
        raise FaceSwapError("landmark hull covers no pixels")
    corrected, fallback = color_correct(warped, id_img, mask)
    x0, y0 = hull.min(axis=0)
    x1, y1 = hull.max(axis=0)
    band = feather_frac * float(np.hypot(x1 - x0, y1 - y0))
    alpha = feather_alpha(mask, band)
    base = as_float(id_img)
    blended = to_uint8(base + alpha[..., None] * (corrected - base))
    id_u8 = id_img if id_img.dtype == np.uint8 else to_uint8(as_float(id_img))
    out = np.where((alpha > 0)[..., None], blended, id_u8)
    return SwapResult(out, emo_lm.transformed(tf.matrix), tf, alpha, fallback)


# ---------------------------------------------------------------------------
# Eye / mouth regions


@dataclass(frozen=True)
class RegionBoxes:
    eyes_box: tuple[int, int, int, int]
    mouth_box: tuple[int, int, int, int]
    margin_frac: float = 0.15
    eyes_degenerate: bool = False
    mouth_degenerate: bool = False


def region_box(
    points: np.ndarray, margin_frac: float, image_w: int | None = None, image_h: int | None = None
) -> tuple[tuple[int, int, int, int], bool]:
    """Integer pixel box [x0, x1) x [y0, y1) around ``points`` with margin.

    The margin on every side is ``margin_frac`` times the larger box side.
    Returns the box and whether it is degenerate after clipping.
    """
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = margin_frac * float((hi - lo).max())
    x0, y0 = np.floor(lo - pad).astype(int)
    x1, y1 = np.ceil(hi + pad).astype(int) + 1
    if image_w is not None:
        x0, x1 = max(0, x0), min(image_w, x1)
    if image_h is not None:
        y0, y1 = max(0, y0), min(image_h, y1)
    box = (int(x0), int(y0), int(x1), int(y1))
    degenerate = bool((hi - lo).max() <= 0 or x1 <= x0 or y1 <= y0)
    return box, degenerate


def region_boxes(lm: Landmarks68, image_shape: tuple[int, ...] | None, margin_frac: float = 0.15) -> RegionBoxes:
    w = h = None
    if image_shape is not None:
        h, w = image_shape[:2]
    eyes, eyes_bad = region_box(lm.subset(EYES), margin_frac, w, h)
    mouth, mouth_bad = region_box(lm.subset(MOUTH), margin_frac, w, h)
    return RegionBoxes(eyes, mouth, margin_frac, eyes_bad, mouth_bad)


def crop_regions(
    img: np.ndarray, lm: Landmarks68, margin_frac: float = 0.15, out_size: int = DESCRIPTOR_SIZE
) -> tuple[np.ndarray, np.ndarray, RegionBoxes]:
    boxes = region_boxes(lm, img.shape, margin_frac)
    crops = []
    for name, box, bad in (("eyes", boxes.eyes_box, boxes.eyes_degenerate), ("mouth", boxes.mouth_box, boxes.mouth_degenerate)):
        if bad:
            raise CropError(f"degenerate {name} box {box}")
        x0, y0, x1, y1 = box
        crops.append(cv2.resize(img[y0:y1, x0:x1], (out_size, out_size), interpolation=cv2.INTER_LINEAR))
    return crops[0], crops[1], boxes


class MaskTarget(str, enum.Enum):
    EYES = "EYES"
    MOUTH = "MOUTH"
    BOTH = "BOTH"
    RANDOM = "RANDOM"  # eyes or mouth, chosen uniformly


def mask_regions(
    img: np.ndarray,
    lm: Landmarks68,
    target: MaskTarget | str,
    rng: np.random.Generator | None = None,
    *,
    fill: tuple[float, float, float] | np.ndarray = (0.5, 0.5, 0.5),
    margin_frac: float = 0.15,
) -> np.ndarray:
    """Fill the eye and/or mouth box with ``fill`` (the normalization mean)."""
    target = MaskTarget(target)
    if target is MaskTarget.RANDOM:
        if rng is None:
            raise ValueError("RANDOM target needs an rng")
        target = (MaskTarget.EYES, MaskTarget.MOUTH)[int(rng.integers(2))]
    boxes = region_boxes(lm, img.shape, margin_frac)
    out = as_float(img).copy()
    chosen = []
    if target in (MaskTarget.EYES, MaskTarget.BOTH):
        chosen.append(("eyes", boxes.eyes_box, boxes.eyes_degenerate))
    if target in (MaskTarget.MOUTH, MaskTarget.BOTH):
        chosen.append(("mouth", boxes.mouth_box, boxes.mouth_degenerate))
    for name, (x0, y0, x1, y1), bad in chosen:
        if bad:
            log.warning("skipping degenerate %s box", name)
            continue
        out[y0:y1, x0:x1] = np.asarray(fill, dtype=np.float32)
    return out
