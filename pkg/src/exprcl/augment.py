"""Per-view augmentation chains for pretraining and downstream training.

Pretraining order (per view role):
    POSITIVE:      TimeAug -> FaceSwap? -> Mask? -> Resize -> Crop -> Flip? -> Jitter? -> Blur? -> Gray? -> Normalize
    ANCHOR / HARD_NEGATIVE: Mask? -> Resize -> Crop -> ... -> Normalize

Downstream training uses the same chain without TimeAug/FaceSwap; downstream
evaluation is Resize -> CenterCrop -> Normalize.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import cv2
import numpy as np

from .data import FrameRecord, Landmarks68, Role, load_image
from .faceops import FaceSwapError, MaskTarget, as_float, face_swap, mask_regions

log = logging.getLogger(__name__)

PRETRAIN_ORDER = ("TimeAug", "FaceSwap", "Mask", "Resize", "Crop", "Flip", "Jitter", "Blur", "Gray", "Normalize")
DOWNSTREAM_ORDER = ("Mask", "Resize", "Crop", "Flip", "Jitter", "Blur", "Gray", "Normalize")
EVAL_ORDER = ("Resize", "CenterCrop", "Normalize")

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugConfig:
    resize: int = 128
    crop: int = 112
    p_flip: float = 0.5
    p_jitter: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    p_gray: float = 0.5
    p_mask: float = 0.8
    p_swap: float = 0.5
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    margin_frac: float = 0.15
    feather_frac: float = 0.05
    alignment_residual_max: float = 0.25

    def __post_init__(self):
        for name in ("p_flip", "p_jitter", "p_blur", "p_gray", "p_mask", "p_swap"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not 0 < self.crop <= self.resize:
            raise ValueError(f"need 0 < crop <= resize, got crop={self.crop}, resize={self.resize}")
        self.blur_sigma = tuple(self.blur_sigma)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean/std need three channels with positive std")

    @property
    def blur_kernel(self) -> int:
        return 2 * int(0.1 * self.crop / 2) + 1


class ViewOutput(NamedTuple):
    image: np.ndarray  # CxHxW float32, normalized
    source: FrameRecord  # frame the pixels came from (after TimeAug)
    trace: list[str]
    flags: list[str]


# ---------------------------------------------------------------------------
# Individual ops (float HxWx3 images in [0, 1])


def resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    interp = cv2.INTER_AREA if img.shape[0] > size else cv2.INTER_LINEAR
    return cv2.resize(img, (size, size), interpolation=interp)


def crop_at(img: np.ndarray, size: int, origin: tuple[int, int]) -> np.ndarray:
    y, x = origin
    return img[y:y + size, x:x + size]


def grayscale(img: np.ndarray) -> np.ndarray:
    g = img @ _LUMA
    return np.repeat(g[..., None], 3, axis=2)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hsv = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift * 360.0, 360.0)
    return np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)


def color_jitter(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue in random order (torchvision semantics)."""
    factors = {
        "brightness": rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness),
        "contrast": rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast),
        "saturation": rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation),
        "hue": rng.uniform(-cfg.hue, cfg.hue),
    }
    out = img
    for op in rng.permutation(4):
        if op == 0:
            out = np.clip(out * factors["brightness"], 0.0, 1.0)
        elif op == 1:
            m = float((out @ _LUMA).mean())
            out = np.clip(factors["contrast"] * out + (1 - factors["contrast"]) * m, 0.0, 1.0)
        elif op == 2:
            g = (out @ _LUMA)[..., None]
            out = np.clip(factors["saturation"] * out + (1 - factors["saturation"]) * g, 0.0, 1.0)
        else:
            out = adjust_hue(out, factors["hue"])
    return out.astype(np.float32)


def gaussian_blur(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    sigma = rng.uniform(*cfg.blur_sigma)
    k = cfg.blur_kernel
    return cv2.GaussianBlur(img, (k, k), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)


def normalize(img: np.ndarray, cfg: AugConfig) -> np.ndarray:
    out = (img - np.asarray(cfg.mean, np.float32)) / np.asarray(cfg.std, np.float32)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def _spatial_chain(
    img: np.ndarray,
    lm: Landmarks68,
    cfg: AugConfig,
    rng: np.random.Generator,
    trace: list[str],
    crop_origin: tuple[int, int] | None = None,
) -> np.ndarray:
    if rng.random() < cfg.p_mask:
        img = mask_regions(img, lm, MaskTarget.RANDOM, rng, fill=cfg.mean, margin_frac=cfg.margin_frac)
        trace.append("Mask")
    img = resize(img, cfg.resize)
    trace.append("Resize")
    if crop_origin is None:
        span = cfg.resize - cfg.crop
        crop_origin = (int(rng.integers(span + 1)), int(rng.integers(span + 1)))
    img = crop_at(img, cfg.crop, crop_origin)
    trace.append("Crop")
    if rng.random() < cfg.p_flip:
        img = img[:, ::-1]
        trace.append("Flip")
    if rng.random() < cfg.p_jitter:
        img = color_jitter(img, cfg, rng)
        trace.append("Jitter")
    if rng.random() < cfg.p_blur:
        img = gaussian_blur(np.ascontiguousarray(img), cfg, rng)
        trace.append("Blur")
    if rng.random() < cfg.p_gray:
        img = grayscale(img)
        trace.append("Gray")
    out = normalize(img, cfg)
    trace.append("Normalize")
    return out


def augment_pretrain_view(
    record: FrameRecord,
    role: Role,
    cfg: AugConfig,
    rng: np.random.Generator,
    *,
    time_aug: Callable[[FrameRecord, np.random.Generator], FrameRecord] | None = None,
    partner: FrameRecord | None = None,
    faceswap: bool = False,
) -> ViewOutput:
    """Augment one pretraining view.

    For POSITIVE views ``time_aug`` (if given) picks the frame to use and, when
    ``faceswap`` is enabled and the Bernoulli(p_swap) draw fires, the frame's
    expression region is transplanted onto ``partner`` (the identity source).
    Swap failures fall back to the un-swapped frame and are flagged.
    """
    role = Role(role)
    trace: list[str] = []
    flags: list[str] = []
    source = record
    if role is Role.POSITIVE and time_aug is not None:
        source = time_aug(record, rng)
        trace.append("TimeAug")
    img = as_float(load_image(source))
    lm = source.landmarks
    if role is Role.POSITIVE and faceswap:
        fire = rng.random() < cfg.p_swap
        if fire:
            if partner is None:
                raise ValueError("FaceSwap fired but no identity partner was supplied")
            try:
                swapped = face_swap(
                    (load_image(source), lm),
                    (load_image(partner), partner.landmarks),
                    feather_frac=cfg.feather_frac,
                    alignment_residual_max=cfg.alignment_residual_max,
                )
                img, lm = as_float(swapped.image), swapped.landmarks
                trace.append("FaceSwap")
            except FaceSwapError as exc:
                log.debug("face swap fallback for %s: %s", source.key, exc)
                flags.append("faceswap_fallback")
    image = _spatial_chain(img, lm, cfg, rng, trace)
    return ViewOutput(image, source, trace, flags)


def augment_downstream_view(
    record: FrameRecord,
    cfg: AugConfig,
    train_mode: bool,
    rng: np.random.Generator | None = None,
    *,
    crop_origin: tuple[int, int] | None = None,
) -> ViewOutput:
    trace: list[str] = []
    img = as_float(load_image(record))
    if train_mode:
        if rng is None:
            raise ValueError("train mode needs an rng")
        return ViewOutput(_spatial_chain(img, record.landmarks, cfg, rng, trace, crop_origin), record, trace, [])
    trace += EVAL_ORDER
    return ViewOutput(eval_transform(img, cfg, crop_origin), record, trace, [])


def eval_transform(img: np.ndarray, cfg: AugConfig, crop_origin: tuple[int, int] | None = None) -> np.ndarray:
    """Resize -> CenterCrop -> Normalize on a uint8 or float HxWx3 image."""
    img = resize(as_float(img), cfg.resize)
    if crop_origin is None:
        off = (cfg.resize - cfg.crop) // 2
        crop_origin = (off, off)
    return normalize(crop_at(img, cfg.crop, crop_origin), cfg)


def is_ordered_subsequence(trace: list[str], order: tuple[str, ...]) -> bool:
    """True when ``trace`` lists ops in the canonical ``order`` without repeats."""
    pos = -1
    for op in trace:
        if op not in order:
            return False
        i = order.index(op)
        if i <= pos:
            return False
        pos = i
    return True


def dataset_stats(images: list[np.ndarray]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over a list of images (uint8 or float)."""
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    n = 0
    for img in images:
        f = as_float(img).reshape(-1, 3).astype(np.float64)
        acc += f.sum(axis=0)
        acc2 += (f**2).sum(axis=0)
        n += f.shape[0]
    mean = acc / n
    std = np.sqrt(np.maximum(acc2 / n - mean**2, 1e-12))
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def trace_record(view_index: int, role: Role, out: ViewOutput, **extra) -> dict:
    return {"view": view_index, "role": Role(role).value, "source": out.source.key, "ops": out.trace,
            "flags": out.flags, **extra}

