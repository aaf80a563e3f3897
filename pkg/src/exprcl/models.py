"""Encoder backbones, projection head, frozen eye/mouth descriptor and
downstream heads.

Checkpoint file layout (little endian)::

    magic      8 bytes  b"EXPRCKPT"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON: {"spec": ..., "meta": ...,
               "tensors": [{"name", "dtype", "shape"}, ...]}
    blobs      raw tensor bytes, in header order (state_dict order)
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .losses import l2_normalize

CHECKPOINT_MAGIC = b"EXPRCKPT"
CHECKPOINT_VERSION = 1


class ContractError(RuntimeError):
    pass


class Backbone(str, enum.Enum):
    RESIDUAL_50 = "RESIDUAL_50"
    RESIDUAL_18 = "RESIDUAL_18"
    SMALL_CNN = "SMALL_CNN"


@dataclass(frozen=True)
class EncoderSpec:
    backbone: Backbone = Backbone.SMALL_CNN
    proj_dim: int = 128
    width: int = 32
    weights_init: str = "RANDOM_SEEDED"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        if self.proj_dim < 8:
            raise ValueError("proj_dim must be >= 8")
        if self.weights_init not in ("RANDOM_SEEDED", "FILE"):
            raise ValueError(f"unknown weights_init {self.weights_init!r}")

    @property
    def feature_dim(self) -> int:
        return {Backbone.RESIDUAL_50: 2048, Backbone.RESIDUAL_18: 512}.get(self.backbone, 4 * self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.value
        return d


class HeadKind(str, enum.Enum):
    CLASSIFIER = "CLASSIFIER"
    REGRESSOR_VA = "REGRESSOR_VA"


@dataclass(frozen=True)
class HeadSpec:
    kind: HeadKind
    in_dim: int
    out_dim: int
    hidden: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", HeadKind(self.kind))
        if self.kind is HeadKind.REGRESSOR_VA and self.out_dim != 2:
            raise ValueError("REGRESSOR_VA heads output (valence, arousal)")
        if self.hidden is None:
            object.__setattr__(self, "hidden", (self.in_dim, max(1, self.in_dim // 2)))


# ---------------------------------------------------------------------------
# Networks


class SmallCNN(nn.Module):
    """Four stride-2 conv stages, global average pooled to ``4 * width`` features."""

    def __init__(self, width: int = 32):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, 4 * width]
        layers: list[nn.Module] = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)
        self.out_dim = chans[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).mean(dim=(2, 3))


def build_backbone(spec: EncoderSpec) -> nn.Module:
    if spec.backbone is Backbone.SMALL_CNN:
        return SmallCNN(spec.width)
    import torchvision

    net = torchvision.models.resnet50() if spec.backbone is Backbone.RESIDUAL_50 else torchvision.models.resnet18()
    net.fc = nn.Identity()
    return net


class Encoder(nn.Module):
    """Backbone plus a two-layer projection head."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            self.backbone = build_backbone(spec)
            fd = spec.feature_dim
            self.projection = nn.Sequential(nn.Linear(fd, fd), nn.ReLU(inplace=True), nn.Linear(fd, spec.proj_dim))

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3] or images.shape[2] < 56:
            raise ValueError(f"expected a (B, 3, H, H) batch with H >= 56, got {tuple(images.shape)}")
        return self.backbone(images)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.spec.feature_dim:
            raise ValueError(f"expected (B, {self.spec.feature_dim}) features, got {tuple(features.shape)}")
        l2_normalize(features)  # zero rows are rejected
        return l2_normalize(self.projection(features))

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.encode(images)
        return feats, self.project(feats)


class Head(nn.Module):
    """Three-layer MLP head; tanh-bounded for valence/arousal."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        h1, h2 = spec.hidden
        self.mlp = nn.Sequential(
            nn.Linear(spec.in_dim, h1), nn.ReLU(inplace=True),
            nn.Linear(h1, h2), nn.ReLU(inplace=True),
            nn.Linear(h2, spec.out_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected (B, {self.spec.in_dim}) features, got {tuple(features.shape)}")
        out = self.mlp(features)
        return torch.tanh(out) if self.spec.kind is HeadKind.REGRESSOR_VA else out


def head_forward(head: Head, features: torch.Tensor) -> torch.Tensor:
    return head(features)


class Descriptor(nn.Module):
    """Frozen eye/mouth feature extractor used for false-negative selection."""

    def __init__(self, spec: EncoderSpec | None = None):
        super().__init__()
        spec = spec or EncoderSpec(seed=12345)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            self.net = build_backbone(spec)
        self.feature_dim = spec.feature_dim
        self.freeze()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def check_frozen(self) -> None:
        if self.training or any(p.requires_grad for p in self.parameters()):
            raise ContractError("descriptor encoder must be frozen (eval mode, no gradients)")

    @torch.no_grad()
    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        self.check_frozen()
        return self.net(crops)


def standardize_crops(crops: np.ndarray) -> np.ndarray:
    """Per-crop, per-channel zero mean / unit variance (N, H, W, 3) -> (N, 3, H, W)."""
    c = crops.astype(np.float32)
    if c.max() > 1.5:
        c = c / 255.0
    mu = c.mean(axis=(1, 2), keepdims=True)
    sd = c.std(axis=(1, 2), keepdims=True)
    return np.ascontiguousarray(((c - mu) / np.maximum(sd, 1e-3)).transpose(0, 3, 1, 2))


def descriptor_features(eye_crops: np.ndarray, mouth_crops: np.ndarray, descriptor: Descriptor) -> torch.Tensor:
    """Concatenated, individually L2-normalized eye and mouth features.

    Accepts single crops (H, W, 3) or stacks (N, H, W, 3).
    """
    single = eye_crops.ndim == 3
    if single:
        eye_crops, mouth_crops = eye_crops[None], mouth_crops[None]
    z_e = descriptor(torch.from_numpy(standardize_crops(eye_crops)))
    z_m = descriptor(torch.from_numpy(standardize_crops(mouth_crops)))
    z = torch.cat([l2_normalize(z_e), l2_normalize(z_m)], dim=1)
    return z[0] if single else z


# ---------------------------------------------------------------------------
# Hashing and checkpoints


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, encoder: Encoder, meta: dict[str, Any] | None = None) -> None:
    state = encoder.state_dict()
    tensors = []
    blobs = []
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = json.dumps({"spec": encoder.spec.to_dict(), "meta": meta or {}, "tensors": tensors}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint_header(path: str | Path) -> dict[str, Any]:
    with Path(path).open("rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen))


def load_checkpoint(path: str | Path) -> tuple[Encoder, dict[str, Any]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    spec = EncoderSpec(**header["spec"])
    encoder = Encoder(spec)
    state = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor blobs")
    encoder.load_state_dict(state)
    encoder.eval()
    return encoder, header["meta"]
