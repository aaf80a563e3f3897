"""Self-supervised pretraining: batch assembly, schedule, checkpoint gate."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from .augment import AugConfig, augment_pretrain_view, trace_record
from .data import ContrastiveBatch, DatasetManifest, FrameRecord, Role, View, load_image
from .faceops import DESCRIPTOR_SIZE, CropError, crop_regions
from .losses import (
    DualLoss,
    FNSelection,
    LossConfig,
    cosine_similarity_matrix,
    dual_contrastive_loss,
    maskfn_select,
)
from .models import Descriptor, Encoder, EncoderSpec, descriptor_features, save_checkpoint
from .temporal import SamplingError, TemporalConfig, hard_negative_candidates, sample_hard_negative, sample_positive

log = logging.getLogger(__name__)

STRATEGIES = ("timeaug", "hardneg", "faceswap", "maskfn")


class BatchError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict[str, Any]):
        self.diagnostics = diagnostics
        super().__init__(message)


class Optimizer(str, enum.Enum):
    ADAM = "ADAM"
    SGD = "SGD"


@dataclass
class PretrainConfig:
    batch_size: int = 256
    lr: float = 3e-4
    weight_decay: float = 1e-4
    optimizer: Optimizer = Optimizer.ADAM
    cosine_start_epoch: int = 10
    epochs: int = 150
    steps_per_epoch: int | None = None
    checkpoint_every: int = 5
    checkpoint_acc_gate: float = 0.60
    timeaug: bool = True
    hardneg: bool = True
    faceswap: bool = True
    maskfn: bool = True
    seed: int = 0

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def toggles(self) -> dict[str, bool]:
        return {name: getattr(self, name) for name in STRATEGIES}


# ---------------------------------------------------------------------------
# Schedule and checkpoint gate


def lr_at(epoch: int, cfg: PretrainConfig) -> float:
    """Learning rate for 1-based ``epoch``: constant through ``cosine_start_epoch``,
    then cosine-annealed to zero at the final epoch."""
    start = cfg.cosine_start_epoch
    if epoch <= start or cfg.epochs <= start:
        return cfg.lr
    progress = (epoch - start) / (cfg.epochs - start)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def checkpoint_policy(epoch: int, top1: float, cfg: PretrainConfig, latched: bool = False) -> bool:
    """Save when the accuracy gate has been reached (now or earlier) on a
    multiple of ``checkpoint_every``."""
    reached = latched or top1 >= cfg.checkpoint_acc_gate
    return reached and epoch % cfg.checkpoint_every == 0


class CheckpointGate:
    """Stateful form of :func:`checkpoint_policy`; the gate latches once crossed."""

    def __init__(self, cfg: PretrainConfig):
        self.cfg = cfg
        self.latched = False

    def __call__(self, epoch: int, top1: float) -> bool:
        save = checkpoint_policy(epoch, top1, self.cfg, self.latched)
        self.latched = self.latched or top1 >= self.cfg.checkpoint_acc_gate
        return save


# ---------------------------------------------------------------------------
# Batch assembly


def item_rng(seed: int, epoch: int, step: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, *parts])


@dataclass
class BatchContext:
    manifest: DatasetManifest
    pretrain: PretrainConfig
    temporal: TemporalConfig
    aug: AugConfig
    hooks: dict[str, int] = field(default_factory=dict)
    trace_sink: Callable[[dict], None] | None = None

    def __post_init__(self):
        self._eligible = self._eligible_frames()
        self._videos = sorted(self._eligible)

    def _eligible_frames(self) -> dict[str, list[FrameRecord]]:
        out = {}
        for vid in self.manifest.pretrain_videos():
            frames = self.manifest.video_frames(vid)
            if self.pretrain.hardneg:
                frames = [f for f in frames if hard_negative_candidates(self.manifest, f, self.temporal)[0]]
            if frames:
                out[vid] = frames
        return out

    def count(self, name: str) -> None:
        self.hooks[name] = self.hooks.get(name, 0) + 1


def build_batch(ctx: BatchContext, epoch: int = 1, step: int = 0) -> ContrastiveBatch:
    """Assemble one batch of (anchor, positive[, hard negative]) groups.

    Anchors come from ``batch_size`` distinct videos. Every random choice for a
    group derives from (seed, epoch, step, group, role), so the result does not
    depend on evaluation order.
    """
    cfg = ctx.pretrain
    B = cfg.batch_size
    if len(ctx._videos) < B:
        raise BatchError(f"need {B} eligible videos for a batch, manifest has {len(ctx._videos)}")
    pick = item_rng(cfg.seed, epoch, step).choice(len(ctx._videos), size=B, replace=False)
    manifest = ctx.manifest
    records = manifest.records

    def time_aug(anchor: FrameRecord, rng: np.random.Generator) -> FrameRecord:
        try:
            return sample_positive(manifest, anchor, ctx.temporal, rng)
        except SamplingError:
            ctx.count("timeaug_fallback")
            return anchor

    anchors, positives, hards = [], [], []
    for g, vi in enumerate(pick):
        frames = ctx._eligible[ctx._videos[vi]]
        anchor = frames[int(item_rng(cfg.seed, epoch, step, g).integers(len(frames)))]
        out = augment_pretrain_view(anchor, Role.ANCHOR, ctx.aug, item_rng(cfg.seed, epoch, step, g, 0))
        anchors.append(View(out.image, Role.ANCHOR, g, out.source, out.trace, out.flags))

        rng = item_rng(cfg.seed, epoch, step, g, 1)
        partner = None
        if cfg.faceswap:
            while True:
                partner = records[int(rng.integers(len(records)))]
                if partner.identity_id != anchor.identity_id:
                    break
        out = augment_pretrain_view(
            anchor, Role.POSITIVE, ctx.aug, rng,
            time_aug=time_aug if cfg.timeaug else None, partner=partner, faceswap=cfg.faceswap,
        )
        if "FaceSwap" in out.trace:
            ctx.count("face_swap")
        for flag in out.flags:
            ctx.count(flag)
        positives.append(View(out.image, Role.POSITIVE, g, out.source, out.trace, out.flags))

        if cfg.hardneg:
            rng = item_rng(cfg.seed, epoch, step, g, 2)
            hn = sample_hard_negative(manifest, anchor, ctx.temporal, rng)
            out = augment_pretrain_view(hn, Role.HARD_NEGATIVE, ctx.aug, rng)
            hards.append(View(out.image, Role.HARD_NEGATIVE, g, out.source, out.trace, out.flags))

    views = anchors + positives + hards
    exclusions = [frozenset({g, B + g}) for g in range(B)]
    batch = ContrastiveBatch(views, exclusions)
    if ctx.trace_sink is not None:
        for idx, v in enumerate(views):
            ctx.trace_sink({"epoch": epoch, "step": step, "view": idx, "role": v.role.value, "group": v.group_id,
                            "source": v.source.key, "ops": v.trace, "flags": v.flags})
    return batch


def batch_tensor(batch: ContrastiveBatch) -> torch.Tensor:
    return torch.from_numpy(np.stack([v.image for v in batch.views]))


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochStats:
    epoch: int
    loss: float
    l1: float
    l2: float
    top1: float
    lr: float
    counters: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "loss": self.loss, "L1": self.l1, "L2": self.l2, "top1": self.top1,
                "lr": self.lr, **self.counters}


class DescriptorCache:
    """Eye/mouth descriptors of un-augmented source frames, computed once per record."""

    def __init__(self, descriptor: Descriptor, margin_frac: float = 0.15):
        self.descriptor = descriptor
        self.margin_frac = margin_frac
        self._cache: dict[str, torch.Tensor] = {}

    def __call__(self, records: list[FrameRecord]) -> torch.Tensor:
        missing = [r for r in dict.fromkeys(records) if r.key not in self._cache]
        if missing:
            eyes, mouths = [], []
            for r in missing:
                try:
                    e, m, _ = crop_regions(load_image(r), r.landmarks, self.margin_frac, DESCRIPTOR_SIZE)
                except CropError:
                    e = m = np.zeros((DESCRIPTOR_SIZE, DESCRIPTOR_SIZE, 3), np.uint8)
                eyes.append(e)
                mouths.append(m)
            z = descriptor_features(np.stack(eyes), np.stack(mouths), self.descriptor)
            for r, row in zip(missing, z):
                self._cache[r.key] = row
        return torch.stack([self._cache[r.key] for r in records])


class Pretrainer:
    def __init__(
        self,
        manifest: DatasetManifest,
        pretrain: PretrainConfig,
        temporal: TemporalConfig,
        aug: AugConfig,
        loss: LossConfig,
        encoder_spec: EncoderSpec,
        *,
        trace_sink: Callable[[dict], None] | None = None,
    ):
        self.cfg = pretrain
        self.loss_cfg = loss
        if pretrain.maskfn and loss.n_fn * 8 > pretrain.batch_size:
            raise ValueError(f"n_fn={loss.n_fn} too large for batch_size={pretrain.batch_size} (need n_fn <= B/8)")
        self.ctx = BatchContext(manifest, pretrain, temporal, aug, trace_sink=trace_sink)
        torch.manual_seed(pretrain.seed)
        self.encoder = Encoder(encoder_spec)
        self.descriptors = DescriptorCache(Descriptor(), aug.margin_frac) if pretrain.maskfn else None
        params = self.encoder.parameters()
        if pretrain.optimizer is Optimizer.ADAM:
            self.optimizer = torch.optim.Adam(params, lr=pretrain.lr, weight_decay=pretrain.weight_decay)
        else:
            self.optimizer = torch.optim.SGD(params, lr=pretrain.lr, momentum=0.9, weight_decay=pretrain.weight_decay)
        self.gate = CheckpointGate(pretrain)

    @property
    def steps_per_epoch(self) -> int:
        if self.cfg.steps_per_epoch:
            return self.cfg.steps_per_epoch
        n_anchor_frames = sum(len(f) for f in self.ctx._eligible.values())
        return max(1, n_anchor_frames // self.cfg.batch_size)

    def select_false_negatives(self, batch: ContrastiveBatch) -> FNSelection:
        if not self.cfg.maskfn:
            return FNSelection.empty(len(batch.groups))
        self.ctx.count("maskfn_select")
        z = self.descriptors([v.source for v in batch.views])
        return maskfn_select(z, batch, self.loss_cfg.n_fn)

    def step(self, batch: ContrastiveBatch) -> DualLoss:
        images = batch_tensor(batch)
        self.encoder.train()
        _, z = self.encoder(images)
        S = cosine_similarity_matrix(z)
        fn = self.select_false_negatives(batch)
        out = dual_contrastive_loss(S, batch, fn, self.loss_cfg)
        if not torch.isfinite(out.total):
            with torch.no_grad():
                diag = {"batch_keys": batch.keys, "sim_min": float(S.min()), "sim_max": float(S.max())}
            raise NonFiniteLossError(f"non-finite loss {out.total.item()}", diag)
        self.optimizer.zero_grad(set_to_none=True)
        out.total.backward()
        self.optimizer.step()
        return out

    def train_epoch(self, epoch: int) -> EpochStats:
        lr = lr_at(epoch, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        before = dict(self.ctx.hooks)
        sums = np.zeros(4)
        n = self.steps_per_epoch
        for step in range(n):
            batch = build_batch(self.ctx, epoch, step)
            out = self.step(batch)
            sums += [out.total.item(), out.l1.item(), out.l2.item(), out.top1]
        counters = {k: v - before.get(k, 0) for k, v in self.ctx.hooks.items()}
        loss, l1, l2, top1 = (float(v) for v in sums / n)
        return EpochStats(epoch, loss, l1, l2, top1, lr, counters)

    def fit(
        self,
        out_dir: str | Path | None = None,
        *,
        meta: dict[str, Any] | None = None,
        on_epoch: Callable[[EpochStats], None] | None = None,
    ) -> list[EpochStats]:
        history = []
        out = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out is not None:
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)
            metrics_fh = (out / "metrics.jsonl").open("w")
        try:
            for epoch in range(1, self.cfg.epochs + 1):
                stats = self.train_epoch(epoch)
                history.append(stats)
                log.info("epoch %d loss %.4f top1 %.3f lr %.2e", epoch, stats.loss, stats.top1, stats.lr)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps({**stats.to_dict(), **(meta or {})}, sort_keys=True) + "\n")
                    metrics_fh.flush()
                if out is not None and self.gate(epoch, stats.top1):
                    save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}.ckpt", self.encoder,
                                    {**(meta or {}), "epoch": epoch, "top1": stats.top1})
                if on_epoch is not None:
                    on_epoch(stats)
            if out is not None:
                save_checkpoint(out / "checkpoints" / "last.ckpt", self.encoder,
                                {**(meta or {}), "epoch": self.cfg.epochs, "top1": history[-1].top1})
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        return history
