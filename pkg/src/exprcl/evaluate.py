"""Downstream evaluation: metrics, linear probe / finetune, face verification."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugConfig, augment_downstream_view, eval_transform
from .data import DatasetManifest, EvalReport, FrameRecord, Task, load_image
from .models import Encoder, Head, HeadKind, HeadSpec, parameter_hash

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FREEZE = "FREEZE"
    FINETUNE = "FINETUNE"


class LabelError(ValueError):
    pass


@dataclass
class DownstreamConfig:
    mode: Mode = Mode.FREEZE
    task: Task = Task.EXPR_CLS
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 20
    n_classes: int = 4
    class_counts: list[int] | None = None
    train_augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.task = Task(self.task)
        if self.task is Task.FR_KNN:
            raise ValueError("FR_KNN is evaluated with knn_face_verification, not run_downstream")
        if self.class_counts is not None:
            if len(self.class_counts) != self.n_classes or min(self.class_counts) < 1:
                raise ValueError("class_counts needs one positive count per class")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"], d["task"] = self.mode.value, self.task.value
        return d


# ---------------------------------------------------------------------------
# Metrics and losses


def _vec(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64).ravel()


def _check_pair(pred, target, min_len: int = 1) -> None:
    if len(pred) != len(target):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(target)} targets")
    if len(pred) < min_len:
        raise ValueError(f"need at least {min_len} values, got {len(pred)}")


def balanced_softmax_ce(logits, labels, class_counts) -> torch.Tensor:
    """Cross-entropy on ``logits + ln(counts)``, averaged over the batch.

    Accepts a single logit vector with an integer label or a (B, C) batch.
    """
    z = torch.as_tensor(logits, dtype=torch.float64) if not isinstance(logits, torch.Tensor) else logits
    single = z.ndim == 1
    if single:
        z = z[None]
    y = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    C = z.shape[1]
    if ((y < 0) | (y >= C)).any():
        raise ValueError(f"label out of range [0, {C})")
    counts = torch.as_tensor(class_counts, dtype=z.dtype)
    if counts.shape != (C,) or (counts < 1).any():
        raise ValueError("class_counts needs one count >= 1 per class")
    return F.cross_entropy(z + counts.log(), y)


def ccc(pred, target) -> float:
    """Concordance correlation coefficient with population variances."""
    x, y = _vec(pred), _vec(target)
    _check_pair(x, y, 2)
    vx = x.var()
    if vx == 0:
        return 0.0
    cov = ((x - x.mean()) * (y - y.mean())).mean()
    return float(2 * cov / (vx + y.var() + (x.mean() - y.mean()) ** 2))


def _ccc_torch(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_pair(x, y, 2)
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    return 2 * cov / (((x - mx) ** 2).mean() + ((y - my) ** 2).mean() + (mx - my) ** 2)


def ccc_loss(pred_v, pred_a, target_v, target_a) -> torch.Tensor:
    """1 - (ccc_valence + ccc_arousal) / 2; differentiable in the predictions."""
    def t(x):
        return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, np.float64))

    return 1 - (_ccc_torch(t(pred_v), t(target_v)) + _ccc_torch(t(pred_a), t(target_a))) / 2


def rmse(pred, target) -> float:
    x, y = _vec(pred), _vec(target)
    _check_pair(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def macro_f1(preds, targets, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both sides scores 0."""
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(targets, dtype=np.int64).ravel()
    _check_pair(p, t)
    if ((p < 0) | (p >= n_classes) | (t < 0) | (t >= n_classes)).any():
        raise ValueError(f"label out of range [0, {n_classes})")
    scores = []
    for c in range(n_classes):
        tp = np.sum((p == c) & (t == c))
        denom = np.sum(p == c) + np.sum(t == c)
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def accuracy(preds, targets) -> float:
    p, t = np.asarray(preds).ravel(), np.asarray(targets).ravel()
    _check_pair(p, t)
    return float(np.mean(p == t))


# ---------------------------------------------------------------------------
# Downstream training


def config_fingerprint(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def split_by_identity(manifest: DatasetManifest, test_frac: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Disjoint train/test manifests with no identity in both."""
    ids = manifest.identities
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_test = max(1, int(round(test_frac * len(ids))))
    if n_test >= len(ids):
        raise ValueError("need at least two identities to split")
    test = {ids[i] for i in perm[:n_test]}
    return manifest.subset(set(ids) - test), manifest.subset(test)


def targets_for(records: Sequence[FrameRecord], labels: dict, task: Task) -> np.ndarray:
    missing = [r.key for r in records if r.key not in labels]
    if missing:
        raise LabelError(f"{len(missing)} records have no label, first: {missing[0]}")
    if task is Task.EXPR_CLS:
        return np.array([labels[r.key].expression_class for r in records], dtype=np.int64)
    return np.array([labels[r.key].va for r in records], dtype=np.float32)


def _images(records: Sequence[FrameRecord], aug: AugConfig, rng: np.random.Generator | None) -> torch.Tensor:
    train = rng is not None
    return torch.from_numpy(np.stack([augment_downstream_view(r, aug, train, rng).image for r in records]))


@torch.no_grad()
def embed(encoder: Encoder, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    encoder.eval()
    return torch.cat([encoder.encode(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def _task_metrics(task: Task, out: torch.Tensor, y: np.ndarray, n_classes: int) -> dict[str, float]:
    if task is Task.EXPR_CLS:
        pred = out.argmax(dim=1).numpy()
        return {"f1": macro_f1(pred, y, n_classes), "acc": accuracy(pred, y)}
    o = out.numpy()
    return {"ccc_v": ccc(o[:, 0], y[:, 0]), "ccc_a": ccc(o[:, 1], y[:, 1]),
            "rmse_v": rmse(o[:, 0], y[:, 0]), "rmse_a": rmse(o[:, 1], y[:, 1])}


def run_downstream(
    encoder: Encoder,
    train: tuple[DatasetManifest, dict],
    test: tuple[DatasetManifest, dict],
    cfg: DownstreamConfig,
    aug: AugConfig,
    *,
    fingerprint: str | None = None,
) -> EvalReport:
    """Train a three-layer head (and, in FINETUNE mode, the backbone) and
    report task metrics on the held-out split."""
    train_recs, test_recs = list(train[0].records), list(test[0].records)
    y_train = targets_for(train_recs, train[1], cfg.task)
    y_test = targets_for(test_recs, test[1], cfg.task)
    if cfg.task is Task.EXPR_CLS:
        counts = cfg.class_counts or np.maximum(np.bincount(y_train, minlength=cfg.n_classes), 1).tolist()
        spec = HeadSpec(HeadKind.CLASSIFIER, encoder.spec.feature_dim, cfg.n_classes)
    else:
        spec = HeadSpec(HeadKind.REGRESSOR_VA, encoder.spec.feature_dim, 2)

    torch.manual_seed(cfg.seed)
    head = Head(spec)
    freeze = cfg.mode is Mode.FREEZE
    if freeze:
        for p in encoder.parameters():
            p.requires_grad_(False)
        params = list(head.parameters())
    else:
        for p in encoder.parameters():
            p.requires_grad_(True)
        params = list(encoder.parameters()) + list(head.parameters())
    backbone_hash = parameter_hash(encoder)
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)

    cached = None
    if freeze and not cfg.train_augment:
        cached = embed(encoder, _images(train_recs, aug, None))
    yt = torch.from_numpy(y_train)
    n = len(train_recs)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        if cached is not None:
            feats_all = cached
        elif freeze:
            feats_all = embed(encoder, _images(train_recs, aug, rng))
        else:
            feats_all = None
        head.train()
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if feats_all is not None:
                feats = feats_all[idx]
            else:
                encoder.train()
                feats = encoder.encode(_images([train_recs[i] for i in idx], aug, rng))
            out = head(feats)
            if cfg.task is Task.EXPR_CLS:
                loss = balanced_softmax_ce(out, yt[idx], counts)
            else:
                target = yt[idx].to(out.dtype)
                loss = ccc_loss(out[:, 0], out[:, 1], target[:, 0], target[:, 1]) if len(idx) > 1 \
                    else F.mse_loss(out, target)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()

    if freeze and parameter_hash(encoder) != backbone_hash:
        raise RuntimeError("backbone parameters changed during a FREEZE run")
    head.eval()
    with torch.no_grad():
        out = head(embed(encoder, _images(test_recs, aug, None)))
    metrics = _task_metrics(cfg.task, out, y_test, cfg.n_classes)
    fp = fingerprint or config_fingerprint({"downstream": cfg.to_dict(), "encoder": encoder.spec.to_dict()})
    return EvalReport(cfg.task, metrics, fp, cfg.seed,
                      {"mode": cfg.mode.value, "n_train": n, "n_test": len(test_recs), "backbone_hash": backbone_hash})


# ---------------------------------------------------------------------------
# Face verification / identification


def calibrate_threshold(distances: np.ndarray, same: np.ndarray) -> float:
    """Threshold maximizing accuracy of ``distance <= thr`` -> same identity.

    Candidates are the midpoints between sorted distances plus both ends;
    ties go to the smallest threshold.
    """
    d = np.sort(np.asarray(distances, dtype=np.float64))
    cands = np.concatenate([[d[0] - 1.0], (d[:-1] + d[1:]) / 2, [d[-1]]])
    acc = [np.mean((distances <= c) == same) for c in cands]
    return float(cands[int(np.argmax(acc))])


def verification_accuracy(
    distances, same, calib_frac: float = 0.5, seed: int = 0
) -> float:
    """Calibrate a distance threshold on one part of the pairs, score on the rest."""
    d = np.asarray(distances, dtype=np.float64)
    s = np.asarray(same, dtype=bool)
    if len(d) < 2:
        raise ValueError("need at least two pairs")
    perm = np.random.default_rng(seed).permutation(len(d))
    n_cal = min(max(1, int(round(calib_frac * len(d)))), len(d) - 1)
    cal, ev = perm[:n_cal], perm[n_cal:]
    thr = calibrate_threshold(d[cal], s[cal])
    return float(np.mean((d[ev] <= thr) == s[ev]))


def knn_identify(gallery: torch.Tensor, gallery_ids: Sequence[str], queries: torch.Tensor,
                 query_ids: Sequence[str], k: int = 1) -> float:
    """Nearest-neighbour identification accuracy under L2 distance (majority of k)."""
    d = torch.cdist(queries.double(), gallery.double())
    nn_idx = d.topk(k, largest=False).indices.numpy()
    hits = 0
    for row, qid in zip(nn_idx, query_ids):
        votes: dict[str, int] = {}
        for j in row:
            votes[gallery_ids[j]] = votes.get(gallery_ids[j], 0) + 1
        hits += max(votes, key=lambda g: (votes[g], -list(votes).index(g))) == qid
    return hits / len(query_ids)


def knn_face_verification(
    encoder: Encoder | Callable[[np.ndarray], torch.Tensor],
    pairs: Sequence[tuple[np.ndarray, np.ndarray, bool]],
    k: int = 1,
    *,
    aug: AugConfig | None = None,
    calib_frac: float = 0.5,
    seed: int = 0,
) -> float:
    """Verification accuracy of L2 distances between frozen backbone features.

    ``encoder`` is either an :class:`Encoder` (images are uint8 HxWx3 and go
    through the evaluation chain of ``aug``) or any callable mapping a stack of
    images to feature rows.
    """
    if not pairs:
        raise ValueError("no verification pairs")
    if k < 1:
        raise ValueError("k must be >= 1")
    a = np.stack([p[0] for p in pairs])
    b = np.stack([p[1] for p in pairs])
    same = np.array([bool(p[2]) for p in pairs])
    if isinstance(encoder, Encoder):
        aug = aug or AugConfig()

        def features(imgs):
            return embed(encoder, torch.from_numpy(np.stack([eval_transform(im, aug) for im in imgs])))
    else:
        features = encoder
    fa, fb = features(a), features(b)
    d = torch.linalg.vector_norm(torch.as_tensor(fa).double() - torch.as_tensor(fb).double(), dim=1).numpy()
    return verification_accuracy(d, same, calib_frac, seed)


def verification_pairs(
    manifest: DatasetManifest, n_pairs: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray, bool]]:
    """Balanced same/different-identity pairs of distinct frames."""
    rng = np.random.default_rng(seed)
    ids = manifest.identities
    by_id = {i: [r for v in manifest.identity_videos(i) for r in manifest.video_frames(v)] for i in ids}
    pairs = []
    for n in range(n_pairs):
        if n % 2 == 0:
            pid = ids[int(rng.integers(len(ids)))]
            i, j = rng.choice(len(by_id[pid]), 2, replace=False)
            ra, rb = by_id[pid][i], by_id[pid][j]
        else:
            ia, ib = rng.choice(len(ids), 2, replace=False)
            ra = by_id[ids[ia]][int(rng.integers(len(by_id[ids[ia]])))]
            rb = by_id[ids[ib]][int(rng.integers(len(by_id[ids[ib]])))]
        pairs.append((load_image(ra), load_image(rb), n % 2 == 0))
    return pairs
