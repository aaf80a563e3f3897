"""Contrastive objectives: cosine similarity, InfoNCE, the L1 + w*L2 dual loss
with false-negative positives, and eye/mouth-descriptor false-negative
selection.

Losses run anchor -> views only. The positive (and any selected false
negatives) are removed from the denominator unless
``include_positive_in_denominator`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .data import ContrastiveBatch


class NumericError(ArithmeticError):
    pass


class LossError(ValueError):
    pass


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    l2_weight: float = 0.5
    n_fn: int = 1
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.l2_weight < 0:
            raise ValueError(f"l2_weight must be >= 0, got {self.l2_weight}")
        if self.n_fn < 0:
            raise ValueError(f"n_fn must be >= 0, got {self.n_fn}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    bad = (norms.squeeze(1) <= eps).nonzero().flatten()
    if len(bad):
        raise NumericError(f"zero-norm row {int(bad[0])} cannot be normalized")
    return x / norms


def cosine_similarity_matrix(embeddings) -> torch.Tensor:
    """B x B cosine similarities of the rows of ``embeddings``."""
    rows = embeddings.rows if hasattr(embeddings, "rows") else embeddings
    z = l2_normalize(_as_tensor(rows))
    return z @ z.T


def info_nce(S, anchor: int, positive: int, exclusions: Iterable[int], cfg: LossConfig) -> torch.Tensor:
    """-log( e^{S_ij/t} / sum_{k not excluded} e^{S_ik/t} ) for one anchor.

    The denominator skips ``exclusions`` plus the anchor and positive
    themselves; with ``include_positive_in_denominator`` the positive term is
    added back.
    """
    S = _as_tensor(S)
    logits = S[anchor] / cfg.temperature
    keep = torch.ones(S.shape[1], dtype=torch.bool)
    keep[list(set(exclusions) | {anchor, positive})] = False
    if not keep.any():
        raise LossError(f"anchor {anchor}: empty denominator (batch too small or over-excluded)")
    lse = torch.logsumexp(logits[keep], dim=0)
    if cfg.include_positive_in_denominator:
        lse = torch.logaddexp(lse, logits[positive])
    return lse - logits[positive]


@dataclass
class FNSelection:
    """Per-anchor false-negative picks, indexed by group id."""

    selected: list[list[int]]
    scores: list[list[float]]
    excluded: list[set[int]] = field(default_factory=list)

    @classmethod
    def empty(cls, n_groups: int) -> "FNSelection":
        return cls([[] for _ in range(n_groups)], [[] for _ in range(n_groups)], [set() for _ in range(n_groups)])


def maskfn_select(descriptors, batch: ContrastiveBatch, n_fn: int) -> FNSelection:
    """Pick, per anchor, the ``n_fn`` views whose eye/mouth descriptor is most
    cosine-similar to the anchor's, excluding the anchor's own partners.

    ``descriptors`` holds one concatenated eye/mouth descriptor row per view.
    Ties break toward the lower view index.
    """
    groups = batch.groups
    if n_fn == 0:
        return FNSelection.empty(len(groups))
    with torch.no_grad():
        sims = cosine_similarity_matrix(descriptors).cpu().numpy()
    if sims.shape[0] != len(batch):
        raise SelectionError(f"{sims.shape[0]} descriptor rows for {len(batch)} views")
    out = FNSelection([], [], [])
    for g in groups:
        i = batch.anchor(g)
        partners = batch.partners(g)
        cand = np.array([k for k in range(len(batch)) if k not in partners])
        if len(cand) < n_fn:
            raise SelectionError(f"anchor {i}: {len(cand)} candidates for n_fn={n_fn}")
        order = np.lexsort((cand, -sims[i, cand]))[:n_fn]
        out.selected.append([int(c) for c in cand[order]])
        out.scores.append([float(sims[i, c]) for c in cand[order]])
        out.excluded.append(partners)
    return out


class DualLoss(NamedTuple):
    total: torch.Tensor
    l1: torch.Tensor
    l2: torch.Tensor
    top1: float


def denominator_mask(batch: ContrastiveBatch, fn: FNSelection) -> torch.Tensor:
    """Boolean (groups x views) mask of the views in each anchor's denominator."""
    groups = batch.groups
    mask = torch.ones(len(groups), len(batch), dtype=torch.bool)
    for row, g in enumerate(groups):
        drop = set(batch.exclusion_sets[g]) | {batch.anchor(g), batch.positive(g)} | set(fn.selected[row])
        mask[row, list(drop)] = False
    return mask


def dual_contrastive_loss(S, batch: ContrastiveBatch, fn: FNSelection | None, cfg: LossConfig) -> DualLoss:
    """total = L1 + l2_weight * L2, each averaged over anchors.

    L1 uses the designated positive, L2 averages the same expression over each
    selected false negative; both share one denominator that excludes the
    anchor, positive and false negatives. ``top1`` is the fraction of anchors
    whose positive beats every denominator view.
    """
    S = _as_tensor(S)
    groups = batch.groups
    if fn is None:
        fn = FNSelection.empty(len(groups))
    if len(fn.selected) != len(groups):
        raise LossError("false-negative selection does not match the batch")
    anchors = torch.tensor([batch.anchor(g) for g in groups])
    positives = torch.tensor([batch.positive(g) for g in groups])
    logits = S[anchors] / cfg.temperature
    mask = denominator_mask(batch, fn)
    empty = (~mask.any(dim=1)).nonzero().flatten()
    if len(empty):
        raise LossError(f"anchor {int(anchors[empty[0]])}: empty denominator")
    lse = torch.logsumexp(logits.masked_fill(~mask, float("-inf")), dim=1)
    rows = torch.arange(len(groups))
    pos_logit = logits[rows, positives]
    l1_lse = torch.logaddexp(lse, pos_logit) if cfg.include_positive_in_denominator else lse
    l1 = (l1_lse - pos_logit).mean()

    n_sel = {len(s) for s in fn.selected}
    if n_sel == {0} or not groups:
        l2 = torch.zeros((), dtype=S.dtype)
    else:
        if len(n_sel) != 1:
            raise LossError("every anchor needs the same number of false negatives")
        sel = torch.tensor(fn.selected)
        fn_logit = logits.gather(1, sel)
        l2_lse = lse[:, None]
        if cfg.include_positive_in_denominator:
            l2_lse = torch.logaddexp(l2_lse, fn_logit)
        l2 = (l2_lse - fn_logit).mean(dim=1).mean()
    total = l1 + cfg.l2_weight * l2 if cfg.l2_weight else l1

    with torch.no_grad():
        best_neg = logits.masked_fill(~mask, float("-inf")).max(dim=1).values
        top1 = float((pos_logit >= best_neg).double().mean()) if len(groups) else 0.0
    return DualLoss(total, l1, l2, top1)


def candidate_losses(S, anchor: int, candidates: Sequence[int], exclusions: Iterable[int], cfg: LossConfig) -> list[float]:
    """InfoNCE of ``anchor`` with each candidate in turn as the positive."""
    ex = set(exclusions)
    return [float(info_nce(S, anchor, c, ex, cfg)) for c in candidates]
