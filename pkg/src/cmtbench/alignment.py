"""View-agnostic local feature alignment.

Two contrastive signals shape the beta projection space: query-view pairs
use self-labeled pseudo-correspondences (argmax similarity under the
current features, recomputed every step), and view-view pairs use ground
truth patch correspondences derived from depth and pose.  Both terms are
InfoNCE over unit feature vectors; the classifier's BCE has no tape path
into beta, so these are the only losses that update it.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .model import PATCH, patch_center_pixels
from .rendering import view_view_correspondences


@dataclasses.dataclass
class AlignConfig:
    temperature: float = 0.07
    weight_a: float = 0.5
    anchors_per_pair: int = 32
    views_per_query: int = 2
    negatives_per_anchor: int = 128

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.weight_a <= 1.0:
            raise ValueError("weight_a must be in [0, 1]")


@dataclasses.dataclass
class CorrespondenceTables:
    """Per-anchor match structure for one query-view (or view-view) pair."""

    anchors: np.ndarray  # (A,) patch indices on the anchor side
    positives: np.ndarray  # (A,) matched patch indices on the other side
    negatives: list  # per anchor: candidate indices, positive excluded


def pseudo_correspondences(zq: np.ndarray, zv: np.ndarray, anchors: np.ndarray, view_fg: np.ndarray) -> CorrespondenceTables:
    """Self-labeling: each anchor's positive is its most similar foreground
    view patch under the current features.

    Ties resolve to the anchor's own index when it attains the maximum
    (keeps self-matches exact on identical renders), otherwise to the
    lowest index.  Negatives are the remaining foreground view patches.
    """
    zq = np.asarray(zq)
    zv = np.asarray(zv)
    anchors = np.asarray(anchors, dtype=int)
    view_fg = np.asarray(view_fg, dtype=bool)
    if not view_fg.any():
        raise ValueError("pseudo_correspondences: view has no foreground patches")
    sims = zq[anchors] @ zv.T  # (A, n)
    sims = np.where(view_fg[None, :], sims, -np.inf)
    best = sims.max(axis=1)
    positives = sims.argmax(axis=1)
    own = (anchors < zv.shape[0]) & view_fg[np.minimum(anchors, zv.shape[0] - 1)]
    self_tie = own & (sims[np.arange(len(anchors)), np.minimum(anchors, zv.shape[0] - 1)] == best)
    positives[self_tie] = anchors[self_tie]
    fg_idx = np.flatnonzero(view_fg)
    negatives = [fg_idx[fg_idx != pos] for pos in positives]
    return CorrespondenceTables(anchors, positives, negatives)


def contrastive_alignment_loss(
    anchor_f: ad.Tensor,
    pos_f: ad.Tensor,
    neg_f: ad.Tensor,
    neg_valid: np.ndarray,
    temperature: float,
) -> ad.Tensor:
    """InfoNCE averaged over anchors.

    anchor_f, pos_f: (A, d) unit features; neg_f: (A, K, d) with neg_valid
    marking real rows (padding is masked out of the softmax).
    """
    neg_valid = np.asarray(neg_valid, dtype=bool)
    if neg_valid.ndim != 2 or neg_valid.shape[0] != anchor_f.shape[0]:
        raise ad.ShapeError(f"neg_valid shape {neg_valid.shape} vs anchors {anchor_f.shape}")
    if not neg_valid.any(axis=1).all():
        raise ValueError("contrastive_alignment_loss: an anchor has an empty negative set")
    a = anchor_f.shape[0]
    s_pos = ad.sum_t(ad.mul(anchor_f, pos_f), axis=-1, keepdims=True)  # (A, 1)
    s_neg = ad.reshape(ad.matmul(ad.reshape(anchor_f, (a, 1, anchor_f.shape[1])), ad.swap_last(neg_f)), (a, neg_f.shape[1]))
    logits = ad.mul(ad.concat([s_pos, s_neg], axis=1), 1.0 / temperature)
    mask = np.concatenate([np.zeros((a, 1), dtype=bool), ~neg_valid], axis=1)
    logp = ad.log_softmax(ad.masked_fill(logits, mask, ad.NEG_LARGE), axis=-1)
    return ad.mul(ad.mean_t(logp[:, 0]), -1.0)


def ground_truth_patch_pairs(view_a, view_b) -> tuple[np.ndarray, np.ndarray]:
    """Patch-level correspondences between two posed views.

    A patch of view a participates iff its central pixel has a surviving
    (unoccluded, in-bounds) pixel correspondence into view b; the target is
    the patch containing the matched pixel.
    """
    pixel_pairs, _ = view_view_correspondences(view_a, view_b)
    if len(pixel_pairs) == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    off = PATCH // 2
    central = (pixel_pairs[:, 0] % PATCH == off) & (pixel_pairs[:, 1] % PATCH == off)
    pairs = pixel_pairs[central]
    gw = view_a.image.shape[1] // PATCH
    anchors = (pairs[:, 0] // PATCH) * gw + pairs[:, 1] // PATCH
    targets = (pairs[:, 2] // PATCH) * gw + pairs[:, 3] // PATCH
    return anchors.astype(int), targets.astype(int)


def build_negative_bank(
    tables: CorrespondenceTables,
    view_feats: ad.Tensor,
    cross_feats: ad.Tensor | None,
    cap: int,
    rng: np.random.Generator,
) -> tuple[ad.Tensor, np.ndarray]:
    """Materialize per-anchor negatives as one (A, K, d) gather.

    Same-view negatives come first; cross-object rows fill the remaining
    budget.  Short rows are padded (index 0, flagged invalid).
    """
    n_view = view_feats.shape[0]
    bank = view_feats if cross_feats is None else ad.concat([view_feats, cross_feats], axis=0)
    cross_pool = np.array([], dtype=int)
    if cross_feats is not None:
        n_cross = cross_feats.shape[0]
        room = max(0, cap - max((len(n) for n in tables.negatives), default=0))
        take_n = min(n_cross, room)
        if take_n > 0:
            cross_pool = n_view + rng.choice(n_cross, size=take_n, replace=False)
    rows = [np.concatenate([neg[:cap], cross_pool[: cap - min(len(neg), cap)]]) for neg in tables.negatives]
    width = max(len(r) for r in rows)
    idx = np.zeros((len(rows), width), dtype=int)
    valid = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
        valid[i, : len(r)] = True
    return ad.take(bank, idx), valid


def ground_truth_alignment_loss(
    z_a: ad.Tensor,
    z_b: ad.Tensor,
    view_a,
    view_b,
    fg_b: np.ndarray,
    cfg: AlignConfig,
    rng: np.random.Generator,
    cross_feats: ad.Tensor | None = None,
) -> tuple[ad.Tensor, bool]:
    """View-view InfoNCE from ground-truth correspondences.

    Returns (loss, skipped); a fully occluded pair (no surviving patch
    correspondences) yields a zero loss with the skip flag set.
    """
    anchors, targets = ground_truth_patch_pairs(view_a, view_b)
    if len(anchors) == 0:
        return ad.tensor(0.0), True
    if len(anchors) > cfg.anchors_per_pair:
        pick = rng.choice(len(anchors), size=cfg.anchors_per_pair, replace=False)
        anchors, targets = anchors[pick], targets[pick]
    fg_idx = np.flatnonzero(np.asarray(fg_b, dtype=bool))
    tables = CorrespondenceTables(anchors, targets, [fg_idx[fg_idx != t] for t in targets])
    if any(len(n) == 0 for n in tables.negatives) and cross_feats is None:
        return ad.tensor(0.0), True
    neg_f, neg_valid = build_negative_bank(tables, z_b, cross_feats, cfg.negatives_per_anchor, rng)
    loss = contrastive_alignment_loss(ad.take(z_a, anchors), ad.take(z_b, targets), neg_f, neg_valid, cfg.temperature)
    return loss, False


def total_loss(bce, qv_align, vv_align, a: float) -> ad.Tensor:
    """L = bce + a * query-view + (1 - a) * view-view."""
    if not 0.0 <= a <= 1.0:
        raise ValueError("loss weight a must be in [0, 1]")
    out = bce if isinstance(bce, ad.Tensor) else ad.tensor(bce)
    if a > 0.0:
        out = ad.add(out, ad.mul(qv_align, a))
    if a < 1.0:
        out = ad.add(out, ad.mul(vv_align, 1.0 - a))
    return out


def query_patch_anchors(query_fg: np.ndarray, n_anchors: int, rng: np.random.Generator) -> np.ndarray:
    """Sample up to n_anchors foreground query patches (without replacement)."""
    fg_idx = np.flatnonzero(np.asarray(query_fg, dtype=bool))
    if len(fg_idx) == 0:
        return fg_idx
    if len(fg_idx) <= n_anchors:
        return fg_idx
    return np.sort(rng.choice(fg_idx, size=n_anchors, replace=False))


def mean_match_pixel_distance(zq: np.ndarray, zv: np.ndarray, query_fg: np.ndarray, view_fg: np.ndarray, resolution: int) -> float:
    """Average pixel distance between each foreground query patch center and
    the center of its most similar view patch (used for viewpoint scoring)."""
    anchors = np.flatnonzero(np.asarray(query_fg, dtype=bool))
    if len(anchors) == 0 or not np.asarray(view_fg, dtype=bool).any():
        return float("inf")
    tables = pseudo_correspondences(zq, zv, anchors, view_fg)
    centers = patch_center_pixels(resolution).astype(np.float64)
    d = centers[tables.anchors] - centers[tables.positives]
    return float(np.hypot(d[:, 0], d[:, 1]).mean())
