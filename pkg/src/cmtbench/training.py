"""Training loop: Adam, query augmentation, the combined objective, and
epoch checkpoints that capture optimizer and RNG state for exact resume.

Batches are shape-grouped: each group is one shape with several of its
queries, so the reference views are encoded once per group per step.  The
classification BCE spans the whole batch; alignment terms are built per
query-view (and view-view) pair with cross-object negatives drawn from the
other group in the batch.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from .alignment import (
    AlignConfig,
    build_negative_bank,
    contrastive_alignment_loss,
    ground_truth_alignment_loss,
    pseudo_correspondences,
    query_patch_anchors,
    total_loss,
)
from .evaluation import evaluate
from .model import CMT, QueryOnlyModel, patch_foreground, patch_world_points, save_model
from .rendering import RenderedView

METRICS_HEADER = "epoch,loss_bce,loss_qv,loss_vv,loss_box,auc_val,acc_val"


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 30
    batch_shapes: int = 2
    queries_per_group: int = 4
    learning_rate: float = 2e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_train_views: int = 10
    n_test_views: int = 20
    seed: int = 0
    augment: bool = True
    lambda_box: float = 1.0
    use_qv: bool = True
    use_vv: bool = True
    weight_a: float = 0.5
    temperature: float = 0.07
    align_anchors: int = 32
    views_per_query: int = 2
    negatives_per_anchor: int = 128
    eval_each_epoch: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if not self.n_train_views <= self.n_test_views <= 20:
            raise ValueError("need n_train_views <= n_test_views <= 20")

    def align(self) -> AlignConfig:
        return AlignConfig(
            temperature=self.temperature,
            weight_a=self.weight_a,
            anchors_per_pair=self.align_anchors,
            views_per_query=self.views_per_query,
            negatives_per_anchor=self.negatives_per_anchor,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        out["opt.t"] = np.array(float(self.t))
        return out

    def load_state(self, named: dict[str, np.ndarray]):
        for k in self.m:
            self.m[k] = np.asarray(named[f"opt.m.{k}"], dtype=np.float32).copy()
            self.v[k] = np.asarray(named[f"opt.v.{k}"], dtype=np.float32).copy()
        self.t = int(named["opt.t"])


# ---------------------------------------------------------------------------
# augmentation


@dataclasses.dataclass
class AugTransform:
    flipped: bool
    top: int
    left: int
    side: int
    out_side: int

    def apply_bbox(self, bbox):
        """Transform a pixel [top, left, bottom, right) box; None if it falls
        outside the crop."""
        if bbox is None:
            return None
        t, l, b, r = (float(v) for v in bbox)
        s = float(self.out_side)
        if self.flipped:
            l, r = s - r, s - l
        scale = s / self.side
        t = (t - self.top) * scale
        b = (b - self.top) * scale
        l = (l - self.left) * scale
        r = (r - self.left) * scale
        t, l = max(t, 0.0), max(l, 0.0)
        b, r = min(b, s), min(r, s)
        if b - t < 1.0 or r - l < 1.0:
            return None
        return [t, l, b, r]


def bilinear_resize(img: np.ndarray, out_side: int) -> np.ndarray:
    """(C, h, w) -> (C, out, out) bilinear resampling at pixel centers."""
    c, h, w = img.shape
    ys = (np.arange(out_side) + 0.5) * (h / out_side) - 0.5
    xs = (np.arange(out_side) + 0.5) * (w / out_side) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror the column axis; applying it twice returns the original."""
    return image[:, :, ::-1].copy()


def augment(image: np.ndarray, rng: np.random.Generator, force_flip: bool | None = None) -> tuple[np.ndarray, AugTransform]:
    """Horizontal flip with probability 0.5, then a random crop of side
    floor(0.875 * S) resized back to S."""
    s = image.shape[-1]
    flip = bool(rng.random() < 0.5) if force_flip is None else force_flip
    out = hflip(image) if flip else image
    side = int(0.875 * s)
    top = int(rng.integers(0, s - side + 1))
    left = int(rng.integers(0, s - side + 1))
    out = bilinear_resize(out[:, top : top + side, left : left + side], s)
    return out, AugTransform(flip, top, left, side, s)


# ---------------------------------------------------------------------------
# bbox losses


def giou_loss(pred: ad.Tensor, gt: np.ndarray) -> ad.Tensor:
    """Mean (1 - GIoU) over box pairs in normalized (cx, cy, w, h)."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 1:
        gt = gt[None]
    if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
        raise ValueError("giou_loss: degenerate ground-truth box")
    px1 = pred[:, 0] - pred[:, 2] * 0.5
    px2 = pred[:, 0] + pred[:, 2] * 0.5
    py1 = pred[:, 1] - pred[:, 3] * 0.5
    py2 = pred[:, 1] + pred[:, 3] * 0.5
    gx1, gx2 = gt[:, 0] - gt[:, 2] / 2, gt[:, 0] + gt[:, 2] / 2
    gy1, gy2 = gt[:, 1] - gt[:, 3] / 2, gt[:, 1] + gt[:, 3] / 2
    zero = ad.tensor(np.zeros(len(gt)))
    iw = ad.maximum(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), zero)
    ih = ad.maximum(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), zero)
    inter = ad.mul(iw, ih)
    area_p = ad.mul(ad.maximum(px2 - px1, zero), ad.maximum(py2 - py1, zero))
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = ad.add(ad.add(area_p, area_g), ad.mul(inter, -1.0))
    iou = ad.div(inter, ad.add(union, 1e-9))
    cw = ad.maximum(px2, gx2) - ad.minimum(px1, gx1)
    ch = ad.maximum(py2, gy2) - ad.minimum(py1, gy1)
    hull = ad.add(ad.mul(cw, ch), 1e-9)
    giou = ad.add(iou, ad.mul(ad.div(ad.add(hull, ad.mul(union, -1.0)), hull), -1.0))
    return ad.mean_t(ad.add(1.0, ad.mul(giou, -1.0)))


def bbox_to_norm(bbox_px, resolution: int) -> np.ndarray:
    """Pixel [top, left, bottom, right) -> normalized (cx, cy, w, h)."""
    t, l, b, r = (float(v) for v in bbox_px)
    s = float(resolution)
    return np.array([(l + r) / 2 / s, (t + b) / 2 / s, (r - l) / s, (b - t) / s])


# ---------------------------------------------------------------------------
# checkpoint plumbing (optimizer + RNG state ride along as tensors)


def _int_to_limbs(value: int, n: int) -> np.ndarray:
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(n)], dtype=np.float32)


def _limbs_to_int(arr) -> int:
    return sum(int(round(float(v))) << (16 * i) for i, v in enumerate(np.asarray(arr).ravel()))


def _encode_rng(rng: np.random.Generator) -> dict[str, np.ndarray]:
    st = rng.bit_generator.state
    return {
        "rng.state": _int_to_limbs(st["state"]["state"], 8),
        "rng.inc": _int_to_limbs(st["state"]["inc"], 8),
        "rng.has_uint32": np.array(float(st["has_uint32"])),
        "rng.uinteger": _int_to_limbs(st["uinteger"], 2),
    }


def _decode_rng(named: dict[str, np.ndarray]) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": _limbs_to_int(named["rng.state"]), "inc": _limbs_to_int(named["rng.inc"])},
        "has_uint32": int(named["rng.has_uint32"]),
        "uinteger": _limbs_to_int(named["rng.uinteger"]),
    }
    return np.random.Generator(bg)


def save_checkpoint(path, model, adam: Adam, rng: np.random.Generator, epoch: int) -> None:
    state = model.state()
    state.update(adam.state())
    state.update(_encode_rng(rng))
    state["meta.epoch"] = np.array(float(epoch))
    ad.save_tensors(path, state)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"kind": type(model).__name__, "config": model.cfg.to_json()}, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, model, adam: Adam):
    """Restore parameters, optimizer moments, and RNG; returns (rng, next_epoch)."""
    named = ad.load_tensors(path)
    model.load_state({k: v for k, v in named.items() if not k.startswith(("opt.", "rng.", "meta."))})
    adam.load_state(named)
    return _decode_rng(named), int(named["meta.epoch"]) + 1


# ---------------------------------------------------------------------------
# batch assembly


class _GroupBatch:
    """One shape with a handful of its queries, ready for the model."""

    def __init__(self, shape_id, queries, labels, boxes_norm, sample_ids):
        self.shape_id = shape_id
        self.queries = queries  # (B, 3, S, S) float32
        self.labels = labels  # (B,) float
        self.boxes_norm = boxes_norm  # list of (4,) arrays or None
        self.sample_ids = sample_ids


_POINTS_CACHE: dict = {}


def _cached_view_points(root, shape_id, view_id, viewset):
    # shape ids restart at s00000 in every dataset, so the root is part of
    # the key; without it a second dataset in the same process would be
    # served the first one's world points
    key = (os.fspath(root), shape_id, int(view_id))
    if key not in _POINTS_CACHE:
        _POINTS_CACHE[key] = patch_world_points(viewset.depths[view_id], viewset.poses[view_id])
    return _POINTS_CACHE[key]


def _load_group(root, manifest, split, shape_id, idxs, cfg: TrainConfig, rng):
    queries, labels, boxes, ids = [], [], [], []
    res = manifest["config"]["resolution"]
    for i in idxs:
        query, _, label, bbox = ds.load_sample(root, manifest, split, i)
        if cfg.augment:
            query, tf = augment(query, rng)
            bbox = tf.apply_bbox(bbox)
        queries.append(query)
        labels.append(float(label))
        boxes.append(None if bbox is None else bbox_to_norm(bbox, res))
        ids.append(manifest["samples"][split][i]["id"])
    return _GroupBatch(shape_id, np.stack(queries), np.array(labels), boxes, ids)


def train_groups(manifest, split: str, per_group: int) -> list:
    """(shape_id, [sample indices]) chunks of at most per_group queries."""
    by_shape: dict[str, list[int]] = {}
    for i, rec in enumerate(manifest["samples"][split]):
        by_shape.setdefault(rec["shape"], []).append(i)
    groups = []
    for sid in sorted(by_shape):
        idxs = by_shape[sid]
        for k in range(0, len(idxs), per_group):
            groups.append((sid, idxs[k : k + per_group]))
    return groups


# ---------------------------------------------------------------------------
# the loop


def _forward_group(model: CMT, root, manifest, group: _GroupBatch, cfg: TrainConfig, rng):
    vs = ds.load_viewset(root, manifest, group.shape_id)
    n_total = len(vs.poses)
    view_ids = np.sort(rng.choice(n_total, size=min(cfg.n_train_views, n_total), replace=False))
    pts, valid = zip(*[_cached_view_points(root, group.shape_id, v, vs) for v in view_ids])
    pack = model.encode_views(ad.tensor(vs.images_3ch()[view_ids]), np.concatenate(pts), np.concatenate(valid))
    out = model.forward_queries(ad.tensor(group.queries), pack)
    return vs, view_ids, pack, out


def _alignment_losses(model, groups_ctx, cfg: TrainConfig, rng):
    """Query-view and view-view InfoNCE terms over the whole batch."""
    align = cfg.align()
    nq = model.cfg.n_patches
    qv_terms, vv_terms = [], []
    for gi, (group, vs, view_ids, pack, out) in enumerate(groups_ctx):
        others = [groups_ctx[gj][3].zv for gj in range(len(groups_ctx)) if gj != gi]
        cross = others[0] if others else None
        for qi in range(len(group.labels)):
            if not cfg.use_qv:
                break
            q_fg = patch_foreground(group.queries[qi])
            anchors = query_patch_anchors(q_fg, align.anchors_per_pair, rng)
            if len(anchors) == 0:
                continue
            picks = rng.choice(len(view_ids), size=min(align.views_per_query, len(view_ids)), replace=False)
            for v in picks:
                sl = slice(v * nq, (v + 1) * nq)
                zv_view = pack.zv[sl]
                view_fg = pack.valid[sl]
                if not view_fg.any():
                    continue
                tables = pseudo_correspondences(out.zq.data[qi], zv_view.data, anchors, view_fg)
                neg_f, neg_valid = build_negative_bank(tables, zv_view, cross, align.negatives_per_anchor, rng)
                qv_terms.append(
                    contrastive_alignment_loss(
                        ad.take(out.zq[qi], anchors),
                        ad.take(zv_view, tables.positives),
                        neg_f,
                        neg_valid,
                        align.temperature,
                    )
                )
        if cfg.use_vv and len(view_ids) >= 2:
            a, b = rng.choice(len(view_ids), size=2, replace=False)
            va = RenderedView(vs.images[view_ids[a]], vs.depths[view_ids[a]], vs.poses[view_ids[a]])
            vb = RenderedView(vs.images[view_ids[b]], vs.depths[view_ids[b]], vs.poses[view_ids[b]])
            loss, skipped = ground_truth_alignment_loss(
                pack.zv[a * nq : (a + 1) * nq],
                pack.zv[b * nq : (b + 1) * nq],
                va,
                vb,
                pack.valid[b * nq : (b + 1) * nq],
                align,
                rng,
                cross_feats=cross,
            )
            if not skipped:
                vv_terms.append(loss)

    def reduce(terms):
        if not terms:
            return ad.tensor(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.mul(acc, 1.0 / len(terms))

    return reduce(qv_terms), reduce(vv_terms)


def _box_loss(groups_ctx, cfg: TrainConfig):
    preds, gts = [], []
    for group, _, _, _, out in groups_ctx:
        for qi, box in enumerate(group.boxes_norm):
            if group.labels[qi] > 0 and box is not None:
                preds.append(ad.reshape(out.bbox[qi], (1, 4)))
                gts.append(box)
    if not preds:
        return ad.tensor(0.0), 0
    pred = ad.concat(preds, axis=0)
    gt = np.stack(gts)
    return ad.add(ad.smooth_l1(pred, ad.tensor(gt)), giou_loss(pred, gt)), len(gts)


def train(root, model, cfg: TrainConfig, out_dir, resume_from=None) -> dict:
    """Run the full loop; writes metrics.csv and one checkpoint per epoch.

    Works for both the conditional model (CMT) and the query-only baseline
    (BCE only, no views).  Aborts with a diagnostic dump on non-finite loss.
    """
    root = os.fspath(root)
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    manifest = ds.load_manifest(root)
    conditional = isinstance(model, CMT)
    adam = Adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    metrics_path = os.path.join(out_dir, "metrics.csv")
    if resume_from is not None:
        rng, start_epoch = load_checkpoint(resume_from, model, adam)
    elif not os.path.exists(metrics_path):
        with open(metrics_path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
    groups = train_groups(manifest, "train", cfg.queries_per_group)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(groups))
        sums = np.zeros(4)
        n_steps = 0
        for k in range(0, len(order), cfg.batch_shapes):
            batch_ids = order[k : k + cfg.batch_shapes]
            groups_ctx = []
            logits, labels = [], []
            for gid in batch_ids:
                sid, idxs = groups[gid]
                group = _load_group(root, manifest, "train", sid, idxs, cfg, rng)
                if conditional:
                    vs, view_ids, pack, out = _forward_group(model, root, manifest, group, cfg, rng)
                    groups_ctx.append((group, vs, view_ids, pack, out))
                    logits.append(out.logit)
                else:
                    logit = model.forward_queries(ad.tensor(group.queries))
                    groups_ctx.append((group, None, None, None, None))
                    logits.append(logit)
                labels.append(group.labels)
            bce = ad.bce_with_logits(ad.concat(logits, axis=0), ad.tensor(np.concatenate(labels)))
            if conditional:
                qv, vv = _alignment_losses(model, groups_ctx, cfg, rng)
                box, n_boxes = _box_loss(groups_ctx, cfg)
                loss = total_loss(bce, qv, vv, cfg.weight_a)
                if cfg.lambda_box > 0 and n_boxes:
                    loss = ad.add(loss, ad.mul(box, cfg.lambda_box))
            else:
                qv = vv = box = ad.tensor(0.0)
                loss = bce
            if not np.isfinite(loss.data):
                dump = {
                    "epoch": epoch,
                    "step": n_steps,
                    "samples": [s for g in groups_ctx for s in g[0].sample_ids],
                    "losses": {
                        "bce": float(bce.data),
                        "qv": float(qv.data),
                        "vv": float(vv.data),
                        "box": float(box.data),
                    },
                }
                with open(os.path.join(out_dir, "diagnostic_batch.json"), "w") as fh:
                    json.dump(dump, fh, indent=1)
                raise TrainingError(f"non-finite loss at epoch {epoch} step {n_steps}; batch dumped")
            adam.zero_grad()
            loss.backward()
            adam.step()
            sums += [float(bce.data), float(qv.data), float(vv.data), float(box.data)]
            n_steps += 1
        means = [float(v) for v in sums / max(1, n_steps)]
        if cfg.eval_each_epoch:
            report = evaluate(root, manifest, "val", model, n_views=cfg.n_test_views)
            auc_val, acc_val = report.auc, report.accuracy
        else:
            auc_val = acc_val = float("nan")
        with open(metrics_path, "a") as fh:
            fh.write(f"{epoch},{means[0]!r},{means[1]!r},{means[2]!r},{means[3]!r},{auc_val!r},{acc_val!r}\n")
        save_checkpoint(os.path.join(out_dir, f"ckpt_epoch{epoch}.cmt"), model, adam, rng, epoch)
        history.append({"epoch": epoch, "loss_bce": means[0], "auc_val": auc_val, "acc_val": acc_val})
    save_model(model, os.path.join(out_dir, "model_final.cmt"))
    return {"history": history, "epochs_run": cfg.epochs - start_epoch}


def overfit_bce(root, model, cfg: TrainConfig, n_samples: int = 10, steps: int = 300) -> list:
    """Optimizer/model wiring check: drive BCE down on a fixed sample set.

    Returns the per-step BCE trace (no augmentation, views fixed by seed).
    """
    manifest = ds.load_manifest(root)
    conditional = isinstance(model, CMT)
    rng = np.random.default_rng(cfg.seed)
    samples = manifest["samples"]["train"][:n_samples]
    by_shape: dict[str, list[int]] = {}
    for i, rec in enumerate(samples):
        by_shape.setdefault(rec["shape"], []).append(i)
    fixed = []
    for sid, idxs in sorted(by_shape.items()):
        group = _load_group(root, manifest, "train", sid, idxs, dataclasses.replace(cfg, augment=False), rng)
        if conditional:
            vs = ds.load_viewset(root, manifest, sid)
            view_ids = np.sort(rng.choice(len(vs.poses), size=min(cfg.n_train_views, len(vs.poses)), replace=False))
            pts, valid = zip(*[_cached_view_points(root, sid, v, vs) for v in view_ids])
            fixed.append((group, (vs.images_3ch()[view_ids], np.concatenate(pts), np.concatenate(valid))))
        else:
            fixed.append((group, None))
    adam = Adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    trace = []
    for _ in range(steps):
        logits, labels = [], []
        for group, view_args in fixed:
            if conditional:
                imgs, pts, valid = view_args
                pack = model.encode_views(ad.tensor(imgs), pts, valid)
                logits.append(model.forward_queries(ad.tensor(group.queries), pack).logit)
            else:
                logits.append(model.forward_queries(ad.tensor(group.queries)))
            labels.append(group.labels)
        bce = ad.bce_with_logits(ad.concat(logits, axis=0), ad.tensor(np.concatenate(labels)))
        adam.zero_grad()
        bce.backward()
        adam.step()
        trace.append(float(bce.data))
    return trace
