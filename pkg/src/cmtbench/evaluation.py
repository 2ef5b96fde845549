"""Evaluation: ranking metrics, localization AP, ROC artifacts, viewpoint
prediction.

AUC uses the rank statistic with ties counted as half.  Accuracy thresholds
the sigmoid score at 0.5.  Localization AP ranks the anomaly samples by
classifier score and counts a prediction as a hit when its box overlaps
the ground truth at IoU >= 0.5; normal samples carry no box and are
excluded from AP.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from .alignment import mean_match_pixel_distance
from .model import CMT, patch_foreground, patch_world_points

SCORE_THRESHOLD = 0.5


@dataclasses.dataclass
class EvalReport:
    auc: float
    accuracy: float
    ap50: float | None
    per_type: dict
    roc: list
    n_samples: int

    def to_json(self) -> dict:
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "ap50": self.ap50,
            "per_type": self.per_type,
            "roc": [[float(f), float(t)] for f, t in self.roc],
            "n_samples": self.n_samples,
            "threshold": SCORE_THRESHOLD,
        }


def auc_score(scores, labels) -> float:
    """Probability a random anomaly outranks a random normal; ties count 0.5.

    Computed via midranks, identical to the O(n^2) pairwise statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: split contains a single class")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy_score(scores, labels, threshold: float = SCORE_THRESHOLD) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    return float(((scores >= threshold).astype(int) == labels).mean())


def roc_points(scores, labels) -> list:
    """(fpr, tpr) step curve from (0,0) to (1,1), thresholds descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    order = np.argsort(-scores, kind="stable")
    lbl = labels[order]
    srt = scores[order]
    n_pos = max(1, int(labels.sum()))
    n_neg = max(1, int(len(labels) - labels.sum()))
    tp = np.cumsum(lbl)
    fp = np.cumsum(1 - lbl)
    keep = np.append(srt[1:] != srt[:-1], True)  # last point of each tie group
    pts = [(0.0, 0.0)]
    pts += [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fp[keep], tp[keep])]
    if pts[-1] != (1.0, 1.0):
        pts.append((1.0, 1.0))
    return pts


def bbox_iou_xyxy(a, b) -> float:
    """IoU of two pixel boxes given as [top, left, bottom, right)."""
    top = max(a[0], b[0])
    left = max(a[1], b[1])
    bot = min(a[2], b[2])
    right = min(a[3], b[3])
    inter = max(0, bot - top) * max(0, right - left)
    area_a = max(0, a[2] - a[0]) * max(0, a[3] - a[1])
    area_b = max(0, b[2] - b[0]) * max(0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def bbox_norm_to_pixels(box, resolution: int) -> list:
    """Normalized (cx, cy, w, h) -> pixel [top, left, bottom, right)."""
    cx, cy, w, h = (float(v) * resolution for v in box)
    return [cy - h / 2.0, cx - w / 2.0, cy + h / 2.0, cx + w / 2.0]


def average_precision_at_50(scores, hits, n_gt: int) -> float:
    """AP over score-ranked predictions; `hits` marks IoU >= 0.5 matches."""
    if n_gt == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(hits, dtype=bool)[order]
    tp = np.cumsum(hits)
    precision = tp / (np.arange(len(hits)) + 1)
    return float((precision * hits).sum() / n_gt)


def write_roc_csv(path, pts) -> None:
    with open(path, "w") as fh:
        fh.write("fpr,tpr\n")
        for f, t in pts:
            fh.write(f"{f!r},{t!r}\n")


def write_roc_svg(path, pts, title: str = "ROC") -> None:
    """Standalone SVG plot: unit square, diagonal, and the ROC polyline."""
    size, margin = 360, 40
    span = size - 2 * margin

    def xy(f, t):
        return margin + f * span, size - margin - t * span

    poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(f, t) for f, t in pts))
    x0, y0 = xy(0, 0)
    x1, y1 = xy(1, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#bbbbbb" stroke-dasharray="4 4"/>',
        f'<polyline points="{poly}" fill="none" stroke="#c0392b" stroke-width="2"/>',
        f'<text x="{size / 2:.0f}" y="{margin - 12}" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" font-size="12">false positive rate</text>',
        f'<text x="12" y="{size / 2:.0f}" font-size="12" transform="rotate(-90 12 {size / 2:.0f})" text-anchor="middle">true positive rate</text>',
        "</svg>",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# model scoring


def _score_split(root, manifest, split, model, n_views: int):
    """Forward every sample of a split, grouped by shape so each reference
    pack is encoded once.  Returns per-sample scores, labels, boxes, kinds."""
    samples = manifest["samples"][split]
    res = manifest["config"]["resolution"]
    by_shape: dict[str, list[int]] = {}
    for i, rec in enumerate(samples):
        by_shape.setdefault(rec["shape"], []).append(i)
    conditional = isinstance(model, CMT)
    scores = np.zeros(len(samples))
    boxes_px = [None] * len(samples)
    with ad.no_grad():
        for sid, idxs in by_shape.items():
            if conditional:
                vs = ds.load_viewset(root, manifest, sid)
                view_ids = np.arange(min(n_views, len(vs.poses)))
                pts, valid = _view_points(vs, view_ids)
                pack = model.encode_views(ad.tensor(vs.images_3ch()[view_ids]), pts, valid)
            queries = []
            for i in idxs:
                query, _, _, _ = ds.load_sample(root, manifest, split, i)
                queries.append(query)
            qt = ad.tensor(np.stack(queries))
            if conditional:
                out = model.forward_queries(qt, pack)
                logits = out.logit.data
                for j, i in enumerate(idxs):
                    boxes_px[i] = bbox_norm_to_pixels(out.bbox.data[j], res)
            else:
                logits = model.forward_queries(qt).data
            scores[idxs] = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    labels = np.array([rec["label"] for rec in samples], dtype=int)
    kinds = [rec["anomaly"]["kind"] if rec["anomaly"] else None for rec in samples]
    gt_boxes = [rec["bbox"] for rec in samples]
    return scores, labels, boxes_px, gt_boxes, kinds


def _view_points(vs, view_ids):
    pts, valid = [], []
    for v in view_ids:
        p, ok = patch_world_points(vs.depths[v], vs.poses[v])
        pts.append(p)
        valid.append(ok)
    return np.concatenate(pts), np.concatenate(valid)


def evaluate(root, manifest, split, model, n_views: int = 20) -> EvalReport:
    """Score a split; never mutates model parameters."""
    scores, labels, boxes_px, gt_boxes, kinds = _score_split(root, manifest, split, model, n_views)
    auc = auc_score(scores, labels)
    acc = accuracy_score(scores, labels)

    anom = [i for i, l in enumerate(labels) if l == 1]
    ap = None
    if anom and boxes_px[anom[0]] is not None:
        hits = [bbox_iou_xyxy(boxes_px[i], gt_boxes[i]) >= 0.5 for i in anom]
        ap = average_precision_at_50([scores[i] for i in anom], hits, len(anom))

    per_type = {}
    normal_idx = [i for i, l in enumerate(labels) if l == 0]
    for kind in sorted({k for k in kinds if k}):
        k_idx = [i for i, k in enumerate(kinds) if k == kind]
        sub = k_idx + normal_idx
        per_type[kind] = {
            "count": len(k_idx),
            "auc": auc_score(scores[sub], labels[sub]),
            "accuracy": accuracy_score(scores[k_idx], labels[k_idx]),
        }

    return EvalReport(
        auc=auc,
        accuracy=acc,
        ap50=ap,
        per_type=per_type,
        roc=roc_points(scores, labels),
        n_samples=len(labels),
    )


# ---------------------------------------------------------------------------
# viewpoint prediction


def predict_viewpoint(model: CMT, query: np.ndarray, viewset) -> int:
    """Index of the reference view whose pseudo-correspondences sit closest
    to the query patches, measured as mean pixel distance between matched
    patch centers."""
    res = query.shape[-1]
    n = len(viewset.poses)
    with ad.no_grad():
        feats = model.encode(ad.tensor(np.concatenate([query[None], viewset.images_3ch()])))
        z = model.project_beta(feats).data
    zq = z[0]
    q_fg = patch_foreground(query)
    best, best_d = 0, np.inf
    for v in range(n):
        v_fg = patch_foreground(viewset.images[v])
        dist = mean_match_pixel_distance(zq, z[1 + v], q_fg, v_fg, res)
        if dist < best_d:
            best, best_d = v, dist
    return best


def nearest_reference_view(pose_json: dict, poses) -> int:
    """Ground-truth nearest view by angular distance between camera directions."""
    q = np.array(
        [
            np.cos(pose_json["elevation"]) * np.cos(pose_json["azimuth"]),
            np.sin(pose_json["elevation"]),
            np.cos(pose_json["elevation"]) * np.sin(pose_json["azimuth"]),
        ]
    )
    best, best_dot = 0, -np.inf
    for i, p in enumerate(poses):
        d = p.eye / np.linalg.norm(p.eye)
        dot = float(d @ q)
        if dot > best_dot:
            best, best_dot = i, dot
    return best


def viewpoint_report(root, manifest, split, model) -> dict:
    """Top-1 accuracy of predicted vs geometrically nearest reference view."""
    samples = manifest["samples"][split]
    hits, rows = 0, []
    for i, rec in enumerate(samples):
        query, vs, _, _ = ds.load_sample(root, manifest, split, i)
        pred = predict_viewpoint(model, query, vs)
        true = nearest_reference_view(rec["pose"], vs.poses)
        hits += int(pred == true)
        rows.append({"id": rec["id"], "predicted": pred, "nearest": true})
    return {"accuracy": hits / max(1, len(samples)), "n": len(samples), "rows": rows}
