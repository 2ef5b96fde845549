"""Software rasterizer with z-buffer, plus the view filters and ground-truth
cross-view correspondences built on it.

Shading is flat per face with a headlight at the camera eye evaluated per
pixel, so large faces carry smooth intensity gradients instead of constant
gray.  Background pixels hold intensity 0 and depth 0 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cameras as cam
from .geometry import Mesh

AMBIENT = 0.25
DELTA_DEPTH = 0.01 * cam.SPHERE_RADIUS  # occlusion tolerance for correspondences
DEFAULT_ALBEDO = 0.7
IOU_DISCARD_THRESHOLD = 0.8


@dataclass
class RenderedView:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, camera-axis depth, 0 = background
    pose: cam.CameraPose
    masks: dict[str, np.ndarray] | None = None  # per-part visibility (z-buffer winners)
    footprints: dict[str, np.ndarray] | None = None  # per-part coverage ignoring cross-part occlusion

    def foreground(self) -> np.ndarray:
        return self.depth > 0


def rasterize(
    mesh: Mesh,
    pose: cam.CameraPose,
    res: int | None = None,
    albedos: dict[str, float] | None = None,
    with_masks: bool = False,
) -> RenderedView:
    """Z-buffered flat-shaded render of a normalized mesh.

    `res` overrides the pose's pixel dimensions (square).  Deterministic:
    identical inputs produce bit-identical buffers.
    """
    if res is not None and res != pose.width:
        pose = cam.make_pose(pose.azimuth, pose.elevation, res, pose.radius)
    H, W = pose.height, pose.width

    names = sorted(mesh.parts)
    labels = mesh.face_part_labels()
    albedo_of = np.array([albedos.get(n, DEFAULT_ALBEDO) if albedos else DEFAULT_ALBEDO for n in names])

    pc = (mesh.vertices - pose.eye) @ pose.rotation.T  # camera coords
    z_all = pc[:, 2]
    cols_all = pose.fx * pc[:, 0] / z_all + pose.cx - 0.5
    rows_all = pose.fy * pc[:, 1] / z_all + pose.cy - 0.5

    zbuf = np.full((H, W), np.inf)
    shade_buf = np.zeros((H, W))
    label_buf = np.full((H, W), -1, dtype=np.int64)
    foot = np.zeros((len(names), H, W), dtype=bool) if with_masks else None

    tri_idx = mesh.faces
    # flat face normals in camera space
    tc = pc[tri_idx]
    n_c = np.cross(tc[:, 1] - tc[:, 0], tc[:, 2] - tc[:, 0])
    norms = np.linalg.norm(n_c, axis=1, keepdims=True)
    n_c = n_c / np.where(norms > 1e-15, norms, 1.0)

    for fi in range(len(tri_idx)):
        vid = tri_idx[fi]
        z012 = z_all[vid]
        if (z012 <= 1e-6).any():
            continue
        u = cols_all[vid]
        v = rows_all[vid]
        area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
        if area == 0.0:
            continue
        c0 = max(int(np.ceil(u.min())), 0)
        c1 = min(int(np.floor(u.max())), W - 1)
        r0 = max(int(np.ceil(v.min())), 0)
        r1 = min(int(np.floor(v.max())), H - 1)
        if c0 > c1 or r0 > r1:
            continue
        cc, rr = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        w0 = (u[2] - u[1]) * (rr - v[1]) - (v[2] - v[1]) * (cc - u[1])
        w1 = (u[0] - u[2]) * (rr - v[2]) - (v[0] - v[2]) * (cc - u[2])
        w2 = (u[1] - u[0]) * (rr - v[0]) - (v[1] - v[0]) * (cc - u[0])
        if area < 0:
            w0, w1, w2, a = -w0, -w1, -w2, -area
        else:
            a = area
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        b0, b1, b2 = w0 / a, w1 / a, w2 / a
        inv_z = b0 / z012[0] + b1 / z012[1] + b2 / z012[2]
        with np.errstate(divide="ignore"):
            z = 1.0 / inv_z
        li = int(labels[fi])
        if foot is not None:
            foot[li, rr[inside], cc[inside]] = True
        win = inside & (z < zbuf[rr, cc])
        if not win.any():
            continue
        # headlight shading: per-pixel direction from surface point to the eye
        zw = z[win]
        px = (cc[win] + 0.5 - pose.cx) / pose.fx * zw
        py = (rr[win] + 0.5 - pose.cy) / pose.fy * zw
        inv_len = 1.0 / np.sqrt(px * px + py * py + zw * zw)
        lam = -(px * n_c[fi, 0] + py * n_c[fi, 1] + zw * n_c[fi, 2]) * inv_len
        lam = np.maximum(lam, 0.0)
        shade = albedo_of[li] * (AMBIENT + (1.0 - AMBIENT) * lam)
        zbuf[rr[win], cc[win]] = zw
        shade_buf[rr[win], cc[win]] = shade
        label_buf[rr[win], cc[win]] = li

    fg = np.isfinite(zbuf)
    image = np.where(fg, np.clip(shade_buf, 0.0, 1.0), 0.0).astype(np.float32)
    depth = np.where(fg, zbuf, 0.0).astype(np.float32)
    masks = footprints = None
    if with_masks:
        masks = {n: label_buf == i for i, n in enumerate(names)}
        footprints = {n: foot[i] for i, n in enumerate(names)}
    return RenderedView(image, depth, pose, masks, footprints)


def iou_view_filter(mask_before: np.ndarray, mask_after: np.ndarray) -> bool:
    """Keep the view iff IoU(before, after) <= 0.8.  Two empty masks count
    as IoU 1 (nothing changed on screen, discard)."""
    inter = np.logical_and(mask_before, mask_after).sum()
    union = np.logical_or(mask_before, mask_after).sum()
    iou = 1.0 if union == 0 else inter / union
    return iou <= IOU_DISCARD_THRESHOLD


def anomaly_visible(view: RenderedView, part: str) -> float:
    """Fraction of the part's screen footprint that survives the z-buffer."""
    if view.masks is None or view.footprints is None:
        raise ValueError("render with with_masks=True first")
    total = view.footprints[part].sum()
    if total == 0:
        return 0.0
    return float(view.masks[part].sum() / total)


def view_view_correspondences(a: RenderedView, b: RenderedView) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth pixel matches from view a into view b.

    Every foreground pixel of a is unprojected through its depth and
    reprojected into b; a match is kept when it lands inside the image on a
    foreground pixel whose stored depth agrees with the predicted depth
    within DELTA_DEPTH (rejecting pixels occluded in b).

    Returns (positives, negative_mask): positives is an (N, 4) int array of
    [row_a, col_a, row_b, col_b]; negative_mask is b's foreground mask, from
    which non-matching pixels may be sampled as negatives.
    """
    ra, ca = np.nonzero(a.foreground())
    if len(ra) == 0:
        return np.zeros((0, 4), dtype=np.int64), b.foreground()
    world = cam.unproject(ra, ca, a.depth[ra, ca].astype(np.float64), a.pose)
    rb_f, cb_f, z_pred = cam.project(world, b.pose)
    rb = np.round(rb_f).astype(np.int64)
    cb = np.round(cb_f).astype(np.int64)
    H, W = b.depth.shape
    ok = (rb >= 0) & (rb < H) & (cb >= 0) & (cb < W) & (z_pred > 0)
    db = np.zeros(len(ra))
    db[ok] = b.depth[rb[ok], cb[ok]]
    ok &= (db > 0) & (np.abs(db - z_pred) <= DELTA_DEPTH)
    pos = np.stack([ra[ok], ca[ok], rb[ok], cb[ok]], axis=1)
    return pos, b.foreground()
