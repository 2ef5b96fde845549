"""Part-level deformations that manufacture anomalous object instances.

Five kinds: positional offset, rotation about a connection point, fracture
(primitive subtraction on a voxel grid), part swap from a donor object,
and part removal.  `qc_plausibility` rejects results that detach the part,
delete an essential part, or leave the object without enough ground
support; callers are expected to redraw on rejection or error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import voxels

EPS_DETACH = 0.02
EPS_GROUND = 0.02
ESSENTIAL_PARTS = {"seat"}

ANOMALY_KINDS = ("positional", "rotational", "broken", "swapped", "missing")

POSITIONAL_RANGE = (0.04, 0.08)
ROTATIONAL_RANGE = (0.2, 0.4)
BROKEN_FRACTION_RANGE = (0.10, 0.90)
BROKEN_RETRIES = 8
SWAP_MIN_HAUSDORFF = 0.02
VOXEL_RESOLUTION = 96


class AnomalyError(ValueError):
    """Deformation could not produce a valid anomaly; caller should redraw."""


class UnbreakablePartError(AnomalyError):
    pass


class NoOpSwapError(AnomalyError):
    pass


@dataclass
class AnomalyRecord:
    kind: str  # one of ANOMALY_KINDS, or "identity" for an unmodified mesh
    part: str
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, "part": self.part, "params": self.params}

    @staticmethod
    def from_json(obj: dict) -> "AnomalyRecord":
        return AnomalyRecord(obj["kind"], obj["part"], obj.get("params", {}))


def identity_record() -> AnomalyRecord:
    return AnomalyRecord("identity", "")


def apply_positional(mesh: geo.Mesh, part: str, rng: np.random.Generator) -> tuple[geo.Mesh, AnomalyRecord]:
    """Translate one part by a per-axis offset with magnitude in [0.04, 0.08]."""
    if part not in mesh.parts:
        raise AnomalyError(f"no part named {part!r}")
    lo, hi = POSITIONAL_RANGE
    mag = rng.uniform(lo, hi, size=3)
    sign = np.where(rng.random(3) < 0.5, -1.0, 1.0)
    delta = mag * sign
    out = mesh.copy()
    ids = out.part_vertex_ids(part)
    out.vertices[ids] += delta
    return out, AnomalyRecord("positional", part, {"delta": delta.tolist()})


def apply_rotational(
    mesh: geo.Mesh, part: str, graph: geo.PartGraph, rng: np.random.Generator
) -> tuple[geo.Mesh, AnomalyRecord]:
    """Rotate one part by |angle| in [0.2, 0.4] rad about one of its connection points."""
    if part not in mesh.parts:
        raise AnomalyError(f"no part named {part!r}")
    points = graph.points_of(part)
    if not points:
        raise AnomalyError(f"part {part!r} has no connection point")
    center = points[rng.integers(len(points))]
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-6:
        axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    lo, hi = ROTATIONAL_RANGE
    angle = rng.uniform(lo, hi) * (-1.0 if rng.random() < 0.5 else 1.0)
    out = mesh.copy()
    ids = out.part_vertex_ids(part)
    out.vertices[ids] = geo.rotate_points(out.vertices[ids], axis, angle, center)
    return out, AnomalyRecord(
        "rotational",
        part,
        {"axis": axis.tolist(), "angle": float(angle), "center": np.asarray(center).tolist()},
    )


def apply_broken(mesh: geo.Mesh, part: str, rng: np.random.Generator) -> tuple[geo.Mesh, AnomalyRecord]:
    """Subtract a random sphere or cube from one part on a voxel grid.

    Primitive placement is resampled until the removed volume fraction lands
    strictly inside (0.10, 0.90); after the initial try plus BROKEN_RETRIES
    resamples the part is declared unbreakable.
    """
    if part not in mesh.parts:
        raise AnomalyError(f"no part named {part!r}")
    verts, faces = geo.part_solid(mesh, part)
    grid = voxels.voxelize_cached(verts, faces, VOXEL_RESOLUTION)
    n_before = int(grid.occupancy.sum())
    if n_before == 0:
        raise UnbreakablePartError(f"part {part!r} voxelizes to nothing")
    centers = grid.centers()
    tris = verts[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    p_face = areas / areas.sum()
    vol_scale = float(n_before) ** (1.0 / 3.0) * grid.cell  # cube root of part volume

    lo_f, hi_f = BROKEN_FRACTION_RANGE
    for _ in range(1 + BROKEN_RETRIES):
        shape = "sphere" if rng.random() < 0.5 else "cube"
        fi = rng.choice(len(tris), p=p_face)
        u, v = rng.random(), rng.random()
        if u + v > 1.0:
            u, v = 1.0 - u, 1.0 - v
        center = tris[fi, 0] + u * (tris[fi, 1] - tris[fi, 0]) + v * (tris[fi, 2] - tris[fi, 0])
        if shape == "sphere":
            size = rng.uniform(0.35, 0.80) * vol_scale
        else:
            size = rng.uniform(0.30, 0.60) * vol_scale
        removed = grid.occupancy & voxels.primitive_mask(centers, shape, center, size)
        frac = removed.sum() / n_before
        if lo_f < frac < hi_f:
            grid.occupancy &= ~removed
            new_v, new_f = voxels.voxel_surface_mesh(grid)
            solids = geo.split_solids(mesh)
            solids[part] = (new_v, new_f)
            out = geo.assemble(solids)
            rec = AnomalyRecord(
                "broken",
                part,
                {
                    "primitive": shape,
                    "center": center.tolist(),
                    "size": float(size),
                    "removed_fraction": float(frac),
                },
            )
            return out, rec
    raise UnbreakablePartError(f"no primitive yielded a fraction in {BROKEN_FRACTION_RANGE} for {part!r}")


def apply_swap(
    mesh_a: geo.Mesh, mesh_b: geo.Mesh, part: str, rng: np.random.Generator
) -> tuple[geo.Mesh, AnomalyRecord]:
    """Replace a part of mesh_a with the same-named part of mesh_b.

    The donor part is translated so the centroids of both parts' connection
    points coincide.  A donor indistinguishable from the original (symmetric
    Hausdorff distance below 0.02) is rejected as a no-op.
    """
    if part not in mesh_a.parts:
        raise AnomalyError(f"no part named {part!r} in the target")
    if part not in mesh_b.parts:
        raise AnomalyError(f"donor has no part named {part!r}")
    graph_a = geo.part_adjacency(mesh_a)
    graph_b = geo.part_adjacency(mesh_b)
    pts_a = graph_a.points_of(part)
    pts_b = graph_b.points_of(part)
    if pts_a and pts_b:
        offset = np.mean(pts_a, axis=0) - np.mean(pts_b, axis=0)
    else:  # isolated part: fall back to bbox-center alignment
        va = mesh_a.vertices[mesh_a.part_vertex_ids(part)]
        vb = mesh_b.vertices[mesh_b.part_vertex_ids(part)]
        offset = (va.max(0) + va.min(0)) / 2 - (vb.max(0) + vb.min(0)) / 2

    orig_v, orig_f = geo.part_solid(mesh_a, part)
    donor_v, donor_f = geo.part_solid(mesh_b, part)
    donor_v = donor_v + offset
    d = geo.hausdorff_distance(orig_v, orig_f, donor_v, donor_f)
    if d < SWAP_MIN_HAUSDORFF:
        raise NoOpSwapError(f"donor part {part!r} indistinguishable (hausdorff {d:.4f})")
    solids = geo.split_solids(mesh_a)
    solids[part] = (donor_v, donor_f)
    out = geo.assemble(solids)
    return out, AnomalyRecord(
        "swapped", part, {"donor": "", "offset": offset.tolist(), "hausdorff": float(d)}
    )


def apply_missing(mesh: geo.Mesh, part: str) -> tuple[geo.Mesh, AnomalyRecord]:
    """Remove one part entirely."""
    if part not in mesh.parts:
        raise AnomalyError(f"no part named {part!r}")
    if len(mesh.parts) - 1 < 2:
        raise AnomalyError("removal would leave fewer than 2 parts")
    solids = geo.split_solids(mesh)
    del solids[part]
    return geo.assemble(solids), AnomalyRecord("missing", part)


def _ground_support_count(mesh: geo.Mesh, eps: float = EPS_GROUND) -> int:
    floor = mesh.vertices[:, 1].min()
    n = 0
    for name in mesh.parts:
        if mesh.vertices[mesh.part_vertex_ids(name)][:, 1].min() <= floor + eps:
            n += 1
    return n


def qc_plausibility(mesh: geo.Mesh, record: AnomalyRecord, graph_before: geo.PartGraph) -> bool:
    """Reject physically implausible deformations.

    False when a moved part lost all contact with the rest of the object
    (beyond EPS_DETACH), when an essential part was removed, or when fewer
    than 3 parts still reach the ground plane.
    """
    if record.kind == "missing" and record.part in ESSENTIAL_PARTS:
        return False
    if record.kind in ("positional", "rotational"):
        others = [n for n in mesh.parts if n != record.part]
        attached = False
        for other in others:
            if geo.part_surface_distance(mesh, record.part, other) <= EPS_DETACH:
                attached = True
                break
        if not attached:
            return False
    if _ground_support_count(mesh) < 3:
        return False
    return True
