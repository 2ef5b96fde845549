"""Parametric multi-part furniture objects and mesh utilities.

Meshes are triangle soups partitioned into named parts.  Every part is a
single closed, outward-oriented solid (an axis-aligned box or a capped
cylinder, possibly slightly rotated by template styling), and parts never
share vertices, so part-local deformations cannot leak into neighbours.
Coordinates are unitless; `normalize_mesh` rescales a whole object so its
tightest bounding box is centered at the origin with the largest axis
spanning exactly [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("chair", "stool", "bench")
_FAMILY_CODE = {name: i for i, name in enumerate(FAMILIES)}

# Fixed ray direction for parity tests; slightly irrational components so
# rays through axis-aligned geometry never graze edges exactly.
_RAY_DIR = np.array([0.29587585476806849, 0.70710678118654746, 0.64278760968653925])
_RAY_DIR = _RAY_DIR / np.linalg.norm(_RAY_DIR)


class DegenerateMeshError(ValueError):
    """Mesh has zero extent on every axis (or no vertices)."""


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64, indices into vertices
    parts: dict[str, np.ndarray]  # part name -> sorted face indices

    def copy(self) -> "Mesh":
        return Mesh(
            self.vertices.copy(),
            self.faces.copy(),
            {k: v.copy() for k, v in self.parts.items()},
        )

    def part_face_array(self, part: str) -> np.ndarray:
        """(F_p, 3) vertex-index triples of one part."""
        return self.faces[self.parts[part]]

    def part_vertex_ids(self, part: str) -> np.ndarray:
        return np.unique(self.part_face_array(part))

    def part_triangles(self, part: str) -> np.ndarray:
        """(F_p, 3, 3) triangle corner coordinates of one part."""
        return self.vertices[self.part_face_array(part)]

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_part_labels(self) -> np.ndarray:
        """(F,) integer label per face; order matches sorted part names."""
        labels = np.full(len(self.faces), -1, dtype=np.int64)
        for i, name in enumerate(sorted(self.parts)):
            labels[self.parts[name]] = i
        return labels

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class PartGraph:
    contacts: set[tuple[str, str]] = field(default_factory=set)
    connection_points: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def neighbors(self, part: str) -> list[str]:
        out = []
        for a, b in self.contacts:
            if a == part:
                out.append(b)
            elif b == part:
                out.append(a)
        return sorted(out)

    def points_of(self, part: str) -> list[np.ndarray]:
        return [p for pair, p in sorted(self.connection_points.items()) if part in pair]


# ---------------------------------------------------------------------------
# primitive solids


def box_solid(center, half) -> tuple[np.ndarray, np.ndarray]:
    cx, cy, cz = center
    hx, hy, hz = half
    v = np.array(
        [
            [-hx, -hy, -hz],
            [hx, -hy, -hz],
            [hx, hy, -hz],
            [-hx, hy, -hz],
            [-hx, -hy, hz],
            [hx, -hy, hz],
            [hx, hy, hz],
            [-hx, hy, hz],
        ],
        dtype=np.float64,
    ) + np.array([cx, cy, cz])
    f = np.array(
        [
            [0, 3, 2], [0, 2, 1],  # -z
            [4, 5, 6], [4, 6, 7],  # +z
            [0, 1, 5], [0, 5, 4],  # -y
            [3, 7, 6], [3, 6, 2],  # +y
            [0, 4, 7], [0, 7, 3],  # -x
            [1, 2, 6], [1, 6, 5],  # +x
        ],
        dtype=np.int64,
    )
    return v, f


_AXIS_PERM = {"x": (1, 0, 2), "y": (0, 1, 2), "z": (0, 2, 1)}


def cylinder_solid(center, radius, half_height, segments=12, axis="y"):
    """Closed capped cylinder along `axis`."""
    theta = np.arange(segments) * (2.0 * np.pi / segments)
    ring = np.stack([radius * np.cos(theta), np.zeros(segments), radius * np.sin(theta)], axis=1)
    bot = ring + np.array([0.0, -half_height, 0.0])
    top = ring + np.array([0.0, half_height, 0.0])
    v = np.concatenate([bot, top, [[0.0, -half_height, 0.0]], [[0.0, half_height, 0.0]]])
    bc, tc = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([i, segments + i, segments + j])  # side
        faces.append([i, segments + j, j])
        faces.append([bc, i, j])  # bottom cap (-y outward)
        faces.append([tc, segments + j, segments + i])  # top cap (+y outward)
    perm = _AXIS_PERM[axis]
    v = v[:, perm]
    return v + np.asarray(center, dtype=np.float64), np.array(faces, dtype=np.int64)


def rotate_points(points, axis, angle, center):
    """Rodrigues rotation of (N, 3) points about a unit axis through center."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    p = points - center
    cos, sin = np.cos(angle), np.sin(angle)
    rotated = p * cos + np.cross(np.broadcast_to(axis, p.shape), p) * sin + np.outer(p @ axis, axis) * (1.0 - cos)
    return rotated + center


def part_solid(mesh: Mesh, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Extract one part as a standalone (vertices, local faces) solid."""
    ids = mesh.part_vertex_ids(name)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    return mesh.vertices[ids].copy(), remap[mesh.part_face_array(name)]


def split_solids(mesh: Mesh) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """All parts as standalone solids, in the mesh's part order."""
    return {name: part_solid(mesh, name) for name in mesh.parts}


def assemble(solids: dict[str, tuple[np.ndarray, np.ndarray]]) -> Mesh:
    """Merge named (vertices, faces) solids into one multi-part mesh."""
    all_v, all_f, parts = [], [], {}
    v_off = f_off = 0
    for name, (v, f) in solids.items():
        all_v.append(v)
        all_f.append(f + v_off)
        parts[name] = np.arange(f_off, f_off + len(f), dtype=np.int64)
        v_off += len(v)
        f_off += len(f)
    return Mesh(np.concatenate(all_v), np.concatenate(all_f), parts)


# ---------------------------------------------------------------------------
# object generator


def build_parametric_object(seed: int, family: str = "chair") -> Mesh:
    """Deterministically generate a multi-part object in design units.

    Styling (leg count and cross-section, splay/recline angles, arm and
    stretcher presence, proportions) is drawn from seeded uniform ranges so
    the population carries benign intra-class variation.  Ground plane is
    y = 0; the caller normalizes before deformation or rendering.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")
    rng = np.random.default_rng([int(seed), _FAMILY_CODE[family]])
    if family == "chair":
        return _build_chair(rng)
    if family == "stool":
        return _build_stool(rng)
    return _build_bench(rng)


def _leg_solid(top_center, length, size, round_leg, splay_dir, splay):
    """Leg hanging from top_center down to the ground, leaned outward by splay."""
    cx, cy, cz = top_center
    embed = 0.04
    half_h = (length + embed) / 2.0
    center = (cx, cy + embed - half_h, cz)
    if round_leg:
        v, f = cylinder_solid(center, size / 2.0, half_h, segments=12)
    else:
        v, f = box_solid(center, (size / 2.0, half_h, size / 2.0))
    if splay > 0.0:
        pivot = np.array([cx, cy + embed, cz])
        axis = np.cross([0.0, 1.0, 0.0], splay_dir)
        n = np.linalg.norm(axis)
        if n > 1e-12:
            v = rotate_points(v, axis / n, -splay, pivot)
    return v, f


def _build_chair(rng) -> Mesh:
    seat_w = rng.uniform(0.95, 1.35)
    seat_d = rng.uniform(0.85, 1.15)
    seat_t = rng.uniform(0.07, 0.13)
    seat_h = rng.uniform(0.85, 1.05)
    round_leg = rng.random() < 0.5
    leg_s = rng.uniform(0.07, 0.13)
    splay = rng.uniform(0.0, 0.08)
    back_w = seat_w * rng.uniform(0.85, 1.0)
    back_h = rng.uniform(0.75, 1.15)
    back_t = rng.uniform(0.05, 0.09)
    recline = rng.uniform(0.0, 0.15)
    has_arms = rng.random() < 0.4
    arm_h = rng.uniform(0.30, 0.42)
    arm_t = rng.uniform(0.05, 0.09)
    has_stretcher = rng.random() < 0.45
    st_y_frac = rng.uniform(0.25, 0.45)

    solids: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    seat_top = seat_h + seat_t
    solids["seat"] = box_solid((0.0, seat_h + seat_t / 2.0, 0.0), (seat_w / 2.0, seat_t / 2.0, seat_d / 2.0))

    inset = leg_s / 2.0 + 0.02
    leg_xz = [
        (-(seat_w / 2.0 - inset), seat_d / 2.0 - inset),
        (seat_w / 2.0 - inset, seat_d / 2.0 - inset),
        (seat_w / 2.0 - inset, -(seat_d / 2.0 - inset)),
        (-(seat_w / 2.0 - inset), -(seat_d / 2.0 - inset)),
    ]
    for i, (lx, lz) in enumerate(leg_xz, start=1):
        r = np.hypot(lx, lz)
        direction = np.array([lx / r, 0.0, lz / r])
        solids[f"leg_{i}"] = _leg_solid((lx, seat_h, lz), seat_h, leg_s, round_leg, direction, splay)

    bz = -(seat_d / 2.0 - back_t / 2.0)
    bv, bf = box_solid((0.0, seat_top - 0.04 + back_h / 2.0, bz), (back_w / 2.0, back_h / 2.0, back_t / 2.0))
    if recline > 0.0:
        bv = rotate_points(bv, (1.0, 0.0, 0.0), -recline, np.array([0.0, seat_top, bz]))
    solids["back"] = (bv, bf)

    if has_arms:
        for i, sx in enumerate((-1.0, 1.0), start=1):
            ax = sx * (seat_w / 2.0 - arm_t / 2.0)
            solids[f"arm_{i}"] = box_solid(
                (ax, seat_top - 0.04 + arm_h / 2.0, seat_d * 0.05),
                (arm_t / 2.0, arm_h / 2.0, seat_d * 0.32),
            )

    if has_stretcher:
        y_st = seat_h * st_y_frac
        (x1, z1), (x2, _) = leg_xz[0], leg_xz[1]
        # follow the splayed leg centers outward at stretcher height
        shift = np.sin(splay) * (seat_h - y_st)
        x1s, x2s = x1 - shift * abs(x1) / np.hypot(x1, z1), x2 + shift * abs(x2) / np.hypot(x2, z1)
        s = leg_s * 0.8
        solids["stretcher"] = box_solid(
            ((x1s + x2s) / 2.0, y_st, z1),
            ((x2s - x1s) / 2.0 + leg_s / 4.0, s / 2.0, s / 2.0),
        )
    return assemble(solids)


def _build_stool(rng) -> Mesh:
    round_seat = rng.random() < 0.6
    seat_r = rng.uniform(0.42, 0.60)
    seat_t = rng.uniform(0.07, 0.12)
    seat_h = rng.uniform(0.75, 1.00)
    n_legs = 3 if rng.random() < 0.5 else 4
    round_leg = rng.random() < 0.5
    leg_s = rng.uniform(0.07, 0.12)
    splay = rng.uniform(0.0, 0.10)
    ring_frac = rng.uniform(0.55, 0.75)

    solids: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if round_seat:
        solids["seat"] = cylinder_solid((0.0, seat_h + seat_t / 2.0, 0.0), seat_r, seat_t / 2.0, segments=16)
    else:
        solids["seat"] = box_solid((0.0, seat_h + seat_t / 2.0, 0.0), (seat_r, seat_t / 2.0, seat_r))
    rho = seat_r * ring_frac
    start = np.pi / 2.0 if n_legs == 3 else np.pi / 4.0
    for i in range(n_legs):
        ang = start + i * 2.0 * np.pi / n_legs
        lx, lz = rho * np.cos(ang), rho * np.sin(ang)
        direction = np.array([np.cos(ang), 0.0, np.sin(ang)])
        solids[f"leg_{i + 1}"] = _leg_solid((lx, seat_h, lz), seat_h, leg_s, round_leg, direction, splay)
    return assemble(solids)


def _build_bench(rng) -> Mesh:
    seat_w = rng.uniform(1.9, 2.5)
    seat_d = rng.uniform(0.70, 0.95)
    seat_t = rng.uniform(0.08, 0.14)
    seat_h = rng.uniform(0.70, 0.95)
    leg_s = rng.uniform(0.09, 0.15)
    round_leg = rng.random() < 0.3
    splay = rng.uniform(0.0, 0.06)
    has_back = rng.random() < 0.6
    back_h = rng.uniform(0.45, 0.75)
    back_t = rng.uniform(0.05, 0.09)
    recline = rng.uniform(0.0, 0.12)
    has_stretcher = rng.random() < 0.4
    st_y_frac = rng.uniform(0.30, 0.50)

    solids: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    seat_top = seat_h + seat_t
    solids["seat"] = box_solid((0.0, seat_h + seat_t / 2.0, 0.0), (seat_w / 2.0, seat_t / 2.0, seat_d / 2.0))
    inset = leg_s / 2.0 + 0.03
    leg_xz = [
        (-(seat_w / 2.0 - inset), seat_d / 2.0 - inset),
        (seat_w / 2.0 - inset, seat_d / 2.0 - inset),
        (seat_w / 2.0 - inset, -(seat_d / 2.0 - inset)),
        (-(seat_w / 2.0 - inset), -(seat_d / 2.0 - inset)),
    ]
    for i, (lx, lz) in enumerate(leg_xz, start=1):
        r = np.hypot(lx, lz)
        direction = np.array([lx / r, 0.0, lz / r])
        solids[f"leg_{i}"] = _leg_solid((lx, seat_h, lz), seat_h, leg_s, round_leg, direction, splay)
    if has_back:
        bz = -(seat_d / 2.0 - back_t / 2.0)
        bv, bf = box_solid((0.0, seat_top - 0.04 + back_h / 2.0, bz), (seat_w * 0.48, back_h / 2.0, back_t / 2.0))
        if recline > 0.0:
            bv = rotate_points(bv, (1.0, 0.0, 0.0), -recline, np.array([0.0, seat_top, bz]))
        solids["back"] = (bv, bf)
    if has_stretcher:
        y_st = seat_h * st_y_frac
        (x1, z1), (x2, _) = leg_xz[0], leg_xz[1]
        s = leg_s * 0.8
        solids["stretcher"] = box_solid(
            ((x1 + x2) / 2.0, y_st, z1),
            ((x2 - x1) / 2.0 + leg_s / 4.0, s / 2.0, s / 2.0),
        )
    return assemble(solids)


# ---------------------------------------------------------------------------
# normalization


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale the largest axis to [-1, 1]."""
    if len(mesh.vertices) == 0:
        raise DegenerateMeshError("mesh has no vertices")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise DegenerateMeshError("mesh has zero extent on all axes")
    center = (lo + hi) / 2.0
    scale = 2.0 / extent
    return Mesh((mesh.vertices - center) * scale, mesh.faces.copy(), {k: v.copy() for k, v in mesh.parts.items()})


# ---------------------------------------------------------------------------
# distances, containment, volumes


_CHUNK_BUDGET = 2_000_000  # max point-triangle pairs per broadcast block


def point_triangle_distance(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Min distance from each of (P, 3) points to a set of (T, 3, 3) triangles.

    Broadcast implementation of the closest-point-on-triangle construction,
    evaluated in point chunks to bound temporary memory; returns (P,) distances.
    """
    n = len(points)
    step = max(1, _CHUNK_BUDGET // max(len(tris), 1))
    if n > step:
        out = np.empty(n)
        for s in range(0, n, step):
            out[s : s + step] = _point_triangle_distance_block(points[s : s + step], tris)
        return out
    return _point_triangle_distance_block(points, tris)


def _point_triangle_distance_block(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = points[:, None, :]  # (P, 1, 3)
    a, b, c = tris[None, :, 0, :], tris[None, :, 1, :], tris[None, :, 2, :]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ptk,ptk->pt", ab, ap)
    d2 = np.einsum("ptk,ptk->pt", ac, ap)
    bp = p - b
    d3 = np.einsum("ptk,ptk->pt", ab, bp)
    d4 = np.einsum("ptk,ptk->pt", ac, bp)
    cp = p - c
    d5 = np.einsum("ptk,ptk->pt", ab, cp)
    d6 = np.einsum("ptk,ptk->pt", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(np.abs(denom) > 1e-30, vb / denom, 0.0)
        w = np.where(np.abs(denom) > 1e-30, vc / denom, 0.0)
        t_ab = np.where(d1 - d3 != 0.0, d1 / (d1 - d3), 0.0)
        t_ac = np.where(d2 - d6 != 0.0, d2 / (d2 - d6), 0.0)
        t_bc = np.where((d4 - d3) + (d5 - d6) != 0.0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)

    closest = a + v[..., None] * ab + w[..., None] * ac  # face interior candidate
    # vertex regions
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    # edge regions
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[..., None], a + np.clip(t_ab, 0, 1)[..., None] * ab, closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[..., None], a + np.clip(t_ac, 0, 1)[..., None] * ac, closest)
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(on_bc[..., None], b + np.clip(t_bc, 0, 1)[..., None] * (c - b), closest)

    d = np.linalg.norm(p - closest, axis=2)
    return d.min(axis=1)


def points_in_mesh(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Ray-parity containment test; tris (T, 3, 3) must form closed solids."""
    n = len(points)
    step = max(1, _CHUNK_BUDGET // max(len(tris), 1))
    if n > step:
        out = np.empty(n, dtype=bool)
        for s in range(0, n, step):
            out[s : s + step] = _points_in_mesh_block(points[s : s + step], tris)
        return out
    return _points_in_mesh_block(points, tris)


def _points_in_mesh_block(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    d = _RAY_DIR
    v0, v1, v2 = tris[:, 0, :], tris[:, 1, :], tris[:, 2, :]
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(d, e2)  # (T, 3)
    det = np.einsum("tk,tk->t", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = points[:, None, :] - v0[None, :, :]  # (P, T, 3)
    u = np.einsum("ptk,tk->pt", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("ptk,k->pt", qvec, d) * inv_det
    t = np.einsum("ptk,tk->pt", qvec, e2) * inv_det
    hit = ok[None, :] & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-12)
    return (hit.sum(axis=1) % 2) == 1


def surface_samples(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Used vertices plus edge midpoints and centroids of every face."""
    tri = verts[faces]
    mids = np.concatenate([(tri[:, 0] + tri[:, 1]) / 2, (tri[:, 1] + tri[:, 2]) / 2, (tri[:, 0] + tri[:, 2]) / 2])
    centroids = tri.mean(axis=1)
    return np.concatenate([verts[np.unique(faces)], mids, centroids])


def part_surface_distance(mesh: Mesh, part_a: str, part_b: str) -> float:
    """Approximate min surface distance between two parts (0 if interpenetrating)."""
    va = mesh.vertices[mesh.part_vertex_ids(part_a)]
    vb = mesh.vertices[mesh.part_vertex_ids(part_b)]
    fa, fb = mesh.part_face_array(part_a), mesh.part_face_array(part_b)
    tris_a, tris_b = mesh.vertices[fa], mesh.vertices[fb]
    sa = np.concatenate([va, tris_a.mean(axis=1)])
    sb = np.concatenate([vb, tris_b.mean(axis=1)])
    d = min(point_triangle_distance(sa, tris_b).min(), point_triangle_distance(sb, tris_a).min())
    if d > 0.0:
        if points_in_mesh(sa, tris_b).any() or points_in_mesh(sb, tris_a).any():
            return 0.0
    return float(d)


def part_adjacency(mesh: Mesh, eps_contact: float = 0.01) -> PartGraph:
    """Contact graph over parts: a pair touches when the min surface distance
    is within eps_contact (interpenetration counts as distance 0); the
    connection point is the centroid of all close sample/surface pairs.
    """
    names = sorted(mesh.parts)
    samples = {}
    tris = {}
    for n in names:
        f = mesh.part_face_array(n)
        tris[n] = mesh.vertices[f]
        samples[n] = surface_samples(mesh.vertices, f)
    graph = PartGraph()
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            close_pts = []
            touching = False
            for pa, tb, ta, pb in ((samples[a], tris[b], tris[a], samples[b]),):
                for pts, other_tris in ((pa, tb), (pb, ta)):
                    d = point_triangle_distance(pts, other_tris)
                    inside = points_in_mesh(pts, other_tris)
                    near = (d <= eps_contact) | inside
                    if near.any():
                        touching = True
                        close_pts.append(pts[near])
            if touching:
                key = (a, b)
                graph.contacts.add(key)
                graph.connection_points[key] = np.concatenate(close_pts).mean(axis=0)
    return graph


def mesh_volume(verts: np.ndarray, faces: np.ndarray) -> float:
    """Signed volume by the divergence theorem; positive for outward orientation."""
    tri = verts[faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def hausdorff_distance(verts_a, faces_a, verts_b, faces_b) -> float:
    """Symmetric sample-to-surface Hausdorff distance between two solids."""
    sa = surface_samples(verts_a, faces_a)
    sb = surface_samples(verts_b, faces_b)
    d_ab = point_triangle_distance(sa, verts_b[faces_b]).max()
    d_ba = point_triangle_distance(sb, verts_a[faces_a]).max()
    return float(max(d_ab, d_ba))


def mesh_is_closed(faces: np.ndarray) -> bool:
    """Every directed edge must be matched by its reverse exactly once."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fwd = {}
    for u, v in edges:
        key = (int(u), int(v))
        fwd[key] = fwd.get(key, 0) + 1
    if any(c != 1 for c in fwd.values()):
        return False
    return all((v, u) in fwd for (u, v) in fwd)


# ---------------------------------------------------------------------------
# serialization (ASCII OBJ-style, one group per part; see dataset module docs)


def save_obj(mesh: Mesh, path) -> None:
    lines = []
    n_written = 0
    for name in sorted(mesh.parts):
        lines.append(f"g {name}")
        ids = mesh.part_vertex_ids(name)
        remap = {int(v): i for i, v in enumerate(ids)}
        for v in mesh.vertices[ids]:
            lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
        for tri in mesh.part_face_array(name):
            a, b, c = (remap[int(t)] + n_written + 1 for t in tri)
            lines.append(f"f {a} {b} {c}")
        n_written += len(ids)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, faces = [], []
    parts: dict[str, list[int]] = {}
    current = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("g "):
                current = line[2:].strip()
                parts.setdefault(current, [])
            elif line.startswith("v "):
                verts.append([float(x) for x in line[2:].split()])
            elif line.startswith("f "):
                idx = [int(x) - 1 for x in line[2:].split()]
                parts[current].append(len(faces))
                faces.append(idx)
    return Mesh(
        np.array(verts, dtype=np.float64),
        np.array(faces, dtype=np.int64),
        {k: np.array(v, dtype=np.int64) for k, v in parts.items()},
    )
