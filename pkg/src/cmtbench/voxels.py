"""Voxelization of closed solids and blocky surface re-meshing.

Backs the fracture deformation: a part is converted to a cubic-cell
occupancy grid once (cached by geometry content), primitives knock cells
out cheaply per attempt, and the surviving cells are re-meshed with greedy
rectangle merging.  Cells are cubic so removed-cell counts convert to
volume fractions without per-axis bookkeeping.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .geometry import points_in_mesh


@dataclass
class VoxelGrid:
    occupancy: np.ndarray  # (nx, ny, nz) bool
    origin: np.ndarray  # (3,) world coords of the grid corner
    cell: float  # cubic cell edge length

    def centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) world coordinates of all cell centers."""
        nx, ny, nz = self.occupancy.shape
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return self.origin + (idx + 0.5) * self.cell

    def volume(self) -> float:
        return float(self.occupancy.sum()) * self.cell**3


def voxelize_solid(verts: np.ndarray, faces: np.ndarray, resolution: int = 96, pad: int = 1) -> VoxelGrid:
    """Occupancy grid over the solid's bounding box.

    The largest bbox axis is divided into `resolution` cubic cells; a cell
    is occupied when its center passes the ray-parity containment test.
    One empty padding layer on every side keeps the re-meshed surface
    closed at the bbox boundary.
    """
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    extent = hi - lo
    cell = float(extent.max()) / resolution
    if cell <= 0.0:
        raise ValueError("degenerate solid")
    dims = np.maximum(np.ceil(extent / cell - 1e-9).astype(int), 1) + 2 * pad
    origin = lo - pad * cell
    nx, ny, nz = dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    centers = origin + (np.stack([ix, iy, iz], axis=-1).reshape(-1, 3) + 0.5) * cell
    tris = verts[faces]
    occ = np.empty(len(centers), dtype=bool)
    step = 32768
    for s in range(0, len(centers), step):
        occ[s : s + step] = points_in_mesh(centers[s : s + step], tris)
    return VoxelGrid(occ.reshape(nx, ny, nz), origin, cell)


_CACHE: dict[bytes, VoxelGrid] = {}
_CACHE_CAP = 64


def voxelize_cached(verts: np.ndarray, faces: np.ndarray, resolution: int = 96) -> VoxelGrid:
    """voxelize_solid memoized on geometry content; returns a private copy
    of the occupancy so callers may edit it."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(verts).tobytes())
    h.update(np.ascontiguousarray(faces).tobytes())
    h.update(resolution.to_bytes(4, "little"))
    key = h.digest()
    grid = _CACHE.get(key)
    if grid is None:
        if len(_CACHE) >= _CACHE_CAP:
            _CACHE.pop(next(iter(_CACHE)))
        grid = voxelize_solid(verts, faces, resolution)
        _CACHE[key] = grid
    return VoxelGrid(grid.occupancy.copy(), grid.origin.copy(), grid.cell)


def _greedy_rects(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Cover a 2D boolean mask with maximal rectangles (u0, v0, u1, v1), half-open."""
    mask = mask.copy()
    nu, nv = mask.shape
    rects = []
    for i in range(nu):
        j = 0
        while j < nv:
            if not mask[i, j]:
                j += 1
                continue
            j2 = j
            while j2 < nv and mask[i, j2]:
                j2 += 1
            i2 = i + 1
            while i2 < nu and mask[i2, j:j2].all():
                i2 += 1
            mask[i:i2, j:j2] = False
            rects.append((i, j, i2, j2))
            j = j2
    return rects


def voxel_surface_mesh(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Triangulate the boundary between occupied and empty cells.

    Exposed faces are merged into maximal rectangles per slice, so flat
    regions cost two triangles.  The result is geometrically watertight
    with outward orientation (signed volume equals cell_count * cell^3),
    though merged rectangles of different sizes meet in T-junctions.
    """
    occ = grid.occupancy
    vert_ids: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[int, int, int]] = []
    faces: list[list[int]] = []

    def vid(g):
        i = vert_ids.get(g)
        if i is None:
            i = len(verts)
            vert_ids[g] = i
            verts.append(g)
        return i

    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        # e_u x e_v == +e_axis only when (axis, u, v) is an even permutation
        base_parity = 1 if axis != 1 else -1
        n_a = occ.shape[axis]
        for sign in (1, -1):
            shifted = np.zeros_like(occ)
            sl_src = [slice(None)] * 3
            sl_dst = [slice(None)] * 3
            if sign == 1:
                sl_dst[axis] = slice(0, n_a - 1)
                sl_src[axis] = slice(1, n_a)
            else:
                sl_dst[axis] = slice(1, n_a)
                sl_src[axis] = slice(0, n_a - 1)
            shifted[tuple(sl_dst)] = occ[tuple(sl_src)]
            exposed = occ & ~shifted
            for a_idx in range(n_a):
                sl = [slice(None)] * 3
                sl[axis] = a_idx
                mask = exposed[tuple(sl)]
                if not mask.any():
                    continue
                plane = a_idx + 1 if sign == 1 else a_idx
                for u0, v0, u1, v1 in _greedy_rects(mask):
                    corner = [0, 0, 0]
                    corner[axis] = plane

                    def at(u, v):
                        c = corner.copy()
                        c[u_axis] = u
                        c[v_axis] = v
                        return vid(tuple(c))

                    p00, p10 = at(u0, v0), at(u1, v0)
                    p11, p01 = at(u1, v1), at(u0, v1)
                    if sign * base_parity == 1:
                        faces.append([p00, p10, p11])
                        faces.append([p00, p11, p01])
                    else:
                        faces.append([p00, p01, p11])
                        faces.append([p00, p11, p10])
    v = grid.origin + np.array(verts, dtype=np.float64) * grid.cell
    return v, np.array(faces, dtype=np.int64)


def primitive_mask(centers: np.ndarray, shape: str, center: np.ndarray, size: float) -> np.ndarray:
    """Boolean mask of points inside a sphere (size=radius) or axis-aligned
    cube (size=half edge)."""
    d = centers - center
    if shape == "sphere":
        return np.einsum("...k,...k->...", d, d) <= size * size
    if shape == "cube":
        return np.abs(d).max(axis=-1) <= size
    raise ValueError(f"unknown primitive {shape!r}")
