"""Hemisphere camera model: pose sampling, projection, unprojection.

Conventions (the data format this package reads and writes):
  - world up is +y; cameras sit on a hemisphere of radius 2.5 looking at
    the origin; elevation is measured from the horizontal plane
  - camera frame is x-right, y-down, z-forward; extrinsics map world to
    camera as X_c = R (X_w - eye)
  - vertical field of view 40 degrees, square pixels, principal point at
    the image center
  - integer pixel indices address pixel centers: a world point projecting
    to continuous (row, col) = (3.0, 7.0) lands exactly on pixel [3, 7]
  - depth is distance along the camera z axis, not ray length
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPHERE_RADIUS = 2.5
AZIMUTH_STEPS = 20  # grid interval pi/10
ELEVATION_LO = math.pi / 9.0
ELEVATION_HI = 2.0 * math.pi / 9.0
N_REFERENCE_VIEWS = 20
FOV_DEG = 40.0


@dataclass
class CameraPose:
    azimuth: float
    elevation: float
    radius: float
    width: int
    height: int
    fx: float = field(init=False)
    fy: float = field(init=False)
    cx: float = field(init=False)
    cy: float = field(init=False)
    eye: np.ndarray = field(init=False)
    rotation: np.ndarray = field(init=False)  # (3, 3), rows = camera x, y, z axes

    def __post_init__(self):
        self.fy = (self.height / 2.0) / math.tan(math.radians(FOV_DEG) / 2.0)
        self.fx = self.fy
        self.cx = self.width / 2.0
        self.cy = self.height / 2.0
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        ca, sa = math.cos(self.azimuth), math.sin(self.azimuth)
        self.eye = self.radius * np.array([ce * ca, se, ce * sa])
        z = -self.eye / np.linalg.norm(self.eye)  # forward: look at origin
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        self.rotation = np.stack([x, y, z])

    def extrinsic_matrix(self) -> np.ndarray:
        """4x4 world-to-camera transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = -self.rotation @ self.eye
        return m

    def to_json(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "radius": self.radius,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "extrinsic": [float(v) for v in self.extrinsic_matrix().reshape(-1)],
        }

    @staticmethod
    def from_json(obj: dict) -> "CameraPose":
        return CameraPose(obj["azimuth"], obj["elevation"], obj["radius"], obj["width"], obj["height"])


def make_pose(azimuth: float, elevation: float, res: int, radius: float = SPHERE_RADIUS) -> CameraPose:
    return CameraPose(azimuth, elevation, radius, res, res)


def sample_reference_cameras(res: int = 64) -> list[CameraPose]:
    """The fixed 20-view grid: azimuths k*pi/10, elevations alternating
    between pi/9 (even k) and 2*pi/9 (odd k)."""
    poses = []
    for k in range(N_REFERENCE_VIEWS):
        az = k * (2.0 * math.pi / AZIMUTH_STEPS)
        el = ELEVATION_LO if k % 2 == 0 else ELEVATION_HI
        poses.append(make_pose(az, el, res))
    return poses


def sample_query_camera(rng: np.random.Generator, res: int = 64) -> CameraPose:
    """Azimuth snapped to the pi/10 grid, elevation uniform in [pi/9, 2pi/9]."""
    az = int(rng.integers(AZIMUTH_STEPS)) * (2.0 * math.pi / AZIMUTH_STEPS)
    el = float(rng.uniform(ELEVATION_LO, ELEVATION_HI))
    return make_pose(az, el, res)


def project(points: np.ndarray, pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points (N, 3) -> continuous (rows, cols, depths).

    Integer row/col values correspond to pixel centers; depth is camera-z.
    """
    pc = (np.atleast_2d(points) - pose.eye) @ pose.rotation.T
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = pose.fx * pc[:, 0] / z + pose.cx - 0.5
        rows = pose.fy * pc[:, 1] / z + pose.cy - 0.5
    return rows, cols, z


def unproject(rows, cols, depth, pose: CameraPose) -> np.ndarray:
    """Pixel coordinates plus camera-z depth -> world points (N, 3)."""
    rows = np.atleast_1d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_1d(np.asarray(cols, dtype=np.float64))
    depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if (depth <= 0).any():
        raise ValueError("unproject requires positive depth")
    x = (cols + 0.5 - pose.cx) / pose.fx * depth
    y = (rows + 0.5 - pose.cy) / pose.fy * depth
    pc = np.stack([x, y, depth], axis=-1)
    return pc @ pose.rotation + pose.eye
