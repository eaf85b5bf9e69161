"""Ground-truth obstacle decisions from the depth image, and the exact scene oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, StereoRig, backproject, ground_depth, project_points
from .worldsim import Scene, camera_poses, cast_rays


class OutOfView(Exception):
    """The query point cannot be evaluated from this viewpoint."""


@dataclass(frozen=True)
class GridSpec:
    x_min: float = 1.0
    x_max: float = 2.6
    y_min: float = -1.0
    y_max: float = 1.0
    step: float = 0.1
    radius: float = 0.10

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid bounds must satisfy min < max")
        if self.step <= 0 or self.radius <= 0:
            raise ValueError("step and radius must be positive")

    @property
    def xs(self) -> np.ndarray:
        n = int(np.floor((self.x_max - self.x_min) / self.step + 1e-9)) + 1
        return np.round(self.x_min + self.step * np.arange(n), 9)

    @property
    def ys(self) -> np.ndarray:
        n = int(np.floor((self.y_max - self.y_min) / self.step + 1e-9)) + 1
        return np.round(self.y_min + self.step * np.arange(n), 9)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.xs), len(self.ys)

    def points(self) -> np.ndarray:
        """Lattice as (N, 3) ground points, row-major with x outer and y inner."""
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class HeightBand:
    """Shared obstacle rule: points in [h_obs, h_max] are obstacles, points below -h_obs are holes."""

    h_obs: float = 0.15
    h_max: float = 2.0


def cloud_decision(points: np.ndarray, p, radius: float, band: HeightBand) -> bool:
    """True iff obstacle free under the height-band rule. Raises OutOfView with no points nearby."""
    p = np.asarray(p, float)
    d2 = (points[:, 0] - p[0]) ** 2 + (points[:, 1] - p[1]) ** 2
    near = points[d2 <= radius * radius]
    if near.shape[0] == 0:
        raise OutOfView(f"no returns within {radius} m of {p[:2].tolist()}")
    z = near[:, 2]
    blocked = ((z >= band.h_obs) & (z <= band.h_max)) | (z < -band.h_obs)
    return not bool(blocked.any())


def sample_pattern(p, radius: float, n_samples: int) -> np.ndarray:
    """Centre plus n_samples - 1 points evenly spaced on the circle (compass points for 5)."""
    p = np.asarray(p, float)
    pts = [p]
    m = n_samples - 1
    for i in range(m):
        a = 2.0 * np.pi * i / m
        pts.append(p + radius * np.array([np.cos(a), np.sin(a), 0.0]))
    return np.array(pts)


def relocate_holes(points: np.ndarray, eye: np.ndarray, band: HeightBand) -> np.ndarray:
    """Move below-ground points to where their viewing ray crosses the ground.

    A return below -h_obs means the pixel looked through the floor; the hole is
    at the floor crossing, not at the (possibly far away) reconstructed point.
    Heights are kept so the hole rule still fires.
    """
    pts = np.array(points, float).reshape(-1, 3)
    hole = pts[:, 2] < -band.h_obs
    if hole.any():
        d = pts[hole] - eye
        s = eye[2] / -d[:, 2]
        pts[hole, :2] = eye[:2] + s[:, None] * d[:, :2]
    return pts


class CloudIndex:
    """Horizontal (x, y) index over a robot-frame cloud for disc queries.

    Below-ground points are indexed at their floor crossing (see relocate_holes).
    """

    def __init__(self, points: np.ndarray, eye=None, band: HeightBand = HeightBand()):
        pts = np.asarray(points, float).reshape(-1, 3)
        if eye is not None:
            pts = relocate_holes(pts, np.asarray(eye, float), band)
        self.points = pts
        self._tree = cKDTree(self.points[:, :2]) if len(self.points) else None

    def decide(self, p, radius: float, band: HeightBand) -> bool:
        if self._tree is None:
            raise OutOfView("empty cloud")
        idx = self._tree.query_ball_point(np.asarray(p, float)[:2], radius)
        return cloud_decision(self.points[np.sort(np.asarray(idx, dtype=np.intp))], p, radius, band)


def depth_to_cloud(depth: np.ndarray, rig: StereoRig) -> np.ndarray:
    """Robot-frame point cloud of every pixel with a depth return."""
    v, u = np.nonzero(depth > 0)
    pts_cam = backproject(u, v, depth[v, u].astype(np.float64), rig.intrinsics)
    return rig.cam_from_robot.inverse().apply(pts_cam)


class DepthMonitor:
    """Precomputes the cloud of one depth image for repeated lattice queries.

    Seeing any obstacle point in the disc is enough to report it occupied.
    Reporting it free needs the ground itself: every pixel of the k x k
    window around each disc sample must return the ground plane, otherwise
    the disc is out of view (occluded or off-image).
    """

    def __init__(self, depth: np.ndarray, rig: StereoRig, band: HeightBand = HeightBand(),
                 n_samples: int = 5, window: int = 9):
        self.depth = depth
        self.rig = rig
        self.cloud = CloudIndex(depth_to_cloud(depth, rig), rig.left_center_robot, band)
        self.band = band
        self.n_samples = n_samples
        self.half = window // 2

    def is_free(self, p, radius: float) -> bool:
        free = self.cloud.decide(p, radius, self.band)
        if free:
            self._require_ground_visible(p, radius)
        return free

    def _require_ground_visible(self, p, radius: float) -> None:
        rig, intr, h = self.rig, self.rig.intrinsics, self.half
        samples = sample_pattern(p, radius, self.n_samples)
        u, v = project_points(rig.cam_from_robot.apply(samples), intr)
        if not np.all(np.isfinite(u)):
            raise OutOfView("disc behind the camera")
        u0 = np.round(u).astype(int)
        v0 = np.round(v).astype(int)
        if (u0.min() - h < 0 or u0.max() + h >= intr.width or v0.min() - h < 0 or v0.max() + h >= intr.height):
            raise OutOfView("disc leaves the depth image")
        dv, du = np.mgrid[-h:h + 1, -h:h + 1]
        uu = (u0[:, None, None] + du).ravel()
        vv = (v0[:, None, None] + dv).ravel()
        z = self.depth[vv, uu].astype(np.float64)
        expected = ground_depth(uu, vv, rig)
        if np.any(z <= 0) or np.any(np.abs(z - expected) > GROUND_TOLERANCE * expected):
            raise OutOfView("ground under the disc is not fully visible")


# relative depth tolerance for "this pixel sees the ground plane"
GROUND_TOLERANCE = 0.01


def is_obstacle_free_monitor(depth: np.ndarray, rig: StereoRig, p, radius: float,
                             band: HeightBand = HeightBand()) -> bool:
    return DepthMonitor(depth, rig, band).is_free(np.asarray(p, float), radius)


def geometric_oracle(scene: Scene, p, radius: float, pose=None) -> bool:
    """Exact answer: no box footprint meets the disc of `radius` around p.

    `p` is a robot-frame ground point when `pose` is given, otherwise a world point.
    """
    p = np.asarray(p, float)
    if pose is not None:
        p = pose.world_from_robot.apply(p)
    return all(float(b.footprint_distance(p[0], p[1])) > radius for b in scene.boxes)


def stereo_ground_visible(scene: Scene, rig: StereoRig, pose: Pose, p, radius: float,
                          n_samples: int = 5, window: int = 9) -> bool:
    """Exact scene check that the ground under every matcher window around p is seen by both cameras.

    Window pixels are taken in the left image and mapped to their ground points;
    each ground point must be the first surface hit from both camera centres.
    Test-side counterpart of the monitor's single-camera visibility rule.
    """
    intr, h = rig.intrinsics, window // 2
    samples = sample_pattern(np.asarray(p, float), radius, n_samples)
    u, v = project_points(rig.cam_from_robot.apply(samples), intr)
    if not np.all(np.isfinite(u)):
        return False
    dv, du = np.mgrid[-h:h + 1, -h:h + 1]
    uu = (np.round(u)[:, None, None] + du).ravel()
    vv = (np.round(v)[:, None, None] + dv).ravel()
    if not np.all(intr.contains(uu, vv)):
        return False
    z = ground_depth(uu, vv, rig)
    if not np.all(np.isfinite(z)):
        return False
    world_from_left, world_from_right = camera_poses(rig, pose)
    ground = world_from_left.apply(backproject(uu, vv, z, intr))
    for cam in (world_from_left, world_from_right):
        pc = cam.inverse().apply(ground)
        ur, vr = project_points(pc, intr)
        if not np.all(intr.contains(ur, vr)):
            return False
        ray = ground - cam.translation
        dist = np.linalg.norm(ray, axis=1)
        t, surf, _ = cast_rays(scene, cam.translation, ray / dist[:, None])
        if np.any(surf != 0) or np.any(np.abs(t - dist) > 1e-6 * dist + 1e-9):
            return False
    return True
