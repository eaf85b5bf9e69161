"""Pinhole cameras, rigid transforms and the rectified stereo rig.

Frames:
    robot   x forward, y left, z up (ground plane is z = 0)
    camera  z forward (optical axis), x right, y down
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive depth."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, u, v):
        """True where (u, v) lies inside the pixel rectangle [0, W) x [0, H)."""
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
        raise ValueError("rotation must be orthonormal with determinant +1")


@dataclass(frozen=True)
class RigidTransform:
    """p_target = rotation @ p_source + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        _check_rotation(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        """Transform a (3,) point or an (..., 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Robot pose, stored as the robot-from-world transform."""

    robot_from_world: RigidTransform

    @classmethod
    def planar(cls, x: float, y: float = 0.0, yaw: float = 0.0) -> Pose:
        world_from_robot = RigidTransform(rot_z(yaw), np.array([x, y, 0.0]))
        return cls(world_from_robot.inverse())

    @property
    def world_from_robot(self) -> RigidTransform:
        return self.robot_from_world.inverse()

    def to_dict(self) -> dict:
        return {"robot_from_world": self.robot_from_world.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        return cls(RigidTransform.from_dict(d["robot_from_world"]))


def camera_from_robot_mount(height: float, tilt: float, forward: float = 0.0,
                            lateral: float = 0.0) -> RigidTransform:
    """Extrinsics of a camera at (forward, lateral, height) pitched down by `tilt` radians."""
    c, s = np.cos(tilt), np.sin(tilt)
    z_cam = np.array([c, 0.0, -s])
    x_cam = np.array([0.0, -1.0, 0.0])
    y_cam = np.cross(z_cam, x_cam)
    robot_from_cam = np.column_stack([x_cam, y_cam, z_cam])
    center = np.array([forward, lateral, height])
    R = robot_from_cam.T
    return RigidTransform(R, -R @ center)


@dataclass(frozen=True)
class StereoRig:
    """Rectified pair: the right camera sits `baseline` metres along the left camera's +x."""

    intrinsics: CameraIntrinsics
    baseline: float
    cam_from_robot: RigidTransform

    def __post_init__(self) -> None:
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")

    @classmethod
    def mounted(cls, intrinsics: CameraIntrinsics, baseline: float, height: float,
                tilt: float, forward: float = 0.0) -> StereoRig:
        return cls(intrinsics, baseline, camera_from_robot_mount(height, tilt, forward))

    @property
    def left_center_robot(self) -> np.ndarray:
        return self.cam_from_robot.inverse().translation

    @property
    def right_from_left(self) -> RigidTransform:
        return RigidTransform(np.eye(3), np.array([-self.baseline, 0.0, 0.0]))

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(), "baseline": self.baseline,
                "cam_from_robot": self.cam_from_robot.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> StereoRig:
        return cls(CameraIntrinsics(**d["intrinsics"]), float(d["baseline"]),
                   RigidTransform.from_dict(d["cam_from_robot"]))


def project_to_camera(point, intr: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = (float(c) for c in np.asarray(point, dtype=float).reshape(3))
    if z <= 0:
        raise BehindCameraError(f"point {point!r} is behind the camera")
    return intr.cx + intr.fx * x / z, intr.cy + intr.fy * y / z


def project_points(points_cam: np.ndarray, intr: CameraIntrinsics):
    """Vectorised projection; pixels of points with z <= 0 come back as NaN."""
    p = np.asarray(points_cam, dtype=float)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, intr.cx + intr.fx * p[..., 0] / z, np.nan)
        v = np.where(z > 0, intr.cy + intr.fy * p[..., 1] / z, np.nan)
    return u, v


def backproject(u, v, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point(s) at optical-axis depth `depth` seen through pixel (u, v)."""
    u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    x = (u - intr.cx) / intr.fx * depth
    y = (v - intr.cy) / intr.fy * depth
    return np.stack([x, y, depth], axis=-1)


def robot_to_left_pixel(p, rig: StereoRig) -> tuple[float, float] | None:
    """Left-image pixel of a robot-frame point, or None when it is out of view."""
    pc = rig.cam_from_robot.apply(np.asarray(p, dtype=float).reshape(3))
    if pc[2] <= 0:
        return None
    u, v = project_to_camera(pc, rig.intrinsics)
    if not rig.intrinsics.contains(u, v):
        return None
    return u, v


def robot_to_right_pixel(p, rig: StereoRig) -> tuple[float, float] | None:
    pc = rig.right_from_left.apply(rig.cam_from_robot.apply(np.asarray(p, dtype=float).reshape(3)))
    if pc[2] <= 0:
        return None
    u, v = project_to_camera(pc, rig.intrinsics)
    if not rig.intrinsics.contains(u, v):
        return None
    return u, v


def disparity_to_depth(d, rig: StereoRig):
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr <= 0):
        raise ValueError("disparity must be positive")
    depth = rig.intrinsics.fx * rig.baseline / d_arr
    return float(depth) if depth.ndim == 0 else depth


def ground_plane_in_camera(rig: StereoRig) -> tuple[np.ndarray, float]:
    """Ground plane z_robot = 0 expressed as n . X = c in the left camera frame."""
    robot_from_cam = rig.cam_from_robot.inverse()
    # z_robot(X_cam) = e_z . (R X + t)
    n = robot_from_cam.rotation[2]
    c = -robot_from_cam.translation[2]
    return n, float(c)


def ground_depth(u, v, rig: StereoRig):
    """Optical-axis depth of the ground plane seen through left pixel (u, v); inf above the horizon."""
    n, c = ground_plane_in_camera(rig)
    intr = rig.intrinsics
    ray_dot = n[0] * (np.asarray(u, float) - intr.cx) / intr.fx + n[1] * (np.asarray(v, float) - intr.cy) / intr.fy + n[2]
    with np.errstate(divide="ignore"):
        return np.where(ray_dot < 0, c / np.where(ray_dot < 0, ray_dot, -1.0), np.inf)


def ground_disparity(u, v, rig: StereoRig):
    """Disparity a ground point would have at left pixel (u, v); <= 0 above the horizon."""
    n, c = ground_plane_in_camera(rig)
    intr = rig.intrinsics
    ray_dot = n[0] * (np.asarray(u, float) - intr.cx) / intr.fx + n[1] * (np.asarray(v, float) - intr.cy) / intr.fy + n[2]
    # depth z along the ray satisfies z * ray_dot = c
    return intr.fx * rig.baseline * ray_dot / c


DEFAULT_INTRINSICS = CameraIntrinsics(fx=400.0, fy=400.0, cx=319.5, cy=199.5, width=640, height=400)


def default_rig(height: float = 0.8, tilt_deg: float = 22.0, baseline: float = 0.3,
                intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> StereoRig:
    """Desk-scale rig: 640x400 pair, 0.3 m baseline, 0.8 m high, pitched 22 degrees down."""
    return StereoRig.mounted(intrinsics, baseline, height, float(np.radians(tilt_deg)))
