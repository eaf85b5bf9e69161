"""Stereo obstacle detectors audited by the introspection model.

Two interchangeable backends answer "is the ground disc around p free?":

* SparseConvex checks only the ground: it samples a few ground points around
  p, warps the right image with the ground-plane homography and accepts the
  point when every sampled window matches (convex world: visible ground
  implies no obstacle).
* DenseBM computes a full block-matching disparity map, reconstructs the
  scene and applies the same height-band rule as the depth monitor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter, uniform_filter
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import StereoRig, backproject, ground_disparity, project_points
from .monitor import CloudIndex, GridSpec, HeightBand, OutOfView, sample_pattern


class BackendKind(str, Enum):
    SPARSE = "SparseConvex"
    DENSE = "DenseBM"


@dataclass(frozen=True)
class BackendParams:
    window: int = 9
    tau: float = 0.05
    max_disparity: int = 144
    h_obs: float = 0.15
    h_max: float = 2.0
    n_samples: int = 5
    min_texture: float = 0.01
    lr_tolerance: int = 1
    uniqueness: float = 0.10
    median_window: int = 3
    speckle_size: int = 30

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.max_disparity < 1:
            raise ValueError("disparity search range must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    @property
    def band(self) -> HeightBand:
        return HeightBand(self.h_obs, self.h_max)


@dataclass(frozen=True)
class PerceptionBackend:
    kind: BackendKind = BackendKind.SPARSE
    params: BackendParams = field(default_factory=BackendParams)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BackendKind(self.kind))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": dict(self.params.__dict__)}

    def prepare(self, left: np.ndarray, right: np.ndarray, rig: StereoRig):
        """Per-frame evaluator exposing is_free(p, radius)."""
        if self.kind is BackendKind.SPARSE:
            return _SparseEvaluator(left, right, rig, self.params)
        return DenseReconstruction(left, right, rig, self.params)


def _bilinear_rows(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample img at integer rows and real-valued columns."""
    c0 = np.floor(cols).astype(int)
    w = cols - c0
    return img[rows, c0] * (1.0 - w) + img[rows, c0 + 1] * w


def sample_window(g, rig: StereoRig, half: int):
    """Left window pixels around ground point g and their ground-induced right columns.

    Raises OutOfView unless the whole window and its correspondence lie inside both images.
    """
    intr = rig.intrinsics
    pc = rig.cam_from_robot.apply(np.asarray(g, float))
    u, v = project_points(pc, intr)
    if not np.isfinite(u):
        raise OutOfView("sample behind camera")
    u0, v0 = int(round(float(u))), int(round(float(v)))
    if u0 - half < 0 or u0 + half >= intr.width or v0 - half < 0 or v0 + half >= intr.height:
        raise OutOfView("sample window leaves the left image")
    vv, uu = np.mgrid[v0 - half:v0 + half + 1, u0 - half:u0 + half + 1]
    d = ground_disparity(uu, vv, rig)
    ur = uu - d
    if np.any(d <= 0) or ur.min() < 0 or ur.max() >= intr.width - 1:
        raise OutOfView("ground correspondence leaves the right image")
    return vv, uu, ur


class _SparseEvaluator:
    def __init__(self, left, right, rig: StereoRig, params: BackendParams):
        self.left = np.asarray(left, np.float64)
        self.right = np.asarray(right, np.float64)
        self.rig = rig
        self.params = params
        self.half = params.window // 2

    def sample_score(self, g) -> float:
        """Mean absolute difference between the left window at ground point g and
        the right image warped by the ground-plane correspondence."""
        vv, uu, ur = sample_window(g, self.rig, self.half)
        left = self.left[vv, uu]
        right = _bilinear_rows(self.right, vv, ur)
        return float(np.mean(np.abs(left - right)))

    def is_free(self, p, radius: float) -> bool:
        scores = [self.sample_score(g) for g in sample_pattern(p, radius, self.params.n_samples)]
        return max(scores) <= self.params.tau


def is_obstacle_free_sparse(left, right, rig: StereoRig, p, radius: float,
                            params: BackendParams = BackendParams()) -> bool:
    p = np.asarray(p, float)
    if abs(p[2]) > 1e-12:
        raise ValueError("query point must lie on the ground (z = 0)")
    return _SparseEvaluator(left, right, rig, params).is_free(p, radius)


def block_matching(left: np.ndarray, right: np.ndarray, params: BackendParams):
    """SAD winner-take-all disparities for both views.

    Returns (disp_left, disp_right, texture, unique) where disparities are
    integers in [1, max_disparity] (0 where no candidate exists) and `unique`
    marks left pixels whose best cost beats the runner-up outside +-1 px by
    the uniqueness margin.
    """
    L = np.asarray(left, np.float32)
    R = np.asarray(right, np.float32)
    H, W = L.shape
    k = params.window
    D = params.max_disparity
    big = np.float32(np.inf)
    cost = np.full((D, H, W), big, dtype=np.float32)
    for d in range(1, D + 1):
        diff = np.abs(L[:, d:] - R[:, :W - d])
        cost[d - 1, :, d:] = uniform_filter(diff, size=k, mode="nearest")
    best = np.argmin(cost, axis=0)
    best_cost = np.take_along_axis(cost, best[None], 0)[0]
    disp_left = best.astype(np.int32) + 1
    disp_left[~np.isfinite(best_cost)] = 0

    idx = np.arange(D)[:, None, None]
    masked = np.where(np.abs(idx - best[None]) <= 1, big, cost)
    second = masked.min(axis=0)
    unique = best_cost <= (1.0 - params.uniqueness) * second

    # right view: cost_R(u, d) = cost_L(u + d, d)
    cost_r = np.full((D, H, W), big, dtype=np.float32)
    for d in range(1, D + 1):
        cost_r[d - 1, :, :W - d] = cost[d - 1, :, d:]
    disp_right = np.argmin(cost_r, axis=0).astype(np.int32) + 1
    disp_right[~np.isfinite(cost_r.min(axis=0))] = 0

    mean = uniform_filter(L, size=k, mode="nearest")
    sq = uniform_filter(L * L, size=k, mode="nearest")
    texture = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return disp_left, disp_right, texture, unique


def consistent_disparity(left, right, params: BackendParams) -> np.ndarray:
    """Left disparity map, 0 wherever a validity test fails.

    Tests: left-right consistency, texture gate, uniqueness margin and
    agreement with the local median (removes isolated speckles).
    """
    dl, dr, texture, unique = block_matching(left, right, params)
    H, W = dl.shape
    cols = np.arange(W)[None, :] - dl
    ok = (dl > 0) & (cols >= 0)
    back = np.zeros_like(dl)
    rows = np.broadcast_to(np.arange(H)[:, None], dl.shape)
    back[ok] = dr[rows[ok], cols[ok]]
    ok &= np.abs(back - dl) <= params.lr_tolerance
    ok &= texture >= params.min_texture
    ok &= unique
    disp = np.where(ok, dl, 0)
    if params.median_window > 1:
        med = median_filter(disp, size=params.median_window, mode="nearest")
        disp = np.where(np.abs(disp - med) <= params.lr_tolerance, disp, 0)
    if params.speckle_size > 0:
        disp = remove_speckles(disp, params.speckle_size, params.lr_tolerance)
    return disp


def remove_speckles(disp: np.ndarray, max_size: int, max_diff: int = 1) -> np.ndarray:
    """Zero out connected regions (4-neighbour, |step| <= max_diff) of at most max_size valid pixels."""
    H, W = disp.shape
    idx = np.arange(H * W).reshape(H, W)
    valid = disp > 0
    rows, cols = [], []
    for a, b, da, db in ((idx[:, :-1], idx[:, 1:], disp[:, :-1], disp[:, 1:]),
                         (idx[:-1, :], idx[1:, :], disp[:-1, :], disp[1:, :])):
        link = (da > 0) & (db > 0) & (np.abs(da - db) <= max_diff)
        rows.append(a[link])
        cols.append(b[link])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(r.size, np.int8), (r, c)), shape=(H * W, H * W))
    _, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels[valid.ravel()], minlength=labels.max() + 1)
    small = (sizes[labels] <= max_size).reshape(H, W)
    return np.where(valid & ~small, disp, 0)


class DenseReconstruction:
    """Robot-frame reconstruction of one stereo pair, queried per lattice point."""

    def __init__(self, left, right, rig: StereoRig, params: BackendParams = BackendParams()):
        self.rig = rig
        self.params = params
        self.disparity = consistent_disparity(left, right, params)
        v, u = np.nonzero(self.disparity > 0)
        z = rig.intrinsics.fx * rig.baseline / self.disparity[v, u].astype(np.float64)
        pts = rig.cam_from_robot.inverse().apply(backproject(u, v, z, rig.intrinsics))
        self.cloud = CloudIndex(pts, rig.left_center_robot, params.band)

    def is_free(self, p, radius: float) -> bool:
        _require_in_view(p, radius, self.rig, self.params)
        try:
            return self.cloud.decide(p, radius, self.params.band)
        except OutOfView:
            # in view but nothing reconstructed nearby: nothing seen, nothing blocks
            return True


def _require_in_view(p, radius, rig: StereoRig, params: BackendParams) -> None:
    """Same field-of-view rule as the sparse backend."""
    for g in sample_pattern(p, radius, params.n_samples):
        sample_window(g, rig, params.window // 2)


def is_obstacle_free_dense(left, right, rig: StereoRig, p, radius: float,
                           params: BackendParams = BackendParams()) -> bool:
    p = np.asarray(p, float)
    if abs(p[2]) > 1e-12:
        raise ValueError("query point must lie on the ground (z = 0)")
    return DenseReconstruction(left, right, rig, params).is_free(p, radius)


FREE, OCCUPIED, SKIPPED = "free", "occupied", "skipped"


@dataclass
class ObstacleGrid:
    gridspec: GridSpec
    status: np.ndarray  # (nx, ny) array of FREE / OCCUPIED / SKIPPED

    @property
    def free(self) -> np.ndarray:
        return self.status == FREE

    def to_csv(self, path) -> None:
        xs, ys = self.gridspec.xs, self.gridspec.ys
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "status"])
            for i, x in enumerate(xs):
                for j, y in enumerate(ys):
                    w.writerow([f"{x:.3f}", f"{y:.3f}", self.status[i, j]])


def build_obstacle_grid(backend: PerceptionBackend, frame, rig: StereoRig, gridspec: GridSpec) -> ObstacleGrid:
    evaluator = backend.prepare(frame.left, frame.right, rig)
    nx, ny = gridspec.shape
    status = np.full((nx, ny), SKIPPED, dtype=object)
    for k, p in enumerate(gridspec.points()):
        i, j = divmod(k, ny)
        try:
            status[i, j] = FREE if evaluator.is_free(p, gridspec.radius) else OCCUPIED
        except OutOfView:
            pass
    return ObstacleGrid(gridspec, status)
