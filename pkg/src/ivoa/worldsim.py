"""Synthetic stereo world: textured ground, boxes, planted failure surfaces.

Scenes live in the world frame (z up, ground at z = 0). Rendering casts one
ray per sub-pixel sample against the ground plane and every box, shades the
nearest hit by surface kind, and returns a rectified stereo pair plus the
exact depth image of the left camera.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from enum import Enum

import numpy as np

from .geometry import Pose, RigidTransform, StereoRig, default_rig
from .io import atomic_path, atomic_write_json

NO_RETURN = 0.0


class SurfaceKind(str, Enum):
    LAMBERTIAN = "LambertianTextured"
    TEXTURELESS = "Textureless"
    REFLECTIVE = "ReflectiveGround"
    DARK_STRIPE = "DarkStripe"


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    kind: SurfaceKind = SurfaceKind.LAMBERTIAN
    seed: int = 0

    def __post_init__(self) -> None:
        lo = tuple(float(c) for c in self.lo)
        hi = tuple(float(c) for c in self.hi)
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} -> {hi}")
        if lo[2] < 0:
            raise ValueError("boxes must rest on or above the ground")
        if self.kind is SurfaceKind.REFLECTIVE:
            raise ValueError("ReflectiveGround is a ground-region kind")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "kind", SurfaceKind(self.kind))

    def footprint_distance(self, x, y):
        """Horizontal distance from (x, y) to the box footprint (0 inside)."""
        dx = np.maximum(np.maximum(self.lo[0] - np.asarray(x, float), np.asarray(x, float) - self.hi[0]), 0.0)
        dy = np.maximum(np.maximum(self.lo[1] - np.asarray(y, float), np.asarray(y, float) - self.hi[1]), 0.0)
        return np.hypot(dx, dy)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "kind": self.kind.value, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> Box:
        return cls(tuple(d["lo"]), tuple(d["hi"]), SurfaceKind(d.get("kind", SurfaceKind.LAMBERTIAN)), int(d.get("seed", 0)))


@dataclass(frozen=True)
class GroundRegion:
    """A patch of the ground plane with its own surface kind.

    shape "disc": params = (cx, cy, radius); shape "rect": params = (x0, y0, x1, y1).
    """

    shape: str
    params: tuple[float, ...]
    kind: SurfaceKind = SurfaceKind.REFLECTIVE
    seed: int = 0

    def __post_init__(self) -> None:
        params = tuple(float(p) for p in self.params)
        if self.shape == "disc":
            if len(params) != 3 or params[2] <= 0:
                raise ValueError("disc needs (cx, cy, radius>0)")
        elif self.shape == "rect":
            if len(params) != 4 or params[0] >= params[2] or params[1] >= params[3]:
                raise ValueError("rect needs (x0, y0, x1, y1) with x0<x1, y0<y1")
        else:
            raise ValueError(f"unknown region shape {self.shape!r}")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "kind", SurfaceKind(self.kind))

    def contains(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if self.shape == "disc":
            cx, cy, r = self.params
            return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
        x0, y0, x1, y1 = self.params
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "params": list(self.params), "kind": self.kind.value, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> GroundRegion:
        return cls(d["shape"], tuple(d["params"]), SurfaceKind(d.get("kind", SurfaceKind.REFLECTIVE)), int(d.get("seed", 0)))


@dataclass(frozen=True)
class Scene:
    boxes: tuple[Box, ...] = ()
    regions: tuple[GroundRegion, ...] = ()
    ground_seed: int = 0

    def to_dict(self) -> dict:
        return {"ground_seed": self.ground_seed,
                "boxes": [b.to_dict() for b in self.boxes],
                "regions": [r.to_dict() for r in self.regions]}

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        return cls(tuple(Box.from_dict(b) for b in d.get("boxes", [])),
                   tuple(GroundRegion.from_dict(r) for r in d.get("regions", [])),
                   int(d.get("ground_seed", 0)))

    def ground_kind(self, x, y) -> np.ndarray:
        """Index into `regions` of the governing region per point, -1 for plain ground."""
        idx = np.full(np.shape(x), -1, dtype=np.int32)
        for i, reg in enumerate(self.regions):
            idx[reg.contains(x, y)] = i
        return idx


@dataclass(frozen=True)
class RenderSettings:
    texture_cells: tuple[float, ...] = (0.05, 0.025)
    texture_weights: tuple[float, ...] = (0.6, 0.4)
    texture_contrast: float = 2.2
    textureless_level: float = 0.55
    dark_level: float = 0.03
    sky_level: float = 0.8
    ceiling_height: float = 2.6
    ceiling_cell: float = 0.12
    reflect_mix: float = 0.75
    supersample: int = 2
    max_range: float = 12.0
    depth_sigma: float = 0.0

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class Frame:
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    pose: Pose
    frame_id: int = 0

    def __post_init__(self) -> None:
        if not (self.left.shape == self.right.shape == self.depth.shape):
            raise ValueError("left, right and depth must share dimensions")


# ---------------------------------------------------------------- textures

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> np.uint64(30))
    h = h * _M1
    h = h ^ (h >> np.uint64(27))
    h = h * _M2
    return h ^ (h >> np.uint64(31))


def lattice_hash(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform [0, 1) value per integer lattice node."""
    a = ix.astype(np.int64).view(np.uint64)
    b = iy.astype(np.int64).view(np.uint64)
    h = _mix(a * np.uint64(0x9E3779B97F4A7C15) + np.uint64(seed & 0xFFFFFFFF))
    h = _mix(h ^ (b * np.uint64(0xC2B2AE3D27D4EB4F)))
    return (h >> np.uint64(40)).astype(np.float64) / float(1 << 24)


def value_noise(x: np.ndarray, y: np.ndarray, cell: float, seed: int) -> np.ndarray:
    fx = np.asarray(x, float) / cell
    fy = np.asarray(y, float) / cell
    ix = np.floor(fx)
    iy = np.floor(fy)
    tx = fx - ix
    ty = fy - iy
    sx = tx * tx * (3.0 - 2.0 * tx)
    sy = ty * ty * (3.0 - 2.0 * ty)
    ix = ix.astype(np.int64)
    iy = iy.astype(np.int64)
    v00 = lattice_hash(ix, iy, seed)
    v10 = lattice_hash(ix + 1, iy, seed)
    v01 = lattice_hash(ix, iy + 1, seed)
    v11 = lattice_hash(ix + 1, iy + 1, seed)
    top = v00 + sx * (v10 - v00)
    bot = v01 + sx * (v11 - v01)
    return top + sy * (bot - top)


def surface_texture(a, b, seed: int, settings: RenderSettings, footprint=None) -> np.ndarray:
    """Multi-octave value noise mapped to [0, 1] around mid-grey.

    `footprint` is the surface size of one pixel (m); octaves whose cells
    shrink below ~2 px fade out, a cheap stand-in for mip-mapping.
    """
    acc = np.zeros(np.shape(a))
    for i, (cell, w) in enumerate(zip(settings.texture_cells, settings.texture_weights)):
        weight = w
        if footprint is not None:
            weight = w * np.clip(cell / (2.0 * footprint) - 1.0, 0.0, 1.0)
        acc += weight * (value_noise(a, b, cell, seed * 7919 + i) - 0.5)
    total = sum(settings.texture_weights)
    return np.clip(0.5 + settings.texture_contrast * acc / total, 0.0, 1.0)


# ---------------------------------------------------------------- ray casting


def camera_rays(rig: StereoRig, supersample: int = 1) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape (H, W, s*s, 3)."""
    intr = rig.intrinsics
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    ou, ov = np.meshgrid(offs, offs)
    ou = ou.ravel()
    ov = ov.ravel()
    vv, uu = np.mgrid[0:intr.height, 0:intr.width].astype(float)
    u = uu[..., None] + ou
    v = vv[..., None] + ov
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def cast_rays(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along origin + t * dirs for t > 0.

    Returns (t, surface, axis): t is inf on a miss, surface is -1 for a miss,
    0 for the ground and i + 1 for box i; axis is the hit face normal axis.
    """
    shape = dirs.shape[:-1]
    t_best = np.full(shape, np.inf)
    surf = np.full(shape, -1, dtype=np.int32)
    axis = np.full(shape, 2, dtype=np.int8)

    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dz < 0, -origin[2] / dz, np.inf)
    hit = tg > 0
    t_best = np.where(hit, tg, t_best)
    surf[hit & np.isfinite(tg)] = 0

    for i, box in enumerate(scene.boxes):
        lo = np.asarray(box.lo)
        hi = np.asarray(box.hi)
        t_near = np.full(shape, -np.inf)
        t_far = np.full(shape, np.inf)
        near_axis = np.zeros(shape, dtype=np.int8)
        inside_ok = np.ones(shape, dtype=bool)
        for a in range(3):
            d = dirs[..., a]
            parallel = np.abs(d) < 1e-15
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[a] - origin[a]) / d
                t2 = (hi[a] - origin[a]) / d
            ta = np.minimum(t1, t2)
            tb = np.maximum(t1, t2)
            if parallel.any():
                inside = (origin[a] >= lo[a]) & (origin[a] <= hi[a])
                ta = np.where(parallel, -np.inf, ta)
                tb = np.where(parallel, np.inf, tb)
                inside_ok &= ~parallel | inside
            upd = ta > t_near
            near_axis = np.where(upd, a, near_axis).astype(np.int8)
            t_near = np.maximum(t_near, ta)
            t_far = np.minimum(t_far, tb)
        hit = inside_ok & (t_near <= t_far) & (t_near > 0) & (t_near < t_best)
        t_best = np.where(hit, t_near, t_best)
        surf[hit] = i + 1
        axis = np.where(hit, near_axis, axis).astype(np.int8)
    return t_best, surf, axis


def _shade(scene: Scene, origin: np.ndarray, dirs: np.ndarray, t: np.ndarray, surf: np.ndarray,
           axis: np.ndarray, settings: RenderSettings, pixel_angle: float, lod_origin=None) -> np.ndarray:
    """Intensity of each hit. Texture detail is chosen from the footprint seen from
    `lod_origin` (default: the ray origin); sharing one lod_origin between the two
    cameras keeps Lambertian shading identical in both views."""
    out = np.full(t.shape, settings.sky_level)
    tt = np.where(np.isfinite(t), t, 0.0)
    pts = origin + tt[..., None] * dirs
    ref = pts - (origin if lod_origin is None else np.asarray(lod_origin, float))
    dist = np.maximum(np.linalg.norm(ref, axis=-1), 1e-12)
    cos_inc = np.abs(np.take_along_axis(ref, axis[..., None].astype(np.intp), -1)[..., 0]) / dist
    footprint = dist * pixel_angle / np.sqrt(np.maximum(cos_inc, 1e-3))

    g = surf == 0
    if g.any():
        gx, gy = pts[g][:, 0], pts[g][:, 1]
        fp = footprint[g]
        val = surface_texture(gx, gy, scene.ground_seed, settings, fp)
        region = scene.ground_kind(gx, gy)
        for i, reg in enumerate(scene.regions):
            m = region == i
            if not m.any():
                continue
            if reg.kind is SurfaceKind.LAMBERTIAN:
                val[m] = surface_texture(gx[m], gy[m], reg.seed, settings, fp[m])
            elif reg.kind is SurfaceKind.TEXTURELESS:
                val[m] = settings.textureless_level
            elif reg.kind is SurfaceKind.DARK_STRIPE:
                val[m] = settings.dark_level
            else:
                # mirror the view ray about the ground and read a bright ceiling pattern
                d = dirs[g][m]
                tc = settings.ceiling_height / -d[:, 2]
                cx = gx[m] + tc * d[:, 0]
                cy = gy[m] + tc * d[:, 1]
                n = value_noise(cx, cy, settings.ceiling_cell, reg.seed * 131 + 17)
                glare = np.clip((n - 0.35) * 2.5, 0.0, 1.0)
                val[m] = (1 - settings.reflect_mix) * val[m] + settings.reflect_mix * glare
        out[g] = val

    for i, box in enumerate(scene.boxes):
        m = surf == i + 1
        if not m.any():
            continue
        if box.kind is SurfaceKind.TEXTURELESS:
            out[m] = settings.textureless_level
        elif box.kind is SurfaceKind.DARK_STRIPE:
            out[m] = settings.dark_level
        else:
            p = pts[m]
            ax = axis[m]
            a = np.where(ax == 0, p[:, 1], p[:, 0])
            b = np.where(ax == 2, p[:, 1], p[:, 2])
            out[m] = _face_texture(a, b, box.seed, ax, settings, footprint[m])
    return out


def _face_texture(a, b, seed, ax, settings, footprint) -> np.ndarray:
    val = np.empty(a.shape)
    for k in range(3):
        m = ax == k
        if m.any():
            val[m] = surface_texture(a[m], b[m], 1000 + seed * 3 + k, settings, footprint[m])
    return val


def camera_poses(rig: StereoRig, pose: Pose) -> tuple[RigidTransform, RigidTransform]:
    world_from_left = pose.world_from_robot.compose(rig.cam_from_robot.inverse())
    world_from_right = world_from_left.compose(rig.right_from_left.inverse())
    return world_from_left, world_from_right


def _render_view(scene, rig, world_from_cam, settings, want_depth, lod_origin=None):
    rays_cam = camera_rays(rig, settings.supersample)
    dirs = rays_cam @ world_from_cam.rotation.T
    origin = world_from_cam.translation
    t, surf, axis = cast_rays(scene, origin, dirs)
    img = _shade(scene, origin, dirs, t, surf, axis, settings, 1.0 / rig.intrinsics.fx, lod_origin).mean(axis=-1)
    depth = None
    if want_depth:
        center = camera_rays(rig, 1)[:, :, 0, :] @ world_from_cam.rotation.T
        tc, _, _ = cast_rays(scene, origin, center)
        depth = tc
    return img, depth


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used on disk so in-memory and reloaded frames agree."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render_frame(scene: Scene, rig: StereoRig, pose: Pose, noise_seed: int = 0, frame_id: int = 0,
                 settings: RenderSettings | None = None) -> Frame:
    settings = settings or RenderSettings()
    world_from_left, world_from_right = camera_poses(rig, pose)
    for tf in (world_from_left, world_from_right):
        if tf.translation[2] <= 0:
            raise ValueError("degenerate pose: camera at or below the ground")
    mid = 0.5 * (world_from_left.translation + world_from_right.translation)
    left, depth = _render_view(scene, rig, world_from_left, settings, True, mid)
    right, _ = _render_view(scene, rig, world_from_right, settings, False, mid)
    # camera t is the optical-axis depth because rays have unit camera z
    depth = np.where(np.isfinite(depth) & (depth <= settings.max_range), depth, NO_RETURN)
    if settings.depth_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        noisy = depth + rng.normal(0.0, settings.depth_sigma, depth.shape)
        depth = np.where((depth > 0) & (noisy > 0), noisy, NO_RETURN)
    return Frame(quantize(left), quantize(right), depth.astype(np.float32), pose, frame_id)


# ---------------------------------------------------------------- sessions

TEMPLATES = ("benign", "planted", "explicit")
WALL_HEIGHT = 1.5
STRIPE_HEIGHT = 0.25


@dataclass(frozen=True)
class SessionConfig:
    """Straight-line drive through one static scene.

    template "benign" places textured boxes only; "planted" adds a reflective
    ground patch and a failure wall (textureless or dark-striped); "explicit"
    renders `scene` as given. Random geometry is snapped so box faces sit half
    a lattice step between query points.
    """

    n_frames: int = 10
    step: float = 0.1
    start_x: float = 0.0
    template: str = "planted"
    scene: Scene | None = None
    n_boxes: tuple[int, int] = (1, 3)
    snap: float = 0.1
    rig: StereoRig = field(default_factory=default_rig)
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ValueError("a session needs at least one frame")
        if self.step < 0:
            raise ValueError("step must be non-negative")
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; expected one of {TEMPLATES}")
        if self.template == "explicit" and self.scene is None:
            raise ValueError("explicit template needs a scene")
        if self.n_boxes[0] < 0 or self.n_boxes[0] > self.n_boxes[1]:
            raise ValueError("n_boxes must be an ordered non-negative range")

    def to_dict(self) -> dict:
        return {"n_frames": self.n_frames, "step": self.step, "start_x": self.start_x,
                "template": self.template, "n_boxes": list(self.n_boxes), "snap": self.snap,
                "scene": None if self.scene is None else self.scene.to_dict(),
                "rig": self.rig.to_dict(), "render": self.render.to_dict()}


@dataclass(frozen=True)
class Session:
    scene: Scene
    frames: tuple[Frame, ...]
    config: SessionConfig
    seed: int

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return ((f, self.scene) for f in self.frames)

    def __getitem__(self, i: int) -> tuple[Frame, Scene]:
        return self.frames[i], self.scene

    @property
    def rig(self) -> StereoRig:
        return self.config.rig

    def extents(self) -> list[dict]:
        return planted_extents(self.scene)


def planted_extents(scene: Scene) -> list[dict]:
    """Every failure-planting surface: non-Lambertian ground regions and box footprints."""
    out = []
    for reg in scene.regions:
        if reg.kind is not SurfaceKind.LAMBERTIAN:
            out.append({"kind": reg.kind.value, "shape": reg.shape, "params": list(reg.params)})
    for b in scene.boxes:
        if b.kind is not SurfaceKind.LAMBERTIAN:
            out.append({"kind": b.kind.value, "shape": "rect",
                        "params": [b.lo[0], b.lo[1], b.hi[0], b.hi[1]]})
    return out


def _snap(v: float, q: float) -> float:
    """Nearest value of the form (n + 1/2) * q: faces fall midway between lattice rows."""
    return round((np.floor(v / q) + 0.5) * q, 9)


def _clear(lo, hi, taken, gap) -> bool:
    return all(lo[0] >= b[2] + gap or hi[0] <= b[0] - gap or lo[1] >= b[3] + gap or hi[1] <= b[1] - gap
               for b in taken)


def _random_boxes(rng, cfg: SessionConfig, x_range, taken, count, avoid=()) -> list[Box]:
    """Random textured boxes at least 0.3 m from everything in `taken` and not overlapping `avoid`."""
    boxes = []
    q = cfg.snap
    for _ in range(200):
        if len(boxes) >= count:
            break
        w = rng.uniform(0.2, 0.6)
        d = rng.uniform(0.2, 0.6)
        x0 = _snap(rng.uniform(*x_range), q)
        y0 = _snap(rng.uniform(-1.2, 1.2 - w), q)
        x1 = x0 + max(q, round(d / q) * q)
        y1 = y0 + max(q, round(w / q) * q)
        if not _clear((x0, y0), (x1, y1), taken, 0.3) or not _clear((x0, y0), (x1, y1), avoid, 0.0):
            continue
        taken.append((x0, y0, x1, y1))
        h = rng.uniform(0.25, 0.6)
        boxes.append(Box((x0, y0, 0.0), (round(x1, 9), round(y1, 9), h), SurfaceKind.LAMBERTIAN,
                         int(rng.integers(1 << 30))))
    return boxes


def _planted_scene(rng, cfg: SessionConfig) -> Scene:
    travel = cfg.step * (cfg.n_frames - 1)
    x_lo, x_hi = cfg.start_x + 1.2, cfg.start_x + travel + 2.6
    q = cfg.snap
    taken: list[tuple] = []
    boxes: list[Box] = []
    regions: list[GroundRegion] = []

    # failure wall: thin, tall, one end far outside the field of view
    wx = _snap(rng.uniform(x_lo + 0.6, x_hi), q)
    side = rng.choice([-1.0, 1.0])
    # the inner end reaches past the centreline, so at least 11 lattice points lie on the wall
    inner = _snap(rng.uniform(-0.6, 0.0), q) * side
    y0, y1 = (inner, 4.0) if side > 0 else (-4.0, inner)
    wall_lo, wall_hi = (wx, y0), (round(wx + q, 9), y1)
    seed = int(rng.integers(1 << 30))
    if rng.random() < 0.5:
        boxes.append(Box((*wall_lo, 0.0), (*wall_hi, WALL_HEIGHT), SurfaceKind.TEXTURELESS, seed))
    else:
        boxes.append(Box((*wall_lo, 0.0), (*wall_hi, STRIPE_HEIGHT), SurfaceKind.DARK_STRIPE, seed))
        boxes.append(Box((*wall_lo, STRIPE_HEIGHT), (*wall_hi, WALL_HEIGHT), SurfaceKind.LAMBERTIAN, seed + 1))
    taken.append((*wall_lo, *wall_hi))

    # reflective patch clear of the wall
    for _ in range(200):
        r = rng.uniform(0.3, 0.45)
        cx = rng.uniform(x_lo + r, x_hi - r)
        cy = rng.uniform(-0.8, 0.8)
        if _clear((cx - r, cy - r), (cx + r, cy + r), taken, 0.2):
            regions.append(GroundRegion("disc", (round(cx, 6), round(cy, 6), round(r, 6)),
                                        SurfaceKind.REFLECTIVE, int(rng.integers(1 << 30))))
            taken.append((cx - r, cy - r, cx + r, cy + r))
            break

    # keep other boxes out of the strip between the robot and the wall: with the inner
    # end past the centreline a 0.2 m clearance leaves the wall's base visible to both
    # cameras (an occluded base would turn the planted miss into a hit)
    margin = 0.2
    if side > 0:
        sight = (cfg.start_x - 1.0, inner - margin, wall_hi[0], y1)
    else:
        sight = (cfg.start_x - 1.0, y0, wall_hi[0], inner + margin)
    n = int(rng.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))
    boxes += _random_boxes(rng, cfg, (x_lo, x_hi), taken, n, avoid=[sight])
    return Scene(tuple(boxes), tuple(regions), int(rng.integers(1 << 30)))


def _benign_scene(rng, cfg: SessionConfig) -> Scene:
    travel = cfg.step * (cfg.n_frames - 1)
    x_range = (cfg.start_x + 1.2, cfg.start_x + travel + 2.6)
    n = int(rng.integers(max(cfg.n_boxes[0], 1), cfg.n_boxes[1] + 2))
    boxes = _random_boxes(rng, cfg, x_range, [], n)
    return Scene(tuple(boxes), (), int(rng.integers(1 << 30)))


def make_scene(cfg: SessionConfig, seed: int) -> Scene:
    if cfg.template == "explicit":
        return cfg.scene
    rng = np.random.default_rng([seed, 0x5CE7E])
    return _planted_scene(rng, cfg) if cfg.template == "planted" else _benign_scene(rng, cfg)


def session_poses(cfg: SessionConfig) -> list[Pose]:
    return [Pose.planar(round(cfg.start_x + i * cfg.step, 9)) for i in range(cfg.n_frames)]


def frame_noise_seed(seed: int, frame_id: int) -> int:
    return int(np.random.SeedSequence([seed, frame_id]).generate_state(1)[0])


def make_session(cfg: SessionConfig, seed: int) -> Session:
    """Render a deterministic straight-line session; identical (cfg, seed) give identical frames."""
    scene = make_scene(cfg, seed)
    frames = tuple(render_frame(scene, cfg.rig, pose, frame_noise_seed(seed, i), i, cfg.render)
                   for i, pose in enumerate(session_poses(cfg)))
    return Session(scene, frames, cfg, seed)


# ---------------------------------------------------------------- file formats

DEPTH_MAGIC = b"IVOADPTH"


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit PGM (P5) from an image in [0, 1]."""
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return (data.reshape(h, w) / 255.0).astype(np.float32)


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h))
        fh.write(np.asarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth magic")
    w, h = struct.unpack("<II", raw[8:16])
    if len(raw) != 16 + 4 * w * h:
        raise ValueError(f"{path}: truncated depth raster")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def frame_files(frame_id: int) -> dict[str, str]:
    return {"left": f"left_{frame_id:04d}.pgm", "right": f"right_{frame_id:04d}.pgm",
            "depth": f"depth_{frame_id:04d}.bin"}


def session_manifest(session: Session) -> dict:
    return {
        "format": 1,
        "seed": session.seed,
        "config": session.config.to_dict(),
        "rig": session.rig.to_dict(),
        "scene": session.scene.to_dict(),
        "planted": session.extents(),
        "frames": [{"frame_id": f.frame_id, "pose": f.pose.to_dict(), **frame_files(f.frame_id)}
                   for f in session.frames],
    }


def save_session(session: Session, out_dir) -> Path:
    """Write frames and manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in session.frames:
        names = frame_files(f.frame_id)
        with atomic_path(out / names["left"]) as tmp:
            write_pgm(tmp, f.left)
        with atomic_path(out / names["right"]) as tmp:
            write_pgm(tmp, f.right)
        with atomic_path(out / names["depth"]) as tmp:
            write_depth(tmp, f.depth)
    path = out / "manifest.json"
    atomic_write_json(path, session_manifest(session))
    return path


@dataclass(frozen=True)
class StoredSession:
    """A session read back from disk; frames are loaded on demand."""

    root: Path
    manifest: dict

    @classmethod
    def open(cls, root) -> StoredSession:
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"missing session manifest {path}")
        return cls(root, json.loads(path.read_text()))

    @property
    def rig(self) -> StereoRig:
        return StereoRig.from_dict(self.manifest["rig"])

    @property
    def scene(self) -> Scene:
        return Scene.from_dict(self.manifest["scene"])

    @property
    def seed(self) -> int:
        return int(self.manifest["seed"])

    def __len__(self) -> int:
        return len(self.manifest["frames"])

    def frame(self, i: int) -> Frame:
        entry = self.manifest["frames"][i]
        paths = {k: self.root / entry[k] for k in ("left", "right", "depth")}
        for p in paths.values():
            if not p.exists():
                raise FileNotFoundError(f"missing frame file {p}")
        return Frame(read_pgm(paths["left"]), read_pgm(paths["right"]), read_depth(paths["depth"]),
                     Pose.from_dict(entry["pose"]), int(entry["frame_id"]))

    def __iter__(self):
        scene = self.scene
        return ((self.frame(i), scene) for i in range(len(self)))
