"""Small hand-built scenes shared by several test modules."""

from __future__ import annotations

from functools import lru_cache

from ivoa.geometry import Pose, default_rig
from ivoa.worldsim import Box, GroundRegion, Scene, SurfaceKind, render_frame

RIG = default_rig()
POSE = Pose.planar(0.0)

EMPTY = Scene(ground_seed=21)
BOX = Scene((Box((1.45, -0.25, 0.0), (1.75, 0.15, 0.5), seed=3),), ground_seed=21)
REFLECTIVE = Scene(regions=(GroundRegion("disc", (1.6, 0.0, 0.4), SurfaceKind.REFLECTIVE, seed=5),), ground_seed=21)
WALL = Scene((Box((2.05, -1.5, 0.0), (2.15, 1.5, 1.0), seed=8),), ground_seed=21)
TEXTURELESS_WALL = Scene((Box((2.05, -1.5, 0.0), (2.15, 1.5, 1.0), SurfaceKind.TEXTURELESS, seed=8),), ground_seed=21)
DARK_WALL = Scene((Box((2.05, -1.5, 0.0), (2.15, 1.5, 0.25), SurfaceKind.DARK_STRIPE, seed=8),
                   Box((2.05, -1.5, 0.25), (2.15, 1.5, 1.0), seed=9)), ground_seed=21)

SCENES = {"empty": EMPTY, "box": BOX, "reflective": REFLECTIVE, "wall": WALL,
          "textureless": TEXTURELESS_WALL, "dark": DARK_WALL}


@lru_cache(maxsize=None)
def frame(name: str):
    return render_frame(SCENES[name], RIG, POSE)
