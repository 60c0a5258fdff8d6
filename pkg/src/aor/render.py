"""Synthetic RGB-D rendering of world states.

Flat-shaded raycasting against axis-aligned boxes and upright cylinders
(everything in the tabletop world is one or the other, since the gripper is
held top-down). Depth is the camera-frame distance along -z; pixels that hit
nothing carry depth 0 and the neutral background color. Rays are cast
through pixel centers, no anti-aliasing, so segmentation masks stay crisp.

Each primitive is intersected only inside its projected pixel bounding box,
which keeps a 256x256 frame around a millisecond.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import world
from .camera import CameraModel, project_many, row_from_gl, row_to_gl

BACKGROUND_RGB = (150, 150, 150)
TABLE_RGB = (110, 75, 42)
GRIPPER_RGB = (62, 62, 82)
BIN_RGB = (90, 90, 95)

CLASS_COLORS = {
    "red": (200, 30, 30),
    "green": (30, 160, 30),
    "decoy-red-marker": (200, 40, 40),
    "neutral": BIN_RGB,
}

NO_HIT = -1
_EPS = 1e-7


@dataclass
class RgbdImage:
    rgb: np.ndarray          # (H, W, 3) uint8
    depth: np.ndarray        # (H, W) float32, meters, 0 = no hit
    convention: str
    prim_ids: np.ndarray | None = None  # (H, W) int32 raster of primitive indices


@dataclass
class BoxPrim:
    lo: np.ndarray
    hi: np.ndarray
    color: tuple
    label: str

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0])
                         for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


@dataclass
class CylinderPrim:
    center: np.ndarray   # (x, y) axis position
    radius: float
    z0: float
    z1: float
    color: tuple
    label: str

    def corners(self) -> np.ndarray:
        cx, cy = self.center
        r = self.radius
        return np.array([[cx + sx * r, cy + sy * r, z]
                         for sx in (-1, 1) for sy in (-1, 1)
                         for z in (self.z0, self.z1)])


def _ray_grid(cam: CameraModel) -> np.ndarray:
    """World-space, z=-1-normalized ray directions for every pixel center.

    The ray parameter t equals the camera-frame distance along -z, so the
    raycaster's nearest-hit t is exactly the stored depth value.
    """
    cols = np.arange(cam.width, dtype=np.float64)
    rows = np.arange(cam.height, dtype=np.float64)
    v_gl = np.asarray(row_to_gl(rows, cam), dtype=np.float64)
    x_im = (cols - cam.cx) / cam.fx
    y_im = (v_gl - cam.cy) / cam.fy
    xg, yg = np.meshgrid(x_im, y_im)
    dirs_cam = np.stack([xg, yg, -np.ones_like(xg)], axis=-1)
    return (dirs_cam @ cam.rotation.T).astype(np.float32)


_RAY_CACHE: dict = {}


def _rays_for(cam: CameraModel):
    key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
           cam.cam_rot, cam.cam_pos, cam.convention)
    entry = _RAY_CACHE.get(key)
    if entry is None:
        dirs = _ray_grid(cam)
        with np.errstate(divide="ignore"):
            inv = np.float32(1.0) / dirs
        if len(_RAY_CACHE) > 8:
            _RAY_CACHE.clear()
        entry = (dirs, inv)
        _RAY_CACHE[key] = entry
    return entry


def _pixel_bbox(prim, cam: CameraModel, pad: int = 2):
    """Projected pixel rectangle of a primitive, or the full frame when the
    projection is unsafe (corners at/behind the camera plane)."""
    try:
        u, v, _ = project_many(prim.corners(), cam)
    except Exception:
        return 0, cam.height, 0, cam.width
    c0 = max(0, int(np.floor(u.min())) - pad)
    c1 = min(cam.width, int(np.ceil(u.max())) + pad + 1)
    r0 = max(0, int(np.floor(v.min())) - pad)
    r1 = min(cam.height, int(np.ceil(v.max())) + pad + 1)
    if r0 >= r1 or c0 >= c1:
        return 0, 0, 0, 0
    return r0, r1, c0, c1


def _intersect_box(origin, dirs, inv, prim: BoxPrim):
    lo = prim.lo.astype(np.float32)
    hi = prim.hi.astype(np.float32)
    t_near = None
    t_far = None
    for axis in range(3):
        t1 = (lo[axis] - origin[axis]) * inv[..., axis]
        t2 = (hi[axis] - origin[axis]) * inv[..., axis]
        a = np.minimum(t1, t2)
        b = np.maximum(t1, t2)
        t_near = a if t_near is None else np.maximum(t_near, a)
        t_far = b if t_far is None else np.minimum(t_far, b)
    hit = (t_far >= t_near) & (t_near > _EPS)
    return np.where(hit, t_near, np.float32(np.inf))


def _intersect_cylinder(origin, dirs, prim: CylinderPrim):
    ox = np.float32(origin[0] - prim.center[0])
    oy = np.float32(origin[1] - prim.center[1])
    oz = np.float32(origin[2])
    dx = dirs[..., 0]
    dy = dirs[..., 1]
    dz = dirs[..., 2]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - np.float32(prim.radius) ** 2
    disc = b * b - 4.0 * a * c
    t_best = np.full(dx.shape, np.inf, dtype=np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + np.float32(sign) * sq) / (2.0 * a)
            z = oz + t * dz
            ok = (disc >= 0) & (t > _EPS) & (z >= prim.z0) & (z <= prim.z1)
            t_best = np.where(ok & (t < t_best), t, t_best)
        for zc in (prim.z0, prim.z1):
            t = (np.float32(zc) - oz) / dz
            px = ox + t * dx
            py = oy + t * dy
            ok = (t > _EPS) & (px * px + py * py <= np.float32(prim.radius) ** 2)
            t_best = np.where(ok & (t < t_best), t, t_best)
    return t_best


def render_primitives(prims, cam: CameraModel, want_ids: bool = False,
                      jitter_seed: int | None = None) -> RgbdImage:
    """Z-buffered raycast of a primitive list under the camera's convention."""
    dirs, inv = _rays_for(cam)
    origin = cam.position.astype(np.float32)
    depth = np.full((cam.height, cam.width), np.inf, dtype=np.float32)
    ids = np.full((cam.height, cam.width), NO_HIT, dtype=np.int32)
    for idx, prim in enumerate(prims):
        r0, r1, c0, c1 = _pixel_bbox(prim, cam)
        if r0 == r1:
            continue
        sub_dirs = dirs[r0:r1, c0:c1]
        if isinstance(prim, BoxPrim):
            t = _intersect_box(origin, sub_dirs, inv[r0:r1, c0:c1], prim)
        else:
            t = _intersect_cylinder(origin, sub_dirs, prim)
        dview = depth[r0:r1, c0:c1]
        iview = ids[r0:r1, c0:c1]
        closer = t < dview
        dview[closer] = t[closer]
        iview[closer] = idx

    rgb = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_RGB
    for idx, prim in enumerate(prims):
        rgb[ids == idx] = prim.color
    depth = np.where(np.isinf(depth), np.float32(0.0), depth)

    if jitter_seed is not None:
        # Deterministic per-pixel color jitter for robustness experiments.
        rng = np.random.default_rng(jitter_seed)
        noise = rng.integers(-6, 7, size=rgb.shape, dtype=np.int16)
        rgb = np.clip(rgb.astype(np.int16) + noise, 0, 255).astype(np.uint8)

    return RgbdImage(rgb=rgb, depth=depth, convention=cam.convention,
                     prim_ids=ids if want_ids else None)


def scene_primitives(state) -> list:
    """Build the primitive list for a WorldState (table, objects, gripper)."""
    prims = []
    tz = state.table_top_z
    prims.append(BoxPrim(
        lo=np.array([-0.50, -0.50, tz - 0.02]),
        hi=np.array([0.50, 0.50, tz]),
        color=TABLE_RGB, label="table"))
    for obj in state.objects:
        color = CLASS_COLORS[obj.color_class]
        cx, cy, cz = obj.pose
        hx, hy, hz = obj.half_extents
        if obj.shape == "cylinder":
            prims.append(CylinderPrim(
                center=np.array([cx, cy]), radius=hx,
                z0=cz - hz, z1=cz + hz, color=color, label=obj.id))
        else:
            prims.append(BoxPrim(
                lo=np.array([cx - hx, cy - hy, cz - hz]),
                hi=np.array([cx + hx, cy + hy, cz + hz]),
                color=color, label=obj.id))
    # Finger slabs come from the same geometry the contact rule uses.
    for lo, hi in world.finger_boxes(state.eef_pos, state.gripper_aperture):
        prims.append(BoxPrim(lo=lo, hi=hi, color=GRIPPER_RGB, label="finger"))
    ex, ey, ez = state.eef_pos
    prims.append(BoxPrim(
        lo=np.array([ex - 0.030, ey - 0.030, ez]),
        hi=np.array([ex + 0.030, ey + 0.030, ez + 0.025]),
        color=GRIPPER_RGB, label="palm"))
    return prims


def render(state, cam: CameraModel, want_ids: bool = False,
           jitter_seed: int | None = None) -> RgbdImage:
    """Render a WorldState as an RGB-D frame."""
    return render_primitives(scene_primitives(state), cam,
                             want_ids=want_ids, jitter_seed=jitter_seed)
