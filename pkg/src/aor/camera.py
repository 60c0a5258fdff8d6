"""Pinhole camera model, projection, and image-convention handling.

The camera frame is y-up / z-back: visible points have negative camera-frame
z, and depth is the distance along -z. Two raster conventions are supported
for how rows are stored:

* ``GL_BOTTOM_UP``  -- row 0 is the bottom of the image (larger camera-frame
  y maps to a larger row index).
* ``CV_TOP_DOWN``   -- row 0 is the top of the image.

All projection math runs in the GL row space; stored row indices are
mirrored (``height - 1 - v``) on the way in/out for CV rasters. Keeping the
conversion in exactly one place is what makes the round-trip property hold
for both conventions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GL_BOTTOM_UP = "GL_BOTTOM_UP"
CV_TOP_DOWN = "CV_TOP_DOWN"
CONVENTIONS = (GL_BOTTOM_UP, CV_TOP_DOWN)


class ProjectionError(ValueError):
    """Raised when a point cannot be projected (at or behind the camera)."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 256
    height: int = 256
    cam_rot: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    cam_pos: tuple = (0.0, 0.0, 0.0)
    convention: str = GL_BOTTOM_UP

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")
        r = np.asarray(self.cam_rot, dtype=float)
        if r.shape != (3, 3) or np.max(np.abs(r @ r.T - np.eye(3))) >= 1e-9:
            raise ValueError("cam_rot must be a 3x3 orthonormal matrix")

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.cam_rot, dtype=float)

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.cam_pos, dtype=float)


def world_from_cam(cam: CameraModel) -> np.ndarray:
    """4x4 homogeneous transform taking camera-frame points to world.

    Composed directly from the camera rotation and position, with no
    additional axis-correction factor. Mixing in an OpenCV-style
    diag(1,-1,-1) correction here is precisely the convention bug the
    vision tests probe for.
    """
    t = np.eye(4)
    t[:3, :3] = cam.rotation
    t[:3, 3] = cam.position
    return t


def cam_from_world(cam: CameraModel) -> np.ndarray:
    """Inverse of :func:`world_from_cam` (rigid transform inverse)."""
    r = cam.rotation
    t = np.eye(4)
    t[:3, :3] = r.T
    t[:3, 3] = -r.T @ cam.position
    return t


def row_to_gl(v, cam: CameraModel):
    """Convert a stored row index to GL (bottom-up) row space."""
    if cam.convention == GL_BOTTOM_UP:
        return v
    return (cam.height - 1) - np.asarray(v, dtype=float)


def row_from_gl(v_gl, cam: CameraModel):
    """Convert a GL row coordinate to the camera's stored row space."""
    if cam.convention == GL_BOTTOM_UP:
        return v_gl
    return (cam.height - 1) - np.asarray(v_gl, dtype=float)


def project(world_point, cam: CameraModel):
    """Project a world point to (u, v, d) in the camera's stored raster.

    d is the camera-frame distance along -z. Raises ProjectionError for
    points at or behind the camera plane. ``backproject(project(p)) == p``
    holds for either convention.
    """
    p = np.asarray(world_point, dtype=float)
    pc = cam_from_world(cam)[:3] @ np.append(p, 1.0)
    d = -pc[2]
    if d <= 0:
        raise ProjectionError("point is not in front of the camera")
    u = cam.fx * pc[0] / d + cam.cx
    v_gl = cam.fy * pc[1] / d + cam.cy
    return float(u), float(row_from_gl(v_gl, cam)), float(d)


def project_many(points, cam: CameraModel):
    """Vectorized :func:`project` for an (N, 3) array of visible points."""
    p = np.asarray(points, dtype=float)
    m = cam_from_world(cam)
    pc = p @ m[:3, :3].T + m[:3, 3]
    d = -pc[:, 2]
    if np.any(d <= 0):
        raise ProjectionError("some points are not in front of the camera")
    u = cam.fx * pc[:, 0] / d + cam.cx
    v = row_from_gl(cam.fy * pc[:, 1] / d + cam.cy, cam)
    return u, np.asarray(v, dtype=float), d


def look_at_camera(
    position,
    target,
    fx: float = 256.0,
    fy: float = 256.0,
    width: int = 256,
    height: int = 256,
    convention: str = GL_BOTTOM_UP,
) -> CameraModel:
    """Build a CameraModel at ``position`` looking at ``target`` (world z up)."""
    pos = np.asarray(position, dtype=float)
    view = np.asarray(target, dtype=float) - pos
    n = np.linalg.norm(view)
    if n == 0:
        raise ValueError("camera position and target coincide")
    view = view / n
    up = np.array([0.0, 0.0, 1.0])
    x_cam = np.cross(view, up)
    xn = np.linalg.norm(x_cam)
    if xn < 1e-12:
        raise ValueError("view direction is parallel to world up")
    x_cam /= xn
    z_cam = -view
    y_cam = np.cross(z_cam, x_cam)
    rot = np.column_stack([x_cam, y_cam, z_cam])
    # Re-orthonormalize so the strict orthonormality invariant holds.
    uu, _, vv = np.linalg.svd(rot)
    rot = uu @ vv
    return CameraModel(
        fx=fx,
        fy=fy,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        cam_rot=tuple(map(tuple, rot)),
        cam_pos=tuple(pos),
        convention=convention,
    )


# Default "agentview"-style vantage: 45 degree pitch, 0.9 m from the table
# center. Invented values; they live here so config snapshots can record them.
DEFAULT_CAM_DISTANCE = 0.9
DEFAULT_CAM_PITCH_DEG = 45.0


def default_camera(table_top_z: float, convention: str = GL_BOTTOM_UP) -> CameraModel:
    pitch = np.deg2rad(DEFAULT_CAM_PITCH_DEG)
    pos = (
        -DEFAULT_CAM_DISTANCE * np.cos(pitch),
        0.0,
        table_top_z + DEFAULT_CAM_DISTANCE * np.sin(pitch),
    )
    return look_at_camera(pos, (0.0, 0.0, table_top_z), convention=convention)


def camera_config_dict(cam: CameraModel) -> dict:
    """JSON-ready snapshot of the camera parameters."""
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "cam_rot": [list(r) for r in np.asarray(cam.cam_rot).tolist()],
        "cam_pos": list(cam.cam_pos),
        "convention": cam.convention,
    }


def camera_from_config(cfg: dict) -> CameraModel:
    return CameraModel(
        fx=cfg["fx"],
        fy=cfg["fy"],
        cx=cfg["cx"],
        cy=cfg["cy"],
        width=cfg["width"],
        height=cfg["height"],
        cam_rot=tuple(map(tuple, cfg["cam_rot"])),
        cam_pos=tuple(cfg["cam_pos"]),
        convention=cfg["convention"],
    )
