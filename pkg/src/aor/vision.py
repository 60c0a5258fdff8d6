"""RGB-D to feature-frame pipeline.

HSV color segmentation, connected components, centroid depth sampling, and
pinhole back-projection into world coordinates. Raster masks are computed on
the image exactly as stored; the row convention is honored in exactly one
place (``backproject``), which is what prevents double-flip bugs.

The config deliberately exposes the two historical convention mistakes as
flags (``backproject_y_flip``, ``extrinsic_cv_correction``) so a controller
rewrite can introduce or remove them; both default to the correct behavior.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import CameraModel, row_to_gl, world_from_cam


class InvalidDepthError(ValueError):
    """Raised when back-projecting a non-positive depth."""


class VisionConfigError(ValueError):
    """Raised for malformed vision configuration dictionaries."""


@dataclass(frozen=True)
class ColorSpec:
    hue_windows: tuple            # ((lo, hi) degrees, ...); red wraps as two windows
    s_min: float
    v_min: float
    s_max: float = 1.0
    v_max: float = 1.0

    def __post_init__(self):
        for lo, hi in self.hue_windows:
            if not (0 <= lo <= hi <= 360):
                raise VisionConfigError(f"bad hue window ({lo}, {hi})")
        for name, val in (("s_min", self.s_min), ("v_min", self.v_min),
                          ("s_max", self.s_max), ("v_max", self.v_max)):
            if not (0.0 <= val <= 1.0):
                raise VisionConfigError(f"{name} must lie in [0, 1]")


RED_SPEC = ColorSpec(hue_windows=((0.0, 10.0), (350.0, 360.0)), s_min=0.5, v_min=0.25)
GREEN_SPEC = ColorSpec(hue_windows=((100.0, 140.0),), s_min=0.4, v_min=0.2)
SILVER_SPEC = ColorSpec(hue_windows=((0.0, 360.0),), s_min=0.0, s_max=0.15, v_min=0.55)

_NAMED_SPECS = {"red": RED_SPEC, "green": GREEN_SPEC, "silver": SILVER_SPEC}


@dataclass(frozen=True)
class TargetSpec:
    name: str
    color: ColorSpec
    mode: str = "largest"         # "largest" | "mean" (the buggy baseline)
    offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("largest", "mean"):
            raise VisionConfigError(f"unknown centroid mode {self.mode!r}")


@dataclass(frozen=True)
class VisionConfig:
    targets: tuple
    depth_bias_z: float = 0.0
    backproject_y_flip: bool = False
    extrinsic_cv_correction: bool = False


def default_vision_config(target_names) -> VisionConfig:
    specs = []
    for name in target_names:
        color = GREEN_SPEC if name == "cubeB" else RED_SPEC
        specs.append(TargetSpec(name=name, color=color))
    return VisionConfig(targets=tuple(specs))


def vision_config_from_dict(raw: dict, task_target_names) -> VisionConfig:
    """Parse the declarative VISION block of a controller script."""
    if not isinstance(raw, dict):
        raise VisionConfigError("VISION must be a dict")
    known = {"targets", "depth_bias_z", "backproject_y_flip",
             "extrinsic_cv_correction"}
    extra = set(raw) - known
    if extra:
        raise VisionConfigError(f"unknown VISION keys {sorted(extra)}")
    targets_raw = raw.get("targets")
    if not isinstance(targets_raw, dict) or not targets_raw:
        raise VisionConfigError("VISION.targets must be a non-empty dict")
    targets = []
    for name, tr in targets_raw.items():
        if not isinstance(tr, dict):
            raise VisionConfigError(f"target {name!r} must be a dict")
        t_known = {"color", "hue", "s_min", "v_min", "s_max", "v_max",
                   "mode", "offset"}
        t_extra = set(tr) - t_known
        if t_extra:
            raise VisionConfigError(f"unknown target keys {sorted(t_extra)}")
        if "color" in tr:
            try:
                color = _NAMED_SPECS[tr["color"]]
            except KeyError:
                raise VisionConfigError(f"unknown named color {tr['color']!r}") from None
        elif "hue" in tr:
            windows = tuple((float(lo), float(hi)) for lo, hi in tr["hue"])
            color = ColorSpec(hue_windows=windows,
                              s_min=float(tr.get("s_min", 0.0)),
                              v_min=float(tr.get("v_min", 0.0)),
                              s_max=float(tr.get("s_max", 1.0)),
                              v_max=float(tr.get("v_max", 1.0)))
        else:
            raise VisionConfigError(f"target {name!r} needs 'color' or 'hue'")
        offset = tuple(float(x) for x in tr.get("offset", (0.0, 0.0, 0.0)))
        if len(offset) != 3:
            raise VisionConfigError("target offset must have 3 components")
        targets.append(TargetSpec(name=str(name), color=color,
                                  mode=str(tr.get("mode", "largest")),
                                  offset=offset))
    cfg = VisionConfig(
        targets=tuple(targets),
        depth_bias_z=float(raw.get("depth_bias_z", 0.0)),
        backproject_y_flip=bool(raw.get("backproject_y_flip", False)),
        extrinsic_cv_correction=bool(raw.get("extrinsic_cv_correction", False)),
    )
    return cfg


# --------------------------------------------------------------------------
# color conversion and segmentation
# --------------------------------------------------------------------------

def rgb_to_hsv_array(rgb: np.ndarray):
    """Hexcone HSV for a (..., 3) uint8 array: h in degrees, s and v in [0,1]."""
    r = rgb[..., 0].astype(np.float32)
    g = rgb[..., 1].astype(np.float32)
    b = rgb[..., 2].astype(np.float32)
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    v = mx / np.float32(255.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(mx > 0, delta / mx, np.float32(0.0))
        safe = np.where(delta > 0, delta, np.float32(1.0))
        rm = mx == r
        gm = ~rm & (mx == g)
        h = np.where(rm, np.mod((g - b) / safe, np.float32(6.0)),
                     np.where(gm, (b - r) / safe + np.float32(2.0),
                              (r - g) / safe + np.float32(4.0)))
        h = np.where(delta > 0, h, np.float32(0.0))
    return h * np.float32(60.0), s, v


def rgb_to_hsv(rgb_pixel):
    """Scalar convenience wrapper; h is 0 when saturation is 0."""
    h, s, v = rgb_to_hsv_array(np.asarray(rgb_pixel, dtype=np.uint8).reshape(1, 3))
    return float(h[0]), float(s[0]), float(v[0])


def _hsv_of(img):
    # cache the conversion on the image: multiple targets share one frame
    cached = getattr(img, "_hsv_cache", None)
    if cached is None:
        cached = rgb_to_hsv_array(img.rgb)
        try:
            img._hsv_cache = cached
        except AttributeError:
            pass
    return cached


def segment_color(img, spec: ColorSpec) -> np.ndarray:
    """Boolean mask of pixels whose HSV falls inside all of the spec's windows."""
    h, s, v = _hsv_of(img)
    in_hue = np.zeros(h.shape, dtype=bool)
    for lo, hi in spec.hue_windows:
        in_hue |= (h >= lo) & (h <= hi)
    return (in_hue & (s >= spec.s_min) & (s <= spec.s_max)
            & (v >= spec.v_min) & (v <= spec.v_max))


# --------------------------------------------------------------------------
# components and centroids
# --------------------------------------------------------------------------

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class Component:
    centroid: tuple        # (u, v) = (column, row), float
    area: int
    pixels: np.ndarray     # (N, 2) array of (row, col) indices


def largest_component(mask: np.ndarray) -> Component | None:
    """Largest 4-connected component; area ties go to the component whose
    first pixel in row-major order comes earliest. None on an empty mask."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return None
    labels, n = ndimage.label(m, structure=_FOUR_CONN)
    areas = np.bincount(labels.ravel())[1:]
    best_area = areas.max()
    candidates = np.flatnonzero(areas == best_area) + 1
    if len(candidates) == 1:
        best = candidates[0]
    else:
        flat = labels.ravel()
        best = min(candidates, key=lambda lab: int(np.argmax(flat == lab)))
    rows, cols = np.nonzero(labels == best)
    centroid = (float(cols.mean()), float(rows.mean()))
    return Component(centroid=centroid, area=int(best_area),
                     pixels=np.column_stack([rows, cols]))


def mean_centroid(mask: np.ndarray):
    """Unweighted mean (u, v) of all set pixels -- the decoy-sensitive
    baseline the rewrite narrative replaces. None on an empty mask."""
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if len(rows) == 0:
        return None
    return (float(cols.mean()), float(rows.mean()))


# --------------------------------------------------------------------------
# back-projection
# --------------------------------------------------------------------------

_CV_AXIS_FIX = np.diag([1.0, -1.0, -1.0])


def backproject(u, v, d, cam: CameraModel, y_flip: bool = False,
                extrinsic_cv_correction: bool = False):
    """Pixel (u, v) at depth d -> 3-vector world point.

    The stored row v is first converted to bottom-up row space, then
    x_p = (u - cx) d / fx, y_p = (v - cy) d / fy, p_cam = [x_p, y_p, -d].
    ``y_flip`` negates y_p (the top-down habit that is wrong for bottom-up
    rasters); ``extrinsic_cv_correction`` applies the diag(1,-1,-1) axis fix
    before the camera-to-world transform. Both flags exist so the error
    families are reproducible; leave them off for correct output.

    Accepts scalars or equal-length arrays; returns shape (3,) or (N, 3).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise InvalidDepthError("depth must be positive")
    v_gl = np.asarray(row_to_gl(v, cam), dtype=float)
    x_p = (u - cam.cx) * d / cam.fx
    y_p = (v_gl - cam.cy) * d / cam.fy
    if y_flip:
        y_p = -y_p
    p_cam = np.stack([x_p, y_p, -d], axis=-1)
    if extrinsic_cv_correction:
        p_cam = p_cam @ _CV_AXIS_FIX.T
    t = world_from_cam(cam)
    return p_cam @ t[:3, :3].T + t[:3, 3]


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------

@dataclass
class TargetFeature:
    detected: bool
    position: tuple | None = None
    pixel_centroid: tuple | None = None
    blob_area: int = 0


@dataclass
class FeatureFrame:
    step: int
    eef_pos: tuple
    gripper_aperture: float
    targets: dict = field(default_factory=dict)

    def to_script_dict(self) -> dict:
        """Flat, read-only view handed to controller scripts."""
        d = {
            "step": self.step,
            "eef": tuple(float(x) for x in self.eef_pos),
            "aperture": float(self.gripper_aperture),
        }
        for name, t in self.targets.items():
            d[f"{name}.detected"] = bool(t.detected)
            d[f"{name}.pos"] = (None if t.position is None
                                else tuple(float(x) for x in t.position))
            d[f"{name}.area"] = float(t.blob_area)
        return d


def _sample_depth(depth: np.ndarray, u: float, v: float) -> float:
    """Median of the non-zero depths in the 3x3 window around (u, v)."""
    h, w = depth.shape
    col = int(round(u))
    row = int(round(v))
    r0, r1 = max(0, row - 1), min(h, row + 2)
    c0, c1 = max(0, col - 1), min(w, col + 2)
    window = depth[r0:r1, c0:c1].ravel()
    nonzero = window[window > 0]
    if len(nonzero) == 0:
        return 0.0
    return float(np.median(nonzero))


def extract_features(img, cam: CameraModel, proprio, config: VisionConfig) -> FeatureFrame:
    """Segment each configured target and localize it in world coordinates.

    proprio is (eef_pos, gripper_aperture, step). Detection failures degrade
    to detected=False rather than raising.
    """
    eef_pos, aperture, step = proprio
    frame = FeatureFrame(step=int(step), eef_pos=tuple(float(x) for x in eef_pos),
                         gripper_aperture=float(aperture))
    for target in config.targets:
        mask = segment_color(img, target.color)
        if target.mode == "mean":
            centroid = mean_centroid(mask)
            area = int(np.count_nonzero(mask))
        else:
            comp = largest_component(mask)
            centroid = None if comp is None else comp.centroid
            area = 0 if comp is None else comp.area
        if centroid is None:
            frame.targets[target.name] = TargetFeature(detected=False)
            continue
        d = _sample_depth(img.depth, centroid[0], centroid[1])
        if d <= 0:
            frame.targets[target.name] = TargetFeature(
                detected=False, pixel_centroid=centroid, blob_area=area)
            continue
        pos = backproject(centroid[0], centroid[1], d, cam,
                          y_flip=config.backproject_y_flip,
                          extrinsic_cv_correction=config.extrinsic_cv_correction)
        pos = np.asarray(pos, dtype=float)
        pos[2] -= config.depth_bias_z
        pos += np.asarray(target.offset, dtype=float)
        frame.targets[target.name] = TargetFeature(
            detected=True, position=tuple(pos), pixel_centroid=centroid,
            blob_area=area)
    return frame
