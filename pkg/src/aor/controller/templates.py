"""Controller source builders and per-task baselines.

The builders assemble full controller sources in the sandboxed scripting
language; the mock rewriter replays sequences of them, and the version-0
defaults are deliberately imperfect starting points for those narratives.

All variants share a survey-then-approach pattern: the target estimate is
latched from the home vantage (where the arm cannot occlude the scene) and
the approach servos against the latched point, re-surveying from home after
a failed grasp.
"""
from __future__ import annotations

from ..world import ConfigError

# --------------------------------------------------------------------------
# lift controller builder
# --------------------------------------------------------------------------

def build_lift_source(depth_bias: float = 0.0, stationary: bool = False,
                      area_ceiling: float | None = None,
                      closure_confirm: bool = False,
                      align_tol: float = 0.02) -> str:
    if stationary:
        grasp_body = _LIFT_GRASP_CONFIRM if closure_confirm else _LIFT_GRASP_DWELL
    else:
        grasp_body = _LIFT_GRASP_PRESSING
    area_gate = ""
    if area_ceiling:
        area_gate = f"""\
            if f["cube.area"] > {area_ceiling}:
                return [0.0, 0.0, 0.0, -1.0]   # oversized blob: unreliable
"""
    return f"""\
# lift controller: survey the red cube, hover, descend, grasp, lift
VISION = {{
    "targets": {{"cube": {{"color": "red", "mode": "largest"}}}},
    "depth_bias_z": {depth_bias},
}}
EMA_ALPHA = 0.4

TABLE_TOP = 0.8
HOME_Z = 1.05
HOVER = 0.15
ALIGN_TOL = {align_tol}
GAIN = 80.0

phase = "reach"
phase_start = 0
latched = False
settle = 0
sx = 0.0
sy = 0.0
sz = 0.0

def reset():
    global phase, phase_start, latched, settle, sx, sy, sz
    phase = "reach"
    phase_start = 0
    latched = False
    settle = 0
    sx = 0.0
    sy = 0.0
    sz = 0.0

def servo(eef, px, py, pz):
    return [clamp(GAIN * (px - eef[0]), -2, 2),
            clamp(GAIN * (py - eef[1]), -2, 2),
            clamp(GAIN * (pz - eef[2]), -2, 2)]

def get_action(f):
    global phase, phase_start, latched, settle, sx, sy, sz
    eef = f["eef"]
    if phase == "reach":
        if not latched:
            # survey from home: the arm must not occlude the scene
            if hypot(eef[0], eef[1]) > 0.02 or abs(eef[2] - HOME_Z) > 0.02:
                d = servo(eef, 0.0, 0.0, HOME_Z)
                return [d[0], d[1], d[2], -1.0]
            if not f["cube.detected"]:
                return [0.0, 0.0, 0.0, -1.0]
{area_gate}\
            settle = settle + 1
            if settle < 3:
                return [0.0, 0.0, 0.0, -1.0]
            pos = f["cube.pos"]
            sx = pos[0]
            sy = pos[1]
            sz = pos[2]
            latched = True
        d = servo(eef, sx, sy, sz + HOVER)
        aligned = hypot(sx - eef[0], sy - eef[1]) < ALIGN_TOL
        settled = abs(sz + HOVER - eef[2]) < ALIGN_TOL
        credible = sz - TABLE_TOP < 0.03   # a tabletop object's center sits low
        if aligned and settled and credible:
            phase = "descend"
            phase_start = f["step"]
        if f["step"] - phase_start > 200:
            phase_start = f["step"]
        return [d[0], d[1], d[2], -1.0]
    if phase == "descend":
        d = servo(eef, sx, sy, sz + 0.027)
        d = [d[0], d[1], clamp(d[2], -0.5, 0.5)]
        if eef[2] - (sz + 0.027) < 0.012:
            phase = "grasp"
            phase_start = f["step"]
        if f["step"] - phase_start > 120:
            phase = "reach"
            phase_start = f["step"]
            latched = False
            settle = 0
        return [d[0], d[1], d[2], -1.0]
    if phase == "grasp":
{grasp_body}
    d = servo(eef, sx, sy, TABLE_TOP + 0.18)
    if f["step"] - phase_start > 150:
        phase = "reach"
        phase_start = f["step"]
        latched = False
        settle = 0
        return [0.0, 0.0, 0.0, -1.0]
    return [d[0], d[1], d[2], 1.0]
"""


# keep pressing below the grasp point to "ensure firm contact" while closing
_LIFT_GRASP_PRESSING = """\
        d = servo(eef, sx, sy, sz + 0.017)
        if f["aperture"] < 0.003:
            phase = "reach"                # closed on nothing: start over
            phase_start = f["step"]
            latched = False
            settle = 0
            return [0.0, 0.0, 0.0, -1.0]
        if f["step"] - phase_start > 40:
            phase = "lift"
            phase_start = f["step"]
        return [d[0], d[1], d[2], 1.0]
"""

_LIFT_GRASP_DWELL = """\
        if f["step"] - phase_start > 12:
            phase = "lift"
            phase_start = f["step"]
        return [0.0, 0.0, 0.0, 1.0]
"""

_LIFT_GRASP_CONFIRM = """\
        if f["aperture"] < 0.035:
            phase = "reach"                # closed on nothing: start over
            phase_start = f["step"]
            latched = False
            settle = 0
            return [0.0, 0.0, 0.0, -1.0]
        if f["aperture"] < 0.046 and f["step"] - phase_start > 8:
            phase = "lift"                 # closure confirmed on the cube
            phase_start = f["step"]
        if f["step"] - phase_start > 60:
            phase = "reach"
            phase_start = f["step"]
            latched = False
            settle = 0
            return [0.0, 0.0, 0.0, -1.0]
        return [0.0, 0.0, 0.0, 1.0]
"""


# --------------------------------------------------------------------------
# pickplace controller builder
# --------------------------------------------------------------------------

def build_pickplace_source(color: str = "silver", mode: str = "largest",
                           offset=(0.0, 0.0, 0.0),
                           grasp_off: float = 0.03,
                           resurvey_on_miss: bool = True) -> str:
    offs = f'[{offset[0]}, {offset[1]}, {offset[2]}]'
    if resurvey_on_miss:
        miss_recovery = """\
            phase = "reach"                # closed past the can: missed it
            phase_start = f["step"]
            latched = False
            settle = 0
            return [0.0, 0.0, 0.0, -1.0]
"""
    else:
        miss_recovery = """\
            phase = "recover"              # missed: retry the same approach
            phase_start = f["step"]
            return [0.0, 0.0, 0.0, -1.0]
"""
    return f"""\
# pick-and-place controller: survey the can, grasp it, carry it to the bin
VISION = {{
    "targets": {{"can": {{"color": "{color}", "mode": "{mode}",
                         "offset": {offs}}}}},
    "depth_bias_z": 0.0,
}}
EMA_ALPHA = 0.4

HOME_Z = 1.05
BIN_X = 0.02
BIN_Y = 0.22
CARRY_Z = 0.97
GAIN = 80.0

phase = "reach"
phase_start = 0
latched = False
settle = 0
sx = 0.0
sy = 0.0
sz = 0.0

def reset():
    global phase, phase_start, latched, settle, sx, sy, sz
    phase = "reach"
    phase_start = 0
    latched = False
    settle = 0
    sx = 0.0
    sy = 0.0
    sz = 0.0

def servo(eef, px, py, pz):
    return [clamp(GAIN * (px - eef[0]), -2, 2),
            clamp(GAIN * (py - eef[1]), -2, 2),
            clamp(GAIN * (pz - eef[2]), -2, 2)]

def get_action(f):
    global phase, phase_start, latched, settle, sx, sy, sz
    eef = f["eef"]
    if phase == "reach":
        if not latched:
            if hypot(eef[0], eef[1]) > 0.02 or abs(eef[2] - HOME_Z) > 0.02:
                d = servo(eef, 0.0, 0.0, HOME_Z)
                return [d[0], d[1], d[2], -1.0]
            if not f["can.detected"]:
                return [0.0, 0.0, 0.0, -1.0]   # hold and wait for a detection
            settle = settle + 1
            if settle < 3:
                return [0.0, 0.0, 0.0, -1.0]
            pos = f["can.pos"]
            sx = pos[0]
            sy = pos[1]
            sz = pos[2]
            latched = True
        d = servo(eef, sx, sy, sz + 0.12)
        if hypot(sx - eef[0], sy - eef[1]) < 0.02 and abs(sz + 0.12 - eef[2]) < 0.02:
            phase = "descend"
            phase_start = f["step"]
        if f["step"] - phase_start > 250:
            phase_start = f["step"]
        return [d[0], d[1], d[2], -1.0]
    if phase == "descend":
        d = servo(eef, sx, sy, sz + {grasp_off})
        d = [d[0], d[1], clamp(d[2], -0.5, 0.5)]
        if eef[2] - (sz + {grasp_off}) < 0.012:
            phase = "grasp"
            phase_start = f["step"]
        if f["step"] - phase_start > 150:
            phase = "reach"
            phase_start = f["step"]
            latched = False
            settle = 0
        return [d[0], d[1], d[2], -1.0]
    if phase == "grasp":
        if f["aperture"] < 0.044:
{miss_recovery}\
        if f["aperture"] < 0.056 and f["step"] - phase_start > 8:
            phase = "carry"
            phase_start = f["step"]
        if f["step"] - phase_start > 60:
            phase = "reach"
            phase_start = f["step"]
            latched = False
            settle = 0
            return [0.0, 0.0, 0.0, -1.0]
        return [0.0, 0.0, 0.0, 1.0]
    if phase == "recover":
        d = servo(eef, sx, sy, sz + 0.12)
        if f["aperture"] > 0.07 and abs(sz + 0.12 - eef[2]) < 0.02:
            phase = "descend"
            phase_start = f["step"]
        return [d[0], d[1], d[2], -1.0]
    if phase == "carry":
        d = servo(eef, BIN_X, BIN_Y, CARRY_Z)
        if hypot(BIN_X - eef[0], BIN_Y - eef[1]) < 0.015 and abs(eef[2] - CARRY_Z) < 0.02:
            phase = "place"
            phase_start = f["step"]
        return [d[0], d[1], d[2], 1.0]
    if phase == "place":
        d = servo(eef, BIN_X, BIN_Y, 0.92)
        d = [d[0], d[1], clamp(d[2], -0.5, 0.5)]
        if eef[2] < 0.925:
            phase = "release"
            phase_start = f["step"]
        return [d[0], d[1], d[2], 1.0]
    if phase == "release":
        if f["step"] - phase_start > 10:
            phase = "retract"
            phase_start = f["step"]
        return [0.0, 0.0, 0.0, -1.0]
    if eef[2] < 1.02:
        return [0.0, 0.0, 1.0, -1.0]       # rise clear of the bin first
    d = servo(eef, 0.0, 0.0, HOME_Z)
    return [d[0], d[1], d[2], -1.0]
"""


# --------------------------------------------------------------------------
# stack controller builder
# --------------------------------------------------------------------------

def build_stack_source(y_flip: bool = True, extrinsic_bug: bool = True,
                       retract_ramp: bool = False, grasp_retry: bool = False,
                       offset_a=(0.0, 0.0, 0.0), offset_b=(0.0, 0.0, 0.0),
                       freeze_b: bool = False, align_tol: float = 0.015) -> str:
    offs_a = f'[{offset_a[0]}, {offset_a[1]}, {offset_a[2]}]'
    offs_b = f'[{offset_b[0]}, {offset_b[1]}, {offset_b[2]}]'
    grasp_exit = """\
        if f["aperture"] < 0.035:
            phase = "reach"                # missed the cube: approach again
            phase_start = f["step"]
            latched = False
            settle = 0
            return [0.0, 0.0, 0.0, -1.0]
""" if grasp_retry else ""
    if freeze_b:
        align_latch = """\
            phase = "place"
            phase_start = f["step"]
            px = pos[0]
            py = pos[1]
            pz = pos[2]
"""
        place_body = """\
        # frozen reference: descend with the lateral axes held
        d = servo(eef, px, py, pz + 0.068)
        d = [clamp(d[0], -0.25, 0.25), clamp(d[1], -0.25, 0.25), clamp(d[2], -0.5, 0.5)]
        if eef[2] - (pz + 0.068) < 0.004:
            phase = "release"
            phase_start = f["step"]
        if f["step"] - phase_start > 120:
            phase = "release"
            phase_start = f["step"]
        return [d[0], d[1], d[2], 1.0]
"""
    else:
        align_latch = """\
            phase = "place"
            phase_start = f["step"]
"""
        z_cap = ("        d = [d[0], d[1], clamp(d[2], -0.5, 0.5)]\n"
                 if retract_ramp else "")
        place_body = """\
        if not f["cubeB.detected"]:
            return [0.0, 0.0, -0.5, 1.0]
        pos = f["cubeB.pos"]
        d = servo(eef, pos[0], pos[1], pos[2] + 0.068)
""" + z_cap + """\
        if eef[2] - (pos[2] + 0.068) < 0.004:
            phase = "release"
            phase_start = f["step"]
        if f["step"] - phase_start > 120:
            phase = "release"
            phase_start = f["step"]
        return [d[0], d[1], d[2], 1.0]
"""
    if retract_ramp:
        retract_body = """\
    if phase == "retract":
        # ramp: rise straight up slowly before heading home
        if eef[2] < 1.00:
            return [0.0, 0.0, 0.5, -1.0]
        phase = "home"
        return [0.0, 0.0, 0.0, -1.0]
    d = servo(eef, 0.0, 0.0, HOME_Z)
    return [d[0], d[1], d[2], -1.0]
"""
    else:
        retract_body = """\
    d = servo(eef, 0.0, 0.0, HOME_Z)
    return [d[0], d[1], d[2], -1.0]
"""
    return f"""\
# stack controller: grasp red cubeA, place it on green cubeB
VISION = {{
    "targets": {{
        "cubeA": {{"color": "red", "mode": "largest", "offset": {offs_a}}},
        "cubeB": {{"color": "green", "mode": "largest", "offset": {offs_b}}},
    }},
    "depth_bias_z": 0.0,
    "backproject_y_flip": {y_flip},
    "extrinsic_cv_correction": {extrinsic_bug},
}}
EMA_ALPHA = 0.4

TABLE_TOP = 0.8
HOME_Z = 1.05
HOVER = 0.15
ALIGN_TOL = {align_tol}
GAIN = 80.0

phase = "reach"
phase_start = 0
latched = False
settle = 0
sx = 0.0
sy = 0.0
sz = 0.0
px = 0.0
py = 0.0
pz = 0.0

def reset():
    global phase, phase_start, latched, settle, sx, sy, sz, px, py, pz
    phase = "reach"
    phase_start = 0
    latched = False
    settle = 0
    sx = 0.0
    sy = 0.0
    sz = 0.0
    px = 0.0
    py = 0.0
    pz = 0.0

def servo(eef, qx, qy, qz):
    return [clamp(GAIN * (qx - eef[0]), -2, 2),
            clamp(GAIN * (qy - eef[1]), -2, 2),
            clamp(GAIN * (qz - eef[2]), -2, 2)]

def get_action(f):
    global phase, phase_start, latched, settle, sx, sy, sz, px, py, pz
    eef = f["eef"]
    if phase == "reach":
        if not latched:
            if hypot(eef[0], eef[1]) > 0.02 or abs(eef[2] - HOME_Z) > 0.02:
                d = servo(eef, 0.0, 0.0, HOME_Z)
                return [d[0], d[1], d[2], -1.0]
            if not f["cubeA.detected"]:
                return [0.0, 0.0, 0.0, -1.0]
            settle = settle + 1
            if settle < 3:
                return [0.0, 0.0, 0.0, -1.0]
            pos = f["cubeA.pos"]
            sx = pos[0]
            sy = pos[1]
            sz = pos[2]
            latched = True
        d = servo(eef, sx, sy, sz + HOVER)
        if hypot(sx - eef[0], sy - eef[1]) < 0.02 and abs(sz + HOVER - eef[2]) < 0.02:
            phase = "descend"
            phase_start = f["step"]
        if f["step"] - phase_start > 200:
            phase_start = f["step"]
        return [d[0], d[1], d[2], -1.0]
    if phase == "descend":
        d = servo(eef, sx, sy, sz + 0.027)
        d = [d[0], d[1], clamp(d[2], -0.5, 0.5)]
        if eef[2] - (sz + 0.027) < 0.012:
            phase = "grasp"
            phase_start = f["step"]
        if f["step"] - phase_start > 120:
            phase = "reach"
            phase_start = f["step"]
            latched = False
            settle = 0
        return [d[0], d[1], d[2], -1.0]
    if phase == "grasp":
{grasp_exit}\
        if f["aperture"] < 0.046 and f["step"] - phase_start > 8:
            phase = "lift"
            phase_start = f["step"]
        if f["step"] - phase_start > 60:
            phase = "reach"
            phase_start = f["step"]
            latched = False
            settle = 0
            return [0.0, 0.0, 0.0, -1.0]
        return [0.0, 0.0, 0.0, 1.0]
    if phase == "lift":
        d = servo(eef, eef[0], eef[1], TABLE_TOP + 0.20)
        if eef[2] > TABLE_TOP + 0.18:
            phase = "align"
            phase_start = f["step"]
        return [d[0], d[1], d[2], 1.0]
    if phase == "align":
        if not f["cubeB.detected"]:
            return [0.0, 0.0, 0.0, 1.0]
        pos = f["cubeB.pos"]
        d = servo(eef, pos[0], pos[1], TABLE_TOP + 0.20)
        if hypot(pos[0] - eef[0], pos[1] - eef[1]) < ALIGN_TOL:
{align_latch}\
        if f["step"] - phase_start > 200:
            phase_start = f["step"]
        return [d[0], d[1], d[2], 1.0]
    if phase == "place":
{place_body}\
    if phase == "release":
        if f["step"] - phase_start > 10:
            phase = "retract"
            phase_start = f["step"]
        return [0.0, 0.0, 0.0, -1.0]
{retract_body}\
"""


def default_controller(task) -> str:
    """Baseline phase-machine source for a task spec (or task id string)."""
    task_id = task if isinstance(task, str) else task.task_id
    if task_id == "lift":
        return build_lift_source()
    if task_id == "pickplace":
        return build_pickplace_source()
    if task_id == "stack":
        return build_stack_source()
    raise ConfigError(f"no default controller for task {task_id!r}")
