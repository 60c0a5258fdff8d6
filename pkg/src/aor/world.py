"""Deterministic kinematic tabletop simulator.

World states are values: ``step`` returns a fresh state and never mutates its
input, so independent instances can run in parallel. All motion is kinematic
(no dynamics): the gripper is a point with two finger slabs, released objects
snap to rest on their highest support, and contact is resolved as a lateral
push equal to the finger/object overlap.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

TABLE_TOP_Z = 0.80
WORKSPACE_XY = 0.40          # half-extent of the reachable box around table center
WORKSPACE_Z = 0.50           # reachable height above the table top
HOME_HEIGHT = 0.25

DELTA_SCALE = 0.01           # meters of eef motion per unit of action delta
DELTA_CLAMP = 2.0
GRIP_CLAMP = 1.0
APERTURE_MAX = 0.08
APERTURE_RATE = 0.01         # m/step of finger travel

GRASP_XY_PAD = 0.005
GRASP_Z_BELOW_TOP = 0.005    # eef may be up to 5 mm below the object top
GRASP_Z_ABOVE_TOP = 0.015    # ... and up to 15 mm above it
PRESS_LIMIT = 0.001          # max downward eef motion per step during closure
DESTAB_DISPLACEMENT = 0.02   # lateral shove applied on a pressing grasp

FINGER_LENGTH = 0.05
FINGER_WIDTH = 0.01
FINGER_DEPTH_HALF = 0.012

SETTLE_GRACE = 0.01          # max penetration under which an object still
                             # counts as resting on a support


class StepError(ValueError):
    """Raised for malformed actions (non-finite components)."""


class ConfigError(ValueError):
    """Raised for unknown task ids or malformed task specs."""


@dataclass
class ObjectState:
    id: str
    shape: str                    # "box" | "cylinder"
    half_extents: tuple           # (hx, hy, hz); radius/radius/half-height for cylinders
    pose: np.ndarray              # center, world meters
    color_class: str
    fixed: bool = False           # fixtures (bin plate, marker) never move

    def copy(self) -> "ObjectState":
        return ObjectState(self.id, self.shape, tuple(self.half_extents),
                           np.array(self.pose, dtype=float), self.color_class,
                           self.fixed)

    @property
    def top(self) -> float:
        return float(self.pose[2] + self.half_extents[2])

    @property
    def bottom(self) -> float:
        return float(self.pose[2] - self.half_extents[2])

    def aabb(self):
        p = self.pose
        h = np.asarray(self.half_extents, dtype=float)
        return p - h, p + h


@dataclass
class Action:
    delta: np.ndarray
    grip: float

    @staticmethod
    def from_vector(vec) -> "Action":
        v = np.asarray(vec, dtype=float)
        if v.shape != (4,):
            raise StepError("action must have 4 components")
        return Action(delta=v[:3], grip=float(v[3]))

    def clamped(self) -> "Action":
        return Action(delta=np.clip(self.delta, -DELTA_CLAMP, DELTA_CLAMP),
                      grip=float(np.clip(self.grip, -GRIP_CLAMP, GRIP_CLAMP)))


@dataclass
class WorldState:
    step: int
    eef_pos: np.ndarray
    gripper_aperture: float
    gripper_closing: bool
    objects: list
    attached_object: str | None
    table_top_z: float
    attach_offset: np.ndarray | None = None
    spawn_poses: dict = field(default_factory=dict)
    place_ref: dict | None = None
    goal_norm: float = 1.0

    def copy(self) -> "WorldState":
        return WorldState(
            step=self.step,
            eef_pos=np.array(self.eef_pos, dtype=float),
            gripper_aperture=self.gripper_aperture,
            gripper_closing=self.gripper_closing,
            objects=[o.copy() for o in self.objects],
            attached_object=self.attached_object,
            table_top_z=self.table_top_z,
            attach_offset=None if self.attach_offset is None
            else np.array(self.attach_offset, dtype=float),
            spawn_poses={k: np.array(v, dtype=float)
                         for k, v in self.spawn_poses.items()},
            place_ref=None if self.place_ref is None
            else {k: np.array(v, dtype=float) for k, v in self.place_ref.items()},
            goal_norm=self.goal_norm,
        )

    def obj(self, oid: str) -> ObjectState:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    episode_step_budget: int
    placement_tolerance: float
    randomization_ranges: dict        # obj id -> ((x_lo, x_hi), (y_lo, y_hi))
    primary_object: str
    target_names: tuple               # vision targets, in feature-frame order
    reach_weight: float = 0.25
    attach_weight: float = 0.25
    progress_weight: float = 0.5

    def __post_init__(self):
        if self.episode_step_budget < 1:
            raise ConfigError("step budget must be >= 1")
        if self.placement_tolerance <= 0:
            raise ConfigError("placement tolerance must be > 0")


BIN_CENTER = (0.02, 0.22)
BIN_HALF = 0.10
BIN_PLATE_HALF_Z = 0.005
DECOY_POS = (0.09, 0.30)

_TASKS = {
    "lift": TaskSpec(
        task_id="lift", episode_step_budget=500, placement_tolerance=0.02,
        randomization_ranges={"cube": ((-0.10, 0.10), (-0.12, 0.12))},
        primary_object="cube", target_names=("cube",)),
    "pickplace": TaskSpec(
        task_id="pickplace", episode_step_budget=1000, placement_tolerance=0.02,
        randomization_ranges={"can": ((-0.12, -0.02), (-0.18, -0.08))},
        primary_object="can", target_names=("can",)),
    "stack": TaskSpec(
        task_id="stack", episode_step_budget=700, placement_tolerance=0.02,
        randomization_ranges={"cubeA": ((-0.11, 0.01), (-0.15, -0.05)),
                              "cubeB": ((-0.03, 0.09), (0.03, 0.13))},
        primary_object="cubeA", target_names=("cubeA", "cubeB")),
}


def task_spec(task_id: str) -> TaskSpec:
    try:
        return _TASKS[task_id]
    except KeyError:
        raise ConfigError(f"unknown task id {task_id!r}") from None


def _unit_hash(seed: int, *parts: str) -> float:
    """Counter-based uniform in [0, 1): stable across platforms and runs."""
    key = "|".join([str(int(seed)), *parts, "aor-v1"]).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def _sample_xy(seed: int, task_id: str, obj_id: str, ranges) -> tuple:
    (x_lo, x_hi), (y_lo, y_hi) = ranges
    x = x_lo + _unit_hash(seed, task_id, obj_id, "x") * (x_hi - x_lo)
    y = y_lo + _unit_hash(seed, task_id, obj_id, "y") * (y_hi - y_lo)
    return x, y


def reset(task: TaskSpec, seed: int) -> WorldState:
    """Fresh episode state. Identical seeds give bit-identical states."""
    tz = TABLE_TOP_Z
    objects: list[ObjectState] = []
    if task.task_id == "lift":
        x, y = _sample_xy(seed, task.task_id, "cube",
                          task.randomization_ranges["cube"])
        objects.append(ObjectState("cube", "box", (0.02, 0.02, 0.02),
                                   np.array([x, y, tz + 0.02]), "red"))
    elif task.task_id == "pickplace":
        x, y = _sample_xy(seed, task.task_id, "can",
                          task.randomization_ranges["can"])
        objects.append(ObjectState("can", "cylinder", (0.025, 0.025, 0.05),
                                   np.array([x, y, tz + 0.05]), "red"))
        plate_top = tz + 2 * BIN_PLATE_HALF_Z
        objects.append(ObjectState("bin", "box",
                                   (BIN_HALF, BIN_HALF, BIN_PLATE_HALF_Z),
                                   np.array([BIN_CENTER[0], BIN_CENTER[1],
                                             tz + BIN_PLATE_HALF_Z]),
                                   "neutral", fixed=True))
        objects.append(ObjectState("marker", "box", (0.0125, 0.0125, 0.001),
                                   np.array([DECOY_POS[0], DECOY_POS[1],
                                             plate_top + 0.001]),
                                   "decoy-red-marker", fixed=True))
    elif task.task_id == "stack":
        for oid, color in (("cubeA", "red"), ("cubeB", "green")):
            x, y = _sample_xy(seed, task.task_id, oid,
                              task.randomization_ranges[oid])
            objects.append(ObjectState(oid, "box", (0.02, 0.02, 0.02),
                                       np.array([x, y, tz + 0.02]), color))
    else:
        raise ConfigError(f"unknown task id {task.task_id!r}")

    state = WorldState(
        step=0,
        eef_pos=np.array([0.0, 0.0, tz + HOME_HEIGHT]),
        gripper_aperture=APERTURE_MAX,
        gripper_closing=False,
        objects=objects,
        attached_object=None,
        table_top_z=tz,
        spawn_poses={o.id: np.array(o.pose) for o in objects},
    )
    state.goal_norm = _initial_goal_distance(task, state)
    return state


def _initial_goal_distance(task: TaskSpec, state: WorldState) -> float:
    if task.task_id == "pickplace":
        can = state.obj("can")
        return max(1e-6, float(np.hypot(can.pose[0] - BIN_CENTER[0],
                                        can.pose[1] - BIN_CENTER[1])))
    if task.task_id == "stack":
        a, b = state.obj("cubeA"), state.obj("cubeB")
        goal = np.array([b.pose[0], b.pose[1], b.top + a.half_extents[2]])
        return max(1e-6, float(np.linalg.norm(a.pose - goal)))
    return 1.0


def finger_boxes(eef_pos, aperture: float):
    """AABBs of the two 1 cm finger slabs flanking the aperture (along x)."""
    ex, ey, ez = float(eef_pos[0]), float(eef_pos[1]), float(eef_pos[2])
    half_gap = aperture / 2.0
    boxes = []
    for side in (-1.0, 1.0):
        inner = side * half_gap
        outer = side * (half_gap + FINGER_WIDTH)
        lo_x, hi_x = min(inner, outer), max(inner, outer)
        boxes.append((
            np.array([ex + lo_x, ey - FINGER_DEPTH_HALF, ez - FINGER_LENGTH]),
            np.array([ex + hi_x, ey + FINGER_DEPTH_HALF, ez]),
        ))
    return boxes


def grip_width(obj: ObjectState) -> float:
    """Object extent along the finger axis (x)."""
    return 2.0 * float(obj.half_extents[0])


def _in_grasp_band(eef_pos, obj: ObjectState) -> bool:
    dx = float(eef_pos[0] - obj.pose[0])
    dy = float(eef_pos[1] - obj.pose[1])
    he_xy = max(obj.half_extents[0], obj.half_extents[1])
    if math.hypot(dx, dy) > he_xy + GRASP_XY_PAD:
        return False
    return (obj.top - GRASP_Z_BELOW_TOP) <= float(eef_pos[2]) <= (obj.top + GRASP_Z_ABOVE_TOP)


def _footprints_overlap(a: ObjectState, b: ObjectState) -> bool:
    ax, ay = float(a.pose[0]), float(a.pose[1])
    bx, by = float(b.pose[0]), float(b.pose[1])
    return (abs(ax - bx) < a.half_extents[0] + b.half_extents[0]
            and abs(ay - by) < a.half_extents[1] + b.half_extents[1])


def _settle(state: WorldState) -> None:
    """Snap every movable, non-attached object onto its highest support."""
    movable = [o for o in state.objects
               if not o.fixed and o.id != state.attached_object]
    movable.sort(key=lambda o: o.bottom)
    for obj in movable:
        support = state.table_top_z
        for other in state.objects:
            if other.id == obj.id or other.id == state.attached_object:
                continue
            if not _footprints_overlap(obj, other):
                continue
            if other.top <= obj.bottom + SETTLE_GRACE and other.top > support:
                support = other.top
        obj.pose[2] = support + obj.half_extents[2]


def _push_out_of_fingers(state: WorldState, info: dict) -> None:
    """Translate non-attached objects out of any finger slab they overlap.

    Resolution is lateral only (least-penetration xy axis, pushing away from
    the finger center); the per-object displacement therefore never exceeds
    the overlap magnitude.
    """
    fingers = finger_boxes(state.eef_pos, state.gripper_aperture)
    for obj in state.objects:
        if obj.fixed or obj.id == state.attached_object:
            continue
        total = np.zeros(2)
        for lo, hi in fingers:
            olo, ohi = obj.aabb()
            pen = np.minimum(hi, ohi) - np.maximum(lo, olo)
            if np.any(pen <= 0):
                continue
            center = (lo + hi) / 2.0
            axis = 0 if pen[0] <= pen[1] else 1
            direction = 1.0 if obj.pose[axis] >= center[axis] else -1.0
            obj.pose[axis] += direction * pen[axis]
            total[axis] += direction * pen[axis]
        mag = float(np.linalg.norm(total))
        if mag > 0:
            info["contacts"].append({"object": obj.id,
                                     "displacement": [float(total[0]),
                                                      float(total[1])],
                                     "magnitude": mag})


def step(task: TaskSpec, state: WorldState, action: Action):
    """One kinematic transition. Returns (state', reward, done, info)."""
    if not (np.all(np.isfinite(action.delta)) and math.isfinite(action.grip)):
        raise StepError("non-finite action components")

    s = state.copy()
    act = action.clamped()
    info = {"contacts": [], "attached": None, "destabilized": None,
            "released": None}

    old_z = float(s.eef_pos[2])
    s.eef_pos = s.eef_pos + act.delta * DELTA_SCALE
    tz = s.table_top_z
    s.eef_pos[0] = float(np.clip(s.eef_pos[0], -WORKSPACE_XY, WORKSPACE_XY))
    s.eef_pos[1] = float(np.clip(s.eef_pos[1], -WORKSPACE_XY, WORKSPACE_XY))
    s.eef_pos[2] = float(np.clip(s.eef_pos[2], tz, tz + WORKSPACE_Z))
    descend = old_z - float(s.eef_pos[2])   # positive when moving down

    closing = act.grip >= 0.0
    s.gripper_closing = closing
    if closing:
        if s.attached_object is not None:
            held = s.obj(s.attached_object)
            s.gripper_aperture = max(grip_width(held),
                                     s.gripper_aperture - APERTURE_RATE)
        else:
            old_ap = s.gripper_aperture
            new_ap = max(0.0, old_ap - APERTURE_RATE)
            candidates = [o for o in s.objects
                          if not o.fixed and _in_grasp_band(s.eef_pos, o)]
            candidates.sort(key=lambda o: float(
                np.linalg.norm(o.pose[:2] - s.eef_pos[:2])))
            grabbed = False
            for obj in candidates:
                w = grip_width(obj)
                if old_ap > w + 0.001 >= new_ap:
                    if descend > PRESS_LIMIT:
                        # Pressing during closure destabilizes the object.
                        away = obj.pose[:2] - s.eef_pos[:2]
                        n = float(np.linalg.norm(away))
                        unit = away / n if n > 1e-9 else np.array([1.0, 0.0])
                        obj.pose[:2] = obj.pose[:2] + DESTAB_DISPLACEMENT * unit
                        info["destabilized"] = obj.id
                    else:
                        s.attached_object = obj.id
                        s.attach_offset = obj.pose - s.eef_pos
                        new_ap = w
                        info["attached"] = obj.id
                        grabbed = True
                    break
            s.gripper_aperture = new_ap if not grabbed else new_ap
    else:
        s.gripper_aperture = min(APERTURE_MAX, s.gripper_aperture + APERTURE_RATE)
        if s.attached_object is not None:
            info["released"] = s.attached_object
            s.attached_object = None
            s.attach_offset = None

    if s.attached_object is not None:
        held = s.obj(s.attached_object)
        held.pose = s.eef_pos + s.attach_offset

    _push_out_of_fingers(s, info)
    _settle(s)

    s.step = state.step + 1
    success = check_success(task, s)
    reward = 1.0 if success else shaped_reward(task, s)
    done = success or s.step >= task.episode_step_budget
    info["success"] = success
    return s, reward, done, info


def mark_place_reference(state: WorldState) -> WorldState:
    """Snapshot current object poses as the place-phase reference.

    Called by the orchestrator when the controller first reports a placement
    phase; the stack success predicate measures cubeB displacement from it.
    """
    s = state.copy()
    s.place_ref = {o.id: np.array(o.pose) for o in s.objects}
    return s


def check_success(task: TaskSpec, state: WorldState) -> bool:
    if task.task_id == "lift":
        cube = state.obj("cube")
        return (state.attached_object == "cube"
                and cube.pose[2] >= state.table_top_z + 0.04)
    if task.task_id == "pickplace":
        can = state.obj("can")
        plate = state.obj("bin")
        if state.attached_object == "can":
            return False
        inside = (abs(can.pose[0] - plate.pose[0]) <= BIN_HALF
                  and abs(can.pose[1] - plate.pose[1]) <= BIN_HALF)
        resting = abs(can.bottom - plate.top) <= 1e-6
        return inside and resting
    if task.task_id == "stack":
        a, b = state.obj("cubeA"), state.obj("cubeB")
        if state.attached_object == "cubeA":
            return False
        if float(np.linalg.norm(a.pose[:2] - b.pose[:2])) > task.placement_tolerance:
            return False
        if not (_footprints_overlap(a, b) and abs(a.bottom - b.top) <= 0.005):
            return False
        ref = (state.place_ref or state.spawn_poses).get("cubeB")
        moved = float(np.linalg.norm(b.pose[:2] - np.asarray(ref)[:2]))
        return moved < 0.01
    raise ConfigError(f"unknown task id {task.task_id!r}")


def shaped_reward(task: TaskSpec, state: WorldState) -> float:
    """Bounded shaping signal in [0, 1]; exactly 1.0 on task success."""
    if check_success(task, state):
        return 1.0
    primary = state.obj(task.primary_object)
    d_reach = float(np.linalg.norm(state.eef_pos - primary.pose))
    r = task.reach_weight * (1.0 - math.tanh(10.0 * d_reach))
    if state.attached_object == task.primary_object:
        r += task.attach_weight
    if task.task_id == "lift":
        rest = state.table_top_z + primary.half_extents[2]
        progress = min(1.0, max(0.0, (primary.pose[2] - rest) / 0.04))
    elif task.task_id == "pickplace":
        d = float(np.hypot(primary.pose[0] - BIN_CENTER[0],
                           primary.pose[1] - BIN_CENTER[1]))
        progress = min(1.0, max(0.0, 1.0 - d / state.goal_norm))
    else:
        b = state.obj("cubeB")
        goal = np.array([b.pose[0], b.pose[1], b.top + primary.half_extents[2]])
        d = float(np.linalg.norm(primary.pose - goal))
        progress = min(1.0, max(0.0, 1.0 - d / state.goal_norm))
    return r + task.progress_weight * progress
