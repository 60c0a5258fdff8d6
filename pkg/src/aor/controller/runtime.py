"""Controller hosting: validation pipeline, hot reload, and the step wrapper.

A controller program is a sandboxed script (see ``lang``) that defines
``reset()`` and ``get_action(features)``, optionally a module-level ``phase``
string, an ``EMA_ALPHA`` override, and a declarative ``VISION`` config dict.
Programs are validated in five stages before they can run; any failure keeps
the previously working version active.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np

from .. import world
from ..vision import (FeatureFrame, TargetFeature, VisionConfig,
                      VisionConfigError, default_vision_config,
                      vision_config_from_dict)
from . import lang

STAGES = ("parse", "interface", "instantiate", "dry-run", "output-shape")
DEFAULT_EMA_ALPHA = 0.4
CONSECUTIVE_EXCEPTION_ABORT = 25


@dataclass
class ValidationError:
    stage: str
    message: str

    def __post_init__(self):
        assert self.stage in STAGES


class EpisodeAbort(RuntimeError):
    """Episode must end as a failure (controller kept faulting)."""


@dataclass
class EmaState:
    alpha: float
    prev_action: np.ndarray = field(
        default_factory=lambda: np.zeros(4, dtype=float))

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")


class ControllerInstance:
    """One per episode: a fresh interpreter over the program's AST."""

    def __init__(self, program: "ControllerProgram"):
        self.program = program
        self.interp = lang.Interpreter(program.tree)
        self.interp.run_module()
        self.consecutive_exceptions = 0

    def reset(self) -> None:
        self.interp.call("reset")

    def get_action(self, features: FeatureFrame):
        """Raw script output plus reported phase. Raises lang.ScriptError."""
        raw = self.interp.call("get_action", (features.to_script_dict(),))
        phase = self.interp.globals.get("phase")
        phase = phase if isinstance(phase, str) and phase else "run"
        return raw, phase

    @property
    def phase(self) -> str:
        phase = self.interp.globals.get("phase")
        return phase if isinstance(phase, str) and phase else "run"


@dataclass
class ControllerProgram:
    version: int
    source: str
    tree: object                  # checked AST (opaque compiled handle)
    provenance: str               # initial | mock-rewriter | llm
    ema_alpha: float
    vision_config: VisionConfig

    def instantiate(self) -> ControllerInstance:
        return ControllerInstance(self)


def _coerce_action(raw):
    """Return a float ndarray(4) or None if the output shape is wrong."""
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        return None
    out = np.empty(4, dtype=float)
    for i, x in enumerate(raw):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            return None
        out[i] = float(x)
    if not np.all(np.isfinite(out)):
        return None
    return out


def canned_features(task) -> FeatureFrame:
    """Plausible deterministic feature frame used for validation dry-runs."""
    tz = world.TABLE_TOP_Z
    frame = FeatureFrame(
        step=0,
        eef_pos=(0.0, 0.0, tz + world.HOME_HEIGHT),
        gripper_aperture=world.APERTURE_MAX)
    for i, name in enumerate(task.target_names):
        frame.targets[name] = TargetFeature(
            detected=True,
            position=(0.03 * i - 0.05, 0.05 * i, tz + 0.02),
            pixel_centroid=(128.0, 128.0),
            blob_area=300)
    return frame


def validate(source, task, canned: FeatureFrame | None = None,
             version: int = 0, provenance: str = "initial"):
    """Run the full validation pipeline on arbitrary (possibly hostile) text.

    Returns a ControllerProgram on success or a ValidationError naming the
    failing stage. Never raises for bad sources.
    """
    if isinstance(source, bytes):
        source = source.decode("utf-8", errors="replace")
    if not isinstance(source, str):
        return ValidationError("parse", "source must be text")

    try:
        tree = lang.check_source(source)
    except lang.ForbiddenNode as exc:
        return ValidationError("parse", str(exc))

    defs = {n.name for n in tree.body if isinstance(n, ast.FunctionDef)}
    for required in ("reset", "get_action"):
        if required not in defs:
            return ValidationError("interface", f"missing {required}()")

    interp = lang.Interpreter(tree)
    try:
        interp.run_module()
    except lang.ScriptError as exc:
        return ValidationError("instantiate", str(exc))

    raw_vision = interp.globals.get("VISION")
    try:
        if raw_vision is None:
            vision_config = default_vision_config(task.target_names)
        else:
            vision_config = vision_config_from_dict(raw_vision, task.target_names)
    except VisionConfigError as exc:
        return ValidationError("interface", f"bad VISION config: {exc}")

    alpha = interp.globals.get("EMA_ALPHA", DEFAULT_EMA_ALPHA)
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) \
            or not (0.0 <= float(alpha) <= 1.0):
        return ValidationError("interface", "EMA_ALPHA must be a number in [0, 1]")

    program = ControllerProgram(version=version, source=source, tree=tree,
                                provenance=provenance, ema_alpha=float(alpha),
                                vision_config=vision_config)
    try:
        instance = program.instantiate()
        instance.reset()
        raw = instance.interp.call(
            "get_action", ((canned or canned_features(task)).to_script_dict(),))
    except lang.ScriptError as exc:
        return ValidationError("dry-run", str(exc))

    if _coerce_action(raw) is None:
        return ValidationError(
            "output-shape", "get_action must return 4 finite numbers")
    return program


def controller_step(instance: ControllerInstance, features: FeatureFrame,
                    ema: EmaState):
    """One control step: script -> EMA -> clamp, with the safe-stop policy.

    Script exceptions or budget overruns yield the zero action; after 25
    consecutive faults the episode aborts as a failure.
    """
    try:
        raw, phase = instance.get_action(features)
        vec = _coerce_action(raw)
        if vec is None:
            raise lang.ScriptError("get_action returned a malformed action")
    except lang.ScriptError:
        instance.consecutive_exceptions += 1
        if instance.consecutive_exceptions >= CONSECUTIVE_EXCEPTION_ABORT:
            raise EpisodeAbort(
                f"{CONSECUTIVE_EXCEPTION_ABORT} consecutive controller exceptions")
        ema.prev_action = np.zeros(4, dtype=float)
        return np.zeros(4, dtype=float), instance.phase

    instance.consecutive_exceptions = 0
    smoothed = ema.alpha * vec + (1.0 - ema.alpha) * ema.prev_action
    clamped = np.empty(4, dtype=float)
    clamped[:3] = np.clip(smoothed[:3], -world.DELTA_CLAMP, world.DELTA_CLAMP)
    clamped[3] = float(np.clip(smoothed[3], -world.GRIP_CLAMP, world.GRIP_CLAMP))
    ema.prev_action = clamped.copy()
    return clamped, phase


class ControllerHost:
    """Owns the active program and enforces fallback on failed installs."""

    def __init__(self, task, initial_source: str):
        program = validate(initial_source, task, provenance="initial")
        if isinstance(program, ValidationError):
            raise ValueError(
                f"initial controller failed validation at {program.stage}: "
                f"{program.message}")
        self.task = task
        self.active: ControllerProgram = program

    def install(self, source, provenance: str = "mock-rewriter"):
        """Validate and hot-swap; on failure the active version is unchanged."""
        result = validate(source, self.task, version=self.active.version + 1,
                          provenance=provenance)
        if isinstance(result, ValidationError):
            return result
        self.active = result
        return result
