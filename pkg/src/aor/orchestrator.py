"""The two-timescale loop: episodes at control rate, rewrites between them.

Policy note: the rewriter is consulted only after a *failed* episode.
Successful episodes accumulate toward the convergence window (W consecutive
successes stop the loop), so a working controller is never touched. Episode
seeds are ``base_seed + episode_index``; the evaluation phase runs the final
controller on fresh seeds ``base_seed + 1000 + i``.
"""
from __future__ import annotations

import json
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import memory, render, vision, world
from .camera import camera_config_dict, default_camera
from .controller import api_doc, runtime, templates
from .memory import DiagnosisRecord, EpisodeOutcome, RunStore

EXIT_CONVERGED = 0
EXIT_BUDGET = 2
EXIT_BACKEND = 3
EXIT_CONFIG = 4

EVAL_COUNTS = {"lift": 4, "pickplace": 20, "stack": 20}
HISTORY_DIGEST_EPISODES = 5
MAX_PROMPT_IMAGES = 16
PARSE_FAILURE_ABORT = 3

DIAGNOSTIC_QUESTIONS = (
    "(1) What was the dominant failure mode?",
    "(2) Was the root cause in vision, controller logic, or parameters?",
    "(3) What is the single most impactful change?",
)
BOUNDED_REWRITE_INSTRUCTION = (
    "Make targeted changes addressing the diagnosed failure mode and preserve "
    "the overall structure of the previous controller. Holistic rewrites that "
    "abandon all prior knowledge are discouraged.")
OSCILLATION_DEFINITION = (
    f"oscillation flag: true iff some Cartesian action axis sign-flips more "
    f"than {memory.OSCILLATION_FLIPS} times within any "
    f"{memory.OSCILLATION_WINDOW}-step window of the episode's action trace.")


class BackendFailure(RuntimeError):
    """Simulator or rewriter backend became unusable; run aborts (exit 3)."""


class RewriteParseError(ValueError):
    """Rewriter response had no usable controller block."""


@dataclass
class RunConfig:
    task: str
    sim: str = "builtin"              # "builtin" | "bridge:<command>"
    agent: str = "mock"               # "mock" | "llm"
    iters: int = 20                   # max rewrite calls
    seed: int = 42
    window: int = 3                   # consecutive successes to converge
    eval_episodes: int | None = None  # default depends on the task
    out_dir: str = "runs/run"
    convention: str = "GL_BOTTOM_UP"

    def __post_init__(self):
        if self.task not in ("lift", "pickplace", "stack"):
            raise world.ConfigError(f"unknown task {self.task!r}")
        if self.agent not in ("mock", "llm"):
            raise world.ConfigError(f"unknown agent {self.agent!r}")
        if not (self.sim == "builtin" or self.sim.startswith("bridge:")):
            raise world.ConfigError(f"unknown sim backend {self.sim!r}")
        if self.iters < 1 or self.window < 1:
            raise world.ConfigError("budgets must be >= 1")

    @property
    def eval_count(self) -> int:
        return self.eval_episodes if self.eval_episodes is not None \
            else EVAL_COUNTS[self.task]

    def to_dict(self) -> dict:
        return {"task": self.task, "sim": self.sim, "agent": self.agent,
                "iters": self.iters, "seed": self.seed, "window": self.window,
                "eval_episodes": self.eval_count, "out_dir": str(self.out_dir),
                "convention": self.convention}


# --------------------------------------------------------------------------
# episode backends
# --------------------------------------------------------------------------

@dataclass
class Observation:
    image: object                 # RgbdImage
    eef_pos: tuple
    gripper_aperture: float
    reward: float = 0.0
    done: bool = False
    success: bool = False
    info: dict = field(default_factory=dict)


class BuiltinBackend:
    """In-process simulator + renderer."""

    def __init__(self, task: world.TaskSpec, cam):
        self.task = task
        self.cam = cam
        self.state = None

    def reset(self, seed: int) -> Observation:
        self.state = world.reset(self.task, seed)
        return self._obs(0.0, False, False, {})

    def _obs(self, reward, done, success, info) -> Observation:
        img = render.render(self.state, self.cam)
        return Observation(image=img,
                           eef_pos=tuple(float(x) for x in self.state.eef_pos),
                           gripper_aperture=float(self.state.gripper_aperture),
                           reward=reward, done=done, success=success, info=info)

    def step(self, action_vec) -> Observation:
        action = world.Action.from_vector(action_vec)
        self.state, reward, done, info = world.step(self.task, self.state, action)
        return self._obs(reward, done, info["success"], info)

    def mark_place_entry(self) -> None:
        self.state = world.mark_place_reference(self.state)

    def object_positions(self) -> dict:
        return {o.id: tuple(float(x) for x in o.pose)
                for o in self.state.objects if not o.fixed}

    def close(self) -> None:
        pass


def make_backend(config: RunConfig, task: world.TaskSpec, cam):
    if config.sim == "builtin":
        return BuiltinBackend(task, cam)
    from .bridgeclient import BridgeBackend
    command = config.sim.split(":", 1)[1]
    if not command.strip():
        raise world.ConfigError("empty bridge command")
    return BridgeBackend(shlex.split(command), task, cam)


# --------------------------------------------------------------------------
# fast loop
# --------------------------------------------------------------------------

def run_episode(backend, program, task: world.TaskSpec, seed: int,
                episode_index: int, store: RunStore | None = None) -> EpisodeOutcome:
    """Drive one episode: render -> features -> controller -> sim step."""
    instance = program.instantiate()
    instance.reset()
    ema = runtime.EmaState(alpha=program.ema_alpha)
    obs = backend.reset(seed)

    budget = task.episode_step_budget
    phase_log = []
    frame_candidates = {}
    actions, eef_trace = [], []
    object_traces: dict = {}
    contacts = []
    detections = {t.name: 0 for t in program.vision_config.targets}
    reward_total = 0.0
    aborted = False
    success = False
    place_marked = False
    prev_phase = None
    step = 0

    while step < budget:
        frame = vision.extract_features(
            obs.image, backend.cam,
            (obs.eef_pos, obs.gripper_aperture, step),
            program.vision_config)
        for name, tf in frame.targets.items():
            detections[name] += int(tf.detected)
        try:
            action, phase = runtime.controller_step(instance, frame, ema)
        except runtime.EpisodeAbort:
            aborted = True
            break

        if phase != prev_phase:
            phase_log.append((step, phase))
            frame_candidates[step] = obs.image.rgb
            if "place" in phase.lower() and not place_marked:
                backend.mark_place_entry()
                place_marked = True
            prev_phase = phase
        if step % memory.KEYFRAME_INTERVAL == 0:
            frame_candidates[step] = obs.image.rgb
        last_rgb = obs.image.rgb

        actions.append([float(x) for x in action])
        eef_trace.append(list(obs.eef_pos))
        positions = backend.object_positions()
        if positions is None:      # bridge: fall back to vision estimates
            positions = {t.name: frame.targets[t.name].position
                         for t in program.vision_config.targets
                         if frame.targets[t.name].detected}
        for oid, pos in (positions or {}).items():
            object_traces.setdefault(oid, []).append(list(pos))

        obs = backend.step(action)
        reward_total += obs.reward
        for c in obs.info.get("contacts", []):
            contacts.append({"step": step, **c})
        step += 1
        if obs.done:
            success = obs.success
            break

    frame_candidates[step - 1 if step else 0] = last_rgb if step else obs.image.rgb

    primary = task.primary_object
    if object_traces.get(primary):
        min_dist = memory.min_distance_from_trace(eef_trace, object_traces[primary])
    else:
        min_dist = float("inf")
    outcome = EpisodeOutcome(
        episode_index=episode_index,
        reward_total=round(reward_total, 6),
        steps=step,
        success=bool(success),
        phase_log=phase_log,
        final_phase=phase_log[-1][1] if phase_log else "run",
        min_distance=round(min_dist, 6) if np.isfinite(min_dist) else -1.0,
        oscillation=memory.oscillation_flag(actions),
        keyframe_refs=[],
        controller_version=program.version,
        seed=seed,
        aborted=aborted,
        trace={
            "actions": [[round(v, 6) for v in a] for a in actions],
            "eef": [[round(v, 6) for v in e] for e in eef_trace],
            "objects": {k: [[round(v, 6) for v in p] for p in v_]
                        for k, v_ in object_traces.items()},
            "contacts": contacts,
            "detections": detections,
        },
    )
    if store is not None:
        keyframes = memory.select_keyframes(frame_candidates, phase_log, step)
        store.record_episode(outcome, keyframes)
    return outcome


def place_displacement(outcome: EpisodeOutcome, object_id: str) -> float:
    """Max xy drift of an object after place-phase entry, from the trace."""
    entry = None
    for s, phase in outcome.phase_log:
        if "place" in phase.lower():
            entry = s
            break
    trace = outcome.trace.get("objects", {}).get(object_id)
    if entry is None or not trace or entry >= len(trace):
        return 0.0
    ref = trace[entry]
    worst = 0.0
    for pos in trace[entry:]:
        worst = max(worst, float(np.hypot(pos[0] - ref[0], pos[1] - ref[1])))
    return worst


# --------------------------------------------------------------------------
# prompts and rewrite parsing
# --------------------------------------------------------------------------

@dataclass
class PromptBundle:
    system_preamble: str
    history_digest: str
    images: list                  # [(name, ppm bytes), ...]
    current_source: str
    output_contract: str

    def text(self) -> str:
        return "\n\n".join([
            self.system_preamble,
            "## Episode history (most recent last)",
            self.history_digest,
            "## Current controller source",
            "```controller\n" + self.current_source + "```",
            self.output_contract,
        ])


TASK_TEXT = {
    "lift": "Pick up the red cube: grasp it and raise it at least 4 cm above "
            "the table surface.",
    "pickplace": "Pick up the cola can and place it into the bin plate; the "
                 "can must come to rest inside the bin area.",
    "stack": "Pick up red cubeA and place it stacked on green cubeB within "
             "2 cm, without displacing cubeB by more than 1 cm during "
             "placement.",
}

OUTPUT_CONTRACT = """\
## Required output

Answer the three diagnostic questions, then emit exactly two fenced blocks:

```diagnosis
{"tags": ["..."], "reasoning": "...", "strategy": "...", "confidence": 0.0}
```

```controller
<the complete replacement controller source>
```

The controller block must contain the full program, not a diff."""


def build_prompt(history, store: RunStore, current_source: str, task_id: str) -> PromptBundle:
    """Deterministic prompt assembly from the persisted history."""
    preamble = "\n\n".join([
        "You improve a robot manipulation controller between episodes.",
        "Task: " + TASK_TEXT[task_id],
        "Before writing code, answer:\n" + "\n".join(DIAGNOSTIC_QUESTIONS),
        BOUNDED_REWRITE_INSTRUCTION,
        "Signal definitions: " + OSCILLATION_DEFINITION,
        api_doc.API_DOC,
    ])
    recent = history[-HISTORY_DIGEST_EPISODES:]
    lines = []
    for o in recent:
        lines.append(
            f"episode {o.episode_index}: controller v{o.controller_version}, "
            f"seed {o.seed}, {'SUCCESS' if o.success else 'FAILURE'}, "
            f"steps {o.steps}, final_phase {o.final_phase}, "
            f"min_distance {o.min_distance:.3f}, "
            f"oscillation {str(o.oscillation).lower()}, "
            f"reward_total {o.reward_total:.3f}")
    digest = "\n".join(lines) if lines else "(no episodes yet)"

    images = []
    if history:
        current = history[-1]
        for ref in current.keyframe_refs:
            images.append((ref, (store.root / ref).read_bytes()))
        for prior in history[-3:-1]:
            if prior.keyframe_refs:
                ref = prior.keyframe_refs[-1]
                images.append((ref, (store.root / ref).read_bytes()))
    images = images[:MAX_PROMPT_IMAGES]
    return PromptBundle(system_preamble=preamble, history_digest=digest,
                        images=images, current_source=current_source,
                        output_contract=OUTPUT_CONTRACT)


_FENCE_RE = re.compile(r"```([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.DOTALL)


def parse_rewrite(response: str):
    """Extract (diagnosis dict, controller source) from a rewriter response.

    The controller comes from the ```controller fence (fallback: the last
    fenced block of any tag). A missing or unparseable diagnosis block falls
    back to defaults; a missing controller block is a parse failure.
    """
    blocks = _FENCE_RE.findall(response or "")
    controller = None
    diagnosis_raw = None
    for tag, body in blocks:
        if tag == "controller":
            controller = body
        elif tag == "diagnosis":
            diagnosis_raw = body
    if controller is None and blocks:
        tag, body = blocks[-1]
        if tag != "diagnosis":
            controller = body
    if controller is None:
        raise RewriteParseError("response contains no controller block")

    diagnosis = {"tags": ["unspecified"], "reasoning": "", "strategy": "",
                 "confidence": 0.5}
    if diagnosis_raw is not None:
        try:
            parsed = json.loads(diagnosis_raw)
            if isinstance(parsed, dict):
                for key in diagnosis:
                    if key in parsed:
                        diagnosis[key] = parsed[key]
        except json.JSONDecodeError:
            pass
    if not isinstance(diagnosis["tags"], list) or not diagnosis["tags"]:
        diagnosis["tags"] = ["unspecified"]
    try:
        diagnosis["confidence"] = float(diagnosis["confidence"])
    except (TypeError, ValueError):
        diagnosis["confidence"] = 0.5
    return diagnosis, controller


# --------------------------------------------------------------------------
# slow loop
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    task: str
    rows: list                    # per-iteration dicts, ordered by episode
    rewrite_calls: int
    converged: bool
    exit_code: int
    eval_result: dict | None      # None -> "n/a"

    def to_json(self) -> str:
        payload = {"task": self.task, "rows": self.rows,
                   "rewrite_calls": self.rewrite_calls,
                   "converged": self.converged, "exit_code": self.exit_code,
                   "eval": self.eval_result if self.eval_result else "n/a"}
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def render_table(self) -> str:
        header = f"{'ver':>4} {'episode':>7} {'seed':>6} {'result':>8} {'steps':>6}  key change"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"v{row['version']:>3} {row['episode']:>7} {row['seed']:>6} "
                f"{'success' if row['success'] else 'failure':>8} "
                f"{row['steps']:>6}  {row['key_change']}")
        if self.eval_result:
            ev = self.eval_result
            lines.append(f"eval: {ev['successes']}/{ev['episodes']} "
                         f"({100.0 * ev['success_rate']:.0f}%)")
        else:
            lines.append("eval: n/a")
        lines.append(f"rewrite calls: {self.rewrite_calls}  "
                     f"converged: {self.converged}")
        return "\n".join(lines)


def _rewriter_for(config: RunConfig):
    if config.agent == "mock":
        from .rewriter.mock import mock_rewriter
        return lambda task_id, iteration, history, bundle: \
            mock_rewriter(task_id, iteration, history)
    from .rewriter.llm import llm_rewriter, LlmSettings

    settings = LlmSettings.from_env()

    def call(task_id, iteration, history, bundle):
        return llm_rewriter(bundle, settings)
    return call


def run_loop(config: RunConfig) -> RunReport:
    """Full act-observe-rewrite run: loop until convergence or budget, then
    evaluate the final controller on fresh seeds and write report.json."""
    task = world.task_spec(config.task)
    cam = default_camera(world.TABLE_TOP_Z, convention=config.convention)
    store = RunStore(config.out_dir)
    store.write_config({
        "run": config.to_dict(),
        "camera": camera_config_dict(cam),
        "oscillation_definition": OSCILLATION_DEFINITION,
        "keyframe_cap": memory.KEYFRAME_CAP,
        "history_digest_episodes": HISTORY_DIGEST_EPISODES,
        "episode_seed_rule": "base_seed + episode_index",
        "eval_seed_rule": "base_seed + 1000 + i",
    })
    rewriter = _rewriter_for(config)
    backend = make_backend(config, task, cam)

    host = runtime.ControllerHost(task, templates.default_controller(task))
    store.write_controller(0, host.active.source)

    rows = []
    history = []
    rewrite_calls = 0
    converged = False
    exit_code = EXIT_BUDGET
    key_change = "baseline controller"
    consecutive_parse_failures = 0
    episode_index = 0

    try:
        while True:
            seed = config.seed + episode_index
            outcome = run_episode(backend, host.active, task, seed,
                                  episode_index, store)
            history.append(outcome)
            rows.append({
                "version": host.active.version,
                "episode": episode_index,
                "seed": seed,
                "success": outcome.success,
                "steps": outcome.steps,
                "final_phase": outcome.final_phase,
                "reward_total": outcome.reward_total,
                "key_change": key_change,
            })
            episode_index += 1

            streak = 0
            for o in reversed(history):
                if not o.success:
                    break
                streak += 1
            if streak >= config.window:
                converged = True
                exit_code = EXIT_CONVERGED
                break
            if outcome.success:
                continue            # keep validating; don't touch what works

            if rewrite_calls >= config.iters:
                exit_code = EXIT_BUDGET
                break

            bundle = build_prompt(history, store, host.active.source, config.task)
            response = rewriter(config.task, rewrite_calls + 1, history, bundle)
            rewrite_calls += 1
            try:
                diagnosis, source = parse_rewrite(response)
            except RewriteParseError:
                consecutive_parse_failures += 1
                key_change = "rewrite parse failure (controller retained)"
                if consecutive_parse_failures >= PARSE_FAILURE_ABORT:
                    raise BackendFailure(
                        f"{PARSE_FAILURE_ABORT} consecutive unparseable "
                        f"rewriter responses") from None
                continue
            consecutive_parse_failures = 0

            provenance = "mock-rewriter" if config.agent == "mock" else "llm"
            result = host.install(source, provenance=provenance)
            if isinstance(result, runtime.ValidationError):
                key_change = (f"rewrite rejected at {result.stage} "
                              f"(controller retained)")
                continue
            store.write_controller(result.version, result.source)
            record = DiagnosisRecord(
                tags=list(diagnosis["tags"]), reasoning=str(diagnosis["reasoning"]),
                strategy=str(diagnosis["strategy"]),
                confidence=diagnosis["confidence"],
                produced_version=result.version)
            store.write_diagnosis(record)
            key_change = record.strategy or ", ".join(record.tags)
    except BackendFailure:
        exit_code = EXIT_BACKEND

    eval_result = None
    if exit_code != EXIT_BACKEND:
        eval_result = run_eval(backend, host.active, task, config)
    backend.close()

    report = RunReport(task=config.task, rows=rows, rewrite_calls=rewrite_calls,
                       converged=converged, exit_code=exit_code,
                       eval_result=eval_result)
    (store.root / "report.json").write_text(report.to_json())
    return report


def run_eval(backend, program, task: world.TaskSpec, config: RunConfig,
             seed_offset: int = 1000) -> dict:
    """Run the final controller on fresh seeds; no rewrites, no recording."""
    per_episode = []
    successes = 0
    for i in range(config.eval_count):
        seed = config.seed + seed_offset + i
        outcome = run_episode(backend, program, task, seed,
                              episode_index=i, store=None)
        successes += int(outcome.success)
        entry = {"seed": seed, "success": outcome.success,
                 "steps": outcome.steps, "final_phase": outcome.final_phase,
                 "min_distance": outcome.min_distance}
        if task.task_id == "stack":
            entry["place_displacement_cubeB"] = round(
                place_displacement(outcome, "cubeB"), 6)
        per_episode.append(entry)
    n = config.eval_count
    return {"episodes": n, "successes": successes,
            "success_rate": successes / n if n else 0.0,
            "controller_version": program.version,
            "per_episode": per_episode}


def load_report(run_dir) -> RunReport:
    """Rebuild a RunReport from a run directory's report.json."""
    path = Path(run_dir) / "report.json"
    raw = json.loads(path.read_text())
    eval_result = raw["eval"] if isinstance(raw["eval"], dict) else None
    return RunReport(task=raw["task"], rows=raw["rows"],
                     rewrite_calls=raw["rewrite_calls"],
                     converged=raw["converged"], exit_code=raw["exit_code"],
                     eval_result=eval_result)
