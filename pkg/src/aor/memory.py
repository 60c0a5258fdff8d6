"""Persistent episodic memory.

Run directory layout (stable contract):

    run/
      config.json
      index.json                      <- commit point, written atomically
      episodes/NNN/outcome.json
      episodes/NNN/frames/KKK_<phase>.ppm
      controllers/vNNN.ctl
      diagnoses/dNNN.json
      report.json

Every record is written temp-file-then-rename; the index is renamed last, so
a crash between writes leaves an orphan that loads ignore. Outcomes embed
the full action/eef/object traces: the oscillation flag and min_distance are
derived from them and can be re-checked by independent scans.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import imgio

KEYFRAME_CAP = 12
KEYFRAME_INTERVAL = 100
OSCILLATION_FLIPS = 20
OSCILLATION_WINDOW = 50


class StorageError(OSError):
    """Raised when a record cannot be committed; the run must abort."""


@dataclass
class EpisodeOutcome:
    episode_index: int
    reward_total: float
    steps: int
    success: bool
    phase_log: list                  # [(step, phase), ...], step 0 entry first
    final_phase: str
    min_distance: float
    oscillation: bool
    keyframe_refs: list              # run-dir-relative paths
    controller_version: int
    seed: int
    aborted: bool = False
    trace: dict = field(default_factory=dict)
    # trace keys: actions [[4]...], eef [[3]...], objects {id: [[3]...]},
    # contacts [{step, object, displacement, magnitude}...]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @staticmethod
    def from_json(text: str) -> "EpisodeOutcome":
        raw = json.loads(text)
        raw["phase_log"] = [tuple(e) for e in raw["phase_log"]]
        return EpisodeOutcome(**raw)


@dataclass
class DiagnosisRecord:
    tags: list
    reasoning: str
    strategy: str
    confidence: float
    produced_version: int

    def __post_init__(self):
        if not self.tags:
            self.tags = ["unspecified"]
        self.confidence = min(1.0, max(0.0, float(self.confidence)))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @staticmethod
    def from_json(text: str) -> "DiagnosisRecord":
        return DiagnosisRecord(**json.loads(text))


def oscillation_flag(actions) -> bool:
    """True iff some Cartesian axis sign-flips more than OSCILLATION_FLIPS
    times within any OSCILLATION_WINDOW-step window of the action trace.

    A flip is a pair of consecutive steps whose delta signs on that axis are
    strictly opposite (zeros break the pair). This definition is recorded in
    the run config and quoted to the rewriter.
    """
    n = len(actions)
    for axis in range(3):
        flips = []  # step indices where a flip completed
        for t in range(1, n):
            a, b = actions[t - 1][axis], actions[t][axis]
            if (a > 0 and b < 0) or (a < 0 and b > 0):
                flips.append(t)
        if not flips:
            continue
        lo = 0
        for hi in range(len(flips)):
            while flips[hi] - flips[lo] >= OSCILLATION_WINDOW:
                lo += 1
            if hi - lo + 1 > OSCILLATION_FLIPS:
                return True
    return False


def min_distance_from_trace(eef_trace, object_trace) -> float:
    """Brute minimum euclidean eef-to-object distance over a trace pair."""
    best = float("inf")
    for e, o in zip(eef_trace, object_trace):
        d = ((e[0] - o[0]) ** 2 + (e[1] - o[1]) ** 2 + (e[2] - o[2]) ** 2) ** 0.5
        best = min(best, d)
    return best


def select_keyframes(candidates, phase_log, total_steps):
    """Pick the steps whose frames become rewriter evidence.

    candidates: dict step -> frame (the episode loop buffers transition
    steps, every 100th step, and the final step). Keeps one frame per phase
    transition, one per interval, and the final frame, de-duplicated by
    step and capped at KEYFRAME_CAP with transition frames prioritized
    (earliest intervals dropped first, then earliest transitions).
    Returns a list of (step, phase, frame) ordered by step.
    """
    transition_steps = {s for s, _ in phase_log[1:]}          # changes only
    wanted = []
    seen = set()
    final_step = total_steps - 1
    for s in sorted(candidates):
        is_transition = s in transition_steps
        is_interval = s % KEYFRAME_INTERVAL == 0
        is_final = s == final_step
        if not (is_transition or is_interval or is_final):
            continue
        if s in seen:
            continue
        seen.add(s)
        wanted.append((s, is_transition))
    # drop earliest non-transitions first, then earliest transitions
    while len(wanted) > KEYFRAME_CAP:
        for i, (_, is_tr) in enumerate(wanted):
            if not is_tr:
                del wanted[i]
                break
        else:
            del wanted[0]
    phase_at = _PhaseLookup(phase_log)
    return [(s, phase_at(s), candidates[s]) for s, _ in wanted]


class _PhaseLookup:
    def __init__(self, phase_log):
        self.log = sorted(phase_log)

    def __call__(self, step: int) -> str:
        name = self.log[0][1] if self.log else "run"
        for s, phase in self.log:
            if s <= step:
                name = phase
            else:
                break
        return name


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        if isinstance(data, bytes):
            tmp.write_bytes(data)
        else:
            tmp.write_text(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


class RunStore:
    """Single-writer store for one run directory."""

    def __init__(self, run_dir):
        self.root = Path(run_dir)
        (self.root / "episodes").mkdir(parents=True, exist_ok=True)
        (self.root / "controllers").mkdir(exist_ok=True)
        (self.root / "diagnoses").mkdir(exist_ok=True)
        index = self._read_index()
        self.episode_count = index.get("episodes", 0)

    def _read_index(self) -> dict:
        path = self.root / "index.json"
        if not path.exists():
            return {}
        try:
            return json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"unreadable index: {exc}") from exc

    def _commit_index(self) -> None:
        _atomic_write(self.root / "index.json",
                      json.dumps({"episodes": self.episode_count},
                                 sort_keys=True) + "\n")

    def write_config(self, config: dict) -> None:
        _atomic_write(self.root / "config.json",
                      json.dumps(config, sort_keys=True, indent=1) + "\n")

    def read_config(self) -> dict:
        return json.loads((self.root / "config.json").read_text())

    def episode_dir(self, index: int) -> Path:
        return self.root / "episodes" / f"{index:03d}"

    def record_episode(self, outcome: EpisodeOutcome, keyframes) -> str:
        """Persist an outcome plus its (step, phase, rgb) keyframes.

        The index commit happens last; orphaned partial episodes are ignored
        on load.
        """
        if outcome.episode_index != self.episode_count:
            raise StorageError(
                f"episode index {outcome.episode_index} out of order "
                f"(expected {self.episode_count})")
        epdir = self.episode_dir(outcome.episode_index)
        frames_dir = epdir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        refs = []
        for step, phase, rgb in keyframes:
            name = f"{step:03d}_{_safe_phase(phase)}.ppm"
            _atomic_write(frames_dir / name, imgio.ppm_bytes(rgb))
            refs.append(str(Path("episodes") / f"{outcome.episode_index:03d}"
                            / "frames" / name))
        outcome.keyframe_refs = refs
        _atomic_write(epdir / "outcome.json", outcome.to_json())
        self.episode_count += 1
        self._commit_index()
        return str(epdir)

    def write_controller(self, version: int, source: str) -> str:
        path = self.root / "controllers" / f"v{version:03d}.ctl"
        _atomic_write(path, source)
        return str(path)

    def write_diagnosis(self, record: DiagnosisRecord) -> str:
        path = self.root / "diagnoses" / f"d{record.produced_version:03d}.json"
        _atomic_write(path, record.to_json())
        return str(path)


def _safe_phase(phase: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "-" for c in phase)[:24] or "run"


def load_history(run_dir):
    """Ordered (outcomes, diagnoses, controller_versions, warnings).

    Tolerates missing diagnosis files; corrupted outcome records are skipped
    and reported in warnings. Episodes beyond the committed index (orphans
    from interrupted writes) are ignored.
    """
    root = Path(run_dir)
    index_path = root / "index.json"
    if not index_path.exists():
        return [], [], [], []
    try:
        count = json.loads(index_path.read_text()).get("episodes", 0)
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"unreadable index: {exc}") from exc

    outcomes, warnings = [], []
    for i in range(count):
        path = root / "episodes" / f"{i:03d}" / "outcome.json"
        try:
            outcomes.append(EpisodeOutcome.from_json(path.read_text()))
        except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
            warnings.append(f"episode {i}: {exc}")

    diagnoses = []
    diag_dir = root / "diagnoses"
    if diag_dir.is_dir():
        for path in sorted(diag_dir.glob("d*.json")):
            try:
                diagnoses.append(DiagnosisRecord.from_json(path.read_text()))
            except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
                warnings.append(f"{path.name}: {exc}")

    versions = []
    ctl_dir = root / "controllers"
    if ctl_dir.is_dir():
        for path in sorted(ctl_dir.glob("v*.ctl")):
            try:
                versions.append(int(path.stem[1:]))
            except ValueError:
                warnings.append(f"unrecognized controller file {path.name}")

    return outcomes, diagnoses, versions, warnings
