"""Canonical controller scripting API documentation.

This text is embedded verbatim in every rewriter prompt and is also the
source of docs/controller-api.md; a test keeps the two in sync.
"""

API_DOC = """\
# Controller scripting API

A controller is a script in a restricted, deterministic Python subset. It is
compiled and executed in an isolated sandbox: no imports, no attribute
access, no file/network/clock access, no randomness. Each `get_action` call
runs under an instruction budget of 1,000,000 operations.

## Required interface

```
def reset():
    ...                # re-initialize module-level state for a new episode

def get_action(f):
    ...
    return [dx, dy, dz, grip]
```

* `get_action` must return a list of 4 finite numbers.
* `dx, dy, dz` are Cartesian deltas; the runtime smooths them with an EMA
  and clamps to [-2, 2]. One unit of clamped delta moves the end effector
  0.01 m, so the maximum speed is 0.02 m per step.
* `grip` is clamped to [-1, 1]; `grip >= 0` commands closing, `grip < 0`
  commands opening. The aperture moves 0.01 m per step.
* Set the module-level variable `phase` to a short string naming the current
  controller phase; the harness logs phase transitions and captures key
  frames at them. Use a phase name containing "place" for placement descent;
  the harness snapshots object reference poses when that phase is entered.

## Persistent state

Module-level variables persist across steps within an episode. Mutate them
from functions by declaring `global name`. `reset()` is called once before
each episode and must restore all state.

## Feature dictionary

`get_action(f)` receives a flat dict:

* `f["step"]` -- step index within the episode.
* `f["eef"]` -- (x, y, z) end-effector position in meters (proprioception).
* `f["aperture"]` -- gripper opening in meters (0.08 fully open). After a
  successful grasp the aperture stays pinned at the object width; on a
  missed grasp it keeps closing toward 0, which is how a controller can
  detect an empty grip.
* Per configured vision target `<name>`:
  * `f["<name>.detected"]` -- bool.
  * `f["<name>.pos"]` -- (x, y, z) world estimate, or None if undetected.
  * `f["<name>.area"]` -- blob area in pixels.

## VISION config

An optional module-level dict configures the vision pipeline for this
controller version:

```
VISION = {
    "targets": {
        "cube": {"color": "red", "mode": "largest",
                 "offset": [0.0, 0.0, 0.0]},
        # or explicit HSV windows:
        # {"hue": [[0, 10], [350, 360]], "s_min": 0.5, "v_min": 0.25,
        #  "s_max": 1.0, "v_max": 1.0}
    },
    "depth_bias_z": 0.0,             # subtracted from every estimate's z
    "backproject_y_flip": False,     # True reproduces the top-down-row bug
    "extrinsic_cv_correction": False # True applies the wrong axis correction
}
```

* Named colors: "red", "green", "silver".
* `mode`: "largest" localizes the largest connected blob; "mean" averages
  all matching pixels (sensitive to decoy regions).
* `offset` is added to the world estimate of that target (calibration).

## Smoothing

Module-level `EMA_ALPHA` (default 0.4, valid range [0, 1]) sets the runtime
smoothing a_t = alpha * raw_t + (1 - alpha) * a_{t-1} applied before
clamping. The helper `ema(alpha, new, prev)` is also available in-script.

## Builtins

abs, min, max, len, range, round, int, float, bool, clamp(x, lo, hi),
sign(x), sqrt, floor, ceil, hypot, atan2, sin, cos, tanh, pi,
ema(alpha, new, prev), norm2(dx, dy), norm3(dx, dy, dz).

## Safety wrapper (for reference)

Any exception or budget overrun in a step produces the safe-stop action
(0, 0, 0, 0); 25 consecutive faulting steps abort the episode as a failure.
A new controller version only replaces the running one after passing
validation (parse, interface, instantiate, dry-run, output-shape); otherwise
the previous working version stays active.
"""
