"""Scripted rewriter: canned, well-formed responses replaying a fixed
sequence of controller fixes per task, so the whole loop runs deterministically
with zero network.

Each response carries a ```diagnosis block and a ```controller block with the
full replacement source. Iterations beyond the script repeat the last version
(a stalled search).
"""
from __future__ import annotations

import json

from ..controller.templates import (build_lift_source, build_pickplace_source,
                                    build_stack_source)

# --------------------------------------------------------------------------
# scripted responses
# --------------------------------------------------------------------------

def _response(answers: str, diagnosis: dict, source: str) -> str:
    return (answers + "\n\n```diagnosis\n" + json.dumps(diagnosis) + "\n```\n\n"
            + "```controller\n" + source + "```\n")


def _lift_script():
    return [
        _response(
            "(1) The arm hovered in reach for the whole episode and never "
            "descended; the phase log shows no transitions.\n"
            "(2) Vision: the cube's estimated height sits ~2.5 cm above a "
            "plausible tabletop object center, so the credibility gate never "
            "passes. The depth sample lands on the cube's visible surface, "
            "not its center.\n"
            "(3) Correct the systematic depth bias with a z-offset.",
            {"tags": ["misalignment", "vision_bias"],
             "reasoning": "Stable hover offset from the cube across all key "
                          "frames with zero phase transitions indicates a "
                          "systematic object_pos bias, not a gain problem.",
             "strategy": "Subtract a 2.5 cm depth-bias correction from the "
                         "estimated z so the reach gate and grasp height use "
                         "the cube center.",
             "confidence": 0.72},
            build_lift_source(depth_bias=0.025)),
        _response(
            "(1) The gripper reached the cube but the cube ended up displaced "
            "on the table instead of grasped.\n"
            "(2) Controller logic: the grasp phase keeps servoing downward "
            "while the fingers close, destabilizing the cube.\n"
            "(3) Hold the end effector stationary during closure; also guard "
            "against oversized, unreliable detections.",
            {"tags": ["grasp_slip", "pressing_grasp"],
             "reasoning": "Key frames show the fingers flanking the cube and "
                          "then the cube resting away from the gripper; "
                          "downward pressing during closure is the cause.",
             "strategy": "Stationary grasp: zero Cartesian delta while "
                         "closing; add an initial blob-area ceiling as a "
                         "detection sanity filter.",
             "confidence": 0.80},
            build_lift_source(depth_bias=0.025, stationary=True,
                              area_ceiling=230)),
        _response(
            "(1) The arm never moved: the detection-quality ceiling rejected "
            "the cube's blob for this scene and the controller waited "
            "forever.\n"
            "(2) Parameters: blob area scales with proximity to the camera, "
            "so a fixed ceiling misfires for near-camera configurations.\n"
            "(3) Remove the area ceiling and confirm the grasp through the "
            "aperture reading instead.",
            {"tags": ["detection_filter_misfire", "overcautious_gate"],
             "reasoning": "The episode stalled in reach with a valid, stable "
                          "detection present; the area ceiling introduced in "
                          "the previous rewrite rejected it.",
             "strategy": "Drop the blob-area ceiling; verify closure via the "
                         "aperture (pinned at the cube width on success) and "
                         "retry on an empty grip.",
             "confidence": 0.66},
            build_lift_source(depth_bias=0.025, stationary=True,
                              closure_confirm=True, align_tol=0.03)),
    ]


def _pickplace_script():
    return [
        _response(
            "(1) Total detection failure: the arm stalled in reach for all "
            "1000 steps with no detections.\n"
            "(2) Vision: the low-saturation silver mask finds nothing because "
            "the can renders as red in this camera.\n"
            "(3) Switch the target to a red-hue segmentor.",
            {"tags": ["detection_failure", "wrong_color_spec"],
             "reasoning": "Zero detections for the whole episode; the can is "
                          "red in the agent camera, not metallic silver.",
             "strategy": "Rewrite the vision target to a red ColorSpec and "
                         "average the red pixels for the centroid.",
             "confidence": 0.78},
            build_pickplace_source(color="red", mode="mean",
                                   resurvey_on_miss=False)),
        _response(
            "(1) The arm descended toward the bin side of the scene instead "
            "of the can.\n"
            "(2) Vision: averaging all red pixels lets the bin's red marker "
            "drag the centroid away from the can.\n"
            "(3) Select the largest connected red component and calibrate "
            "the lateral surface bias.",
            {"tags": ["centroid_contamination", "decoy_marker"],
             "reasoning": "The red mask contains the can and the bin's small "
                          "red indicator; the mean centroid lands between "
                          "them, biased toward the bin.",
             "strategy": "Largest-connected-component filtering isolates the "
                         "can; add a calibrated offset for the cylinder's "
                         "visible-surface bias and grasp near the rim.",
             "confidence": 0.82},
            build_pickplace_source(color="red", mode="largest",
                                   offset=(0.024, -0.004, 0.0),
                                   grasp_off=0.028)),
    ]


def _stack_script():
    return [
        _response(
            "(1) The arm pinned itself at the workspace boundary chasing an "
            "impossible cube estimate.\n"
            "(2) Vision: the back-projection negates y for a bottom-up "
            "image; the estimate is reflected about the image center.\n"
            "(3) Remove the y sign flip from the back-projection.",
            {"tags": ["vision_pipeline_error", "back_projection_bug"],
             "reasoning": "Estimated positions are far outside the table for "
                          "every frame; a sign error in back-projection, not "
                          "controller logic, produces errors of this size.",
             "strategy": "Use +y_p for the bottom-up convention in the "
                         "back-projection.",
             "confidence": 0.85},
            build_stack_source(y_flip=False, extrinsic_bug=True)),
        _response(
            "(1) Estimates are still far off the table after the y fix.\n"
            "(2) Vision: the extrinsic transform applies an axis correction "
            "meant for top-down images; the camera-to-world transform must "
            "be used directly.\n"
            "(3) Drop the extrinsic axis correction.",
            {"tags": ["vision_pipeline_error", "extrinsic_convention"],
             "reasoning": "Residual error is a reflection consistent with a "
                          "diag(1,-1,-1) factor applied to camera points.",
             "strategy": "Compute world points with the camera pose alone, "
                         "no axis correction.",
             "confidence": 0.83},
            build_stack_source(y_flip=False, extrinsic_bug=False)),
        _response(
            "(1) Placement now engages but the stack does not survive the "
            "retreat: the fingers clip cubeA while leaving.\n"
            "(2) Controller logic: retract moves laterally while the "
            "fingers are still at stack height.\n"
            "(3) Add a retract ramp: rise vertically before heading home.",
            {"tags": ["retract_knock", "release_path"],
             "reasoning": "Final frames show cubeA displaced right after "
                          "release while the gripper sweeps sideways.",
             "strategy": "Retract straight up slowly after release, then "
                         "return home.",
             "confidence": 0.61},
            build_stack_source(y_flip=False, extrinsic_bug=False,
                               retract_ramp=True)),
        _response(
            "(1) Some grasps close on air and the episode burns its budget "
            "lifting nothing.\n"
            "(2) Controller logic: a missed grasp is detectable from the "
            "aperture, which keeps closing past the cube width.\n"
            "(3) Reopen and re-approach when the grip comes up empty.",
            {"tags": ["grasp_miss", "retry"],
             "reasoning": "Aperture trace drops toward zero after closure in "
                          "failed episodes; the cube was never between the "
                          "fingers.",
             "strategy": "Add a grasp retry triggered by the aperture "
                         "reading.",
             "confidence": 0.65},
            build_stack_source(y_flip=False, extrinsic_bug=False,
                               retract_ramp=True, grasp_retry=True)),
        _response(
            "(1) Placement lands a consistent ~2 cm from cubeB's center and "
            "nudges it during the descent.\n"
            "(2) Parameters: both cube estimates carry a repeatable "
            "visible-surface bias toward the camera.\n"
            "(3) Calibrate a constant offset per cube.",
            {"tags": ["placement_bias", "vision_calibration"],
             "reasoning": "The miss direction and magnitude are constant "
                          "across episodes; this is calibration, not noise.",
             "strategy": "Apply separate calibrated offsets for cubeA and "
                         "cubeB estimates.",
             "confidence": 0.74},
            build_stack_source(y_flip=False, extrinsic_bug=False,
                               retract_ramp=True, grasp_retry=True,
                               offset_a=(0.018, -0.003, -0.019),
                               offset_b=(0.019, 0.002, -0.017))),
        _response(
            "(1) During the place descent the gripper chases the live cubeB "
            "estimate; every finger contact moves cubeB, the estimate "
            "follows it, and the stack walks apart.\n"
            "(2) Controller logic: tracking a target the gripper itself is "
            "displacing is a feedback loop.\n"
            "(3) Freeze the cubeB reference at place entry and descend "
            "vertically.",
            {"tags": ["cubeB_contact", "target_chasing"],
             "reasoning": "Object traces show cubeB drifting steadily during "
                          "place while the eef follows it; freezing the "
                          "reference breaks the loop.",
             "strategy": "Latch the cubeB target when entering place, align "
                         "tighter before descending, and hold the lateral "
                         "axes on the way down.",
             "confidence": 0.77},
            build_stack_source(y_flip=False, extrinsic_bug=False,
                               retract_ramp=True, grasp_retry=True,
                               offset_a=(0.018, -0.003, -0.019),
                               offset_b=(0.019, 0.002, -0.017),
                               freeze_b=True, align_tol=0.008)),
    ]


_SCRIPTS = {"lift": _lift_script, "pickplace": _pickplace_script,
            "stack": _stack_script}


def mock_rewriter(task: str, iteration: int, history=None) -> str:
    """Canned response for rewrite call number ``iteration`` (1-based).

    Iterations beyond the script repeat the last version, modeling a search
    that has stalled. ``history`` only shades the wording, never the fix
    sequence, so runs stay deterministic.
    """
    script = _SCRIPTS[task]()
    index = min(max(iteration, 1), len(script)) - 1
    return script[index]
