"""Procedural two-person interactions with grammar captions, and a keyword-driven single-person source.

The motions are built from joint-angle curves pushed through forward
kinematics on the default 22-joint skeleton, so every channel of the flat
layout is consistent.  Caption wording tracks the motion parameters
(interaction kind, speed, side, direction, duration) so that retrieval and
length estimation have signal to learn from.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadArgument
from .motion import (DEFAULT_FPS, InteractionSample, MotionSequence, Provenance, Skeleton, axis_angle_to_matrix,
                     default_skeleton, detect_foot_contacts, forward_kinematics, matrix_to_rot6d, yaw_matrix)

L_HIP, R_HIP, SPINE1, L_KNEE, R_KNEE = 1, 2, 3, 4, 5
L_SH, R_SH, L_ELB, R_ELB = 16, 17, 18, 19
PELVIS_HEIGHT = 0.93
KINDS = ("approach", "circle", "mirror", "push")


def _rot(axis: str, angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    aa = np.zeros(angle.shape + (3,))
    aa[..., "xyz".index(axis)] = angle
    return axis_angle_to_matrix(aa)


class Pose:
    """Accumulates per-joint local rotations over ``frames``."""

    def __init__(self, frames: int, skeleton: Skeleton):
        self.frames = frames
        self.skeleton = skeleton
        self.local = np.tile(np.eye(3), (frames, skeleton.joint_count - 1, 1, 1))

    def rotate(self, joint: int, axis: str, angle):
        angle = np.broadcast_to(np.asarray(angle, dtype=np.float64), (self.frames,))
        # applied in the parent frame, after any earlier rotation of this joint
        self.local[:, joint - 1] = _rot(axis, angle) @ self.local[:, joint - 1]

    def arms_down(self, amount=1.3):
        self.rotate(L_SH, "z", -amount)
        self.rotate(R_SH, "z", amount)

    def build(self, root_xz: np.ndarray, yaw: np.ndarray, height=None, fps: int = DEFAULT_FPS) -> MotionSequence:
        t = self.frames
        height = np.full(t, PELVIS_HEIGHT) if height is None else np.asarray(height)
        root = np.stack([root_xz[:, 0], height, root_xz[:, 1]], axis=-1)
        rot6 = matrix_to_rot6d(self.local)
        root6 = matrix_to_rot6d(yaw_matrix(yaw))
        positions = forward_kinematics(self.skeleton, root, rot6, root6)
        contacts = detect_foot_contacts(positions, self.skeleton)
        return MotionSequence.from_positions(positions, rot6, contacts, fps)


def _ease(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _walk(pose: Pose, phase, amp):
    """Leg and arm swing for a gait with the given phase curve and amplitude (scalar or per frame)."""
    s = np.sin(phase)
    pose.rotate(L_HIP, "x", -amp * s)
    pose.rotate(R_HIP, "x", amp * s)
    pose.rotate(L_KNEE, "x", amp * 1.2 * np.maximum(0, np.sin(phase + 1.2)))
    pose.rotate(R_KNEE, "x", amp * 1.2 * np.maximum(0, -np.sin(phase + 1.2)))
    return s


def _arm_forward(pose: Pose, side: str, amount):
    """Swing the arm(s) from hanging towards pointing forward (amount in [0, 1])."""
    amount = np.asarray(amount, dtype=np.float64)
    if side in ("left", "both"):
        pose.rotate(L_SH, "x", -1.4 * amount)
        pose.rotate(L_ELB, "y", -0.3 * amount)
    if side in ("right", "both"):
        pose.rotate(R_SH, "x", -1.4 * amount)
        pose.rotate(R_ELB, "y", 0.3 * amount)


def _arm_raise(pose: Pose, side: str, amount):
    amount = np.asarray(amount, dtype=np.float64)
    if side in ("left", "both"):
        pose.rotate(L_SH, "z", 2.4 * amount)
    if side in ("right", "both"):
        pose.rotate(R_SH, "z", -2.4 * amount)


def _line(start, end, u):
    return start[None] + (end - start)[None] * u[:, None]


# --------------------------------------------------------------- toy pairs

SPEED = {"slowly": 0.6, "quickly": 1.4}
DURATION_FRAMES = {"briefly": (32, 44), "": (46, 60), "for a long time": (62, 76)}


@dataclass
class GrammarConfig:
    kinds: tuple = KINDS
    speeds: tuple = ("slowly", "quickly")
    durations: tuple = ("briefly", "", "for a long time")
    sides: tuple = ("left", "right", "both")
    captions_per_sample: int = 3
    scene_yaw: float = np.pi / 6
    scene_shift: float = 0.5
    fps: int = DEFAULT_FPS
    extra: dict = field(default_factory=dict)


def _with_duration(text: str, duration: str) -> str:
    return f"{text} {duration}." if duration else f"{text}."


def _captions(kind, p, duration, count, rng):
    speed, side = p["speed"], p.get("side", "")
    arm = {"left": "the left arm", "right": "the right arm", "both": "both arms"}.get(side, "")
    if kind == "approach":
        end = {"shake": "shake hands", "hug": "hug"}[p["end"]]
        options = [
            f"two people walk toward each other {speed} and {end}",
            f"one person and the other person approach each other {speed}, then {end}",
            f"the two people move {speed} toward each other and {end}",
        ]
    elif kind == "circle":
        options = [
            f"two people circle each other {p['direction']} {speed}",
            f"one person and the other person walk {speed} in a circle {p['direction']}, facing each other",
            f"the two people step {speed} around each other {p['direction']}",
        ]
    elif kind == "mirror":
        options = [
            f"one person raises {arm} {speed} and the other person mirrors the gesture",
            f"one person lifts {arm} {speed} while the other person copies the movement",
            f"facing each other, one person raises {arm} {speed} and the other person mirrors it",
        ]
    elif kind == "push":
        options = [
            f"one person pushes the other person, who steps back {speed}",
            f"one person shoves the other person with both hands and the other person retreats {speed}",
            f"one person steps forward and pushes, the other person stumbles back {speed}",
        ]
    else:
        raise BadArgument(f"unknown interaction kind {kind!r}")
    picks = rng.permutation(len(options))[:count]
    return [_with_duration(options[i], duration) for i in picks]


def _facing_pair(frames, gap):
    a = np.tile([-gap / 2, 0.0], (frames, 1))
    b = np.tile([gap / 2, 0.0], (frames, 1))
    return a, b, np.full(frames, np.pi / 2), np.full(frames, -np.pi / 2)


def _interaction(kind, p, frames, skeleton, fps):
    u = np.linspace(0.0, 1.0, frames)
    sp = SPEED[p["speed"]]
    pa, pb = Pose(frames, skeleton), Pose(frames, skeleton)
    pa.arms_down()
    pb.arms_down()
    if kind == "approach":
        start = 1.2 + 0.9 * sp
        travel = _ease(u / 0.7)
        xa = _line(np.array([-start, 0.0]), np.array([-0.45, 0.0]), travel)
        xb = _line(np.array([start, 0.0]), np.array([0.45, 0.0]), travel)
        gait = 2 * np.pi * (2.0 + 2.0 * sp) * np.minimum(u, 0.7)
        amp = 0.45 * np.clip((0.72 - u) * 8, 0, 1)
        _walk(pa, gait, amp)
        _walk(pb, gait + np.pi, amp)
        reach = _ease((u - 0.7) / 0.2)
        side = "right" if p["end"] == "shake" else "both"
        _arm_forward(pa, side, reach)
        _arm_forward(pb, side, reach)
        ya, yb = np.full(frames, np.pi / 2), np.full(frames, -np.pi / 2)
    elif kind == "circle":
        sign = 1.0 if p["direction"] == "counterclockwise" else -1.0
        theta = np.pi + sign * sp * 2.2 * u * 2 * np.pi / 3
        r = 0.8
        xa = np.stack([r * np.cos(theta), r * np.sin(theta)], -1)
        xb = -xa
        # face the centre: forward direction from position towards origin
        ya = np.arctan2(-xa[:, 0], -xa[:, 1])
        yb = np.arctan2(-xb[:, 0], -xb[:, 1])
        gait = 2 * np.pi * 3.0 * sp * u
        _walk(pa, gait, 0.3)
        _walk(pb, gait + np.pi, 0.3)
    elif kind == "mirror":
        xa, xb, ya, yb = _facing_pair(frames, 1.4)
        reps = 1 + int(p["reps"])
        lag = 3
        lift = np.sin(np.pi * reps * u) ** 2 * (0.55 + 0.3 * sp)
        lift_b = np.concatenate([np.zeros(lag), lift[:-lag]])
        mirrored = {"left": "right", "right": "left", "both": "both"}[p["side"]]
        _arm_raise(pa, p["side"], lift)
        _arm_raise(pb, mirrored, lift_b)
    elif kind == "push":
        xa, xb, ya, yb = _facing_pair(frames, 1.3)
        step = _ease(u / 0.45)
        xa = xa + np.stack([0.45 * step, np.zeros(frames)], -1)
        push = np.sin(np.pi * np.clip((u - 0.2) / 0.45, 0, 1))
        _arm_forward(pa, "both", push)
        _walk(pa, 2 * np.pi * 1.0 * np.minimum(u, 0.45), 0.3 * (u < 0.5))
        back = _ease((u - 0.4) / 0.5) * (0.5 + 0.6 * sp)
        xb = xb + np.stack([back, np.zeros(frames)], -1)
        pb.rotate(SPINE1, "x", -0.35 * np.sin(np.pi * np.clip((u - 0.35) / 0.5, 0, 1)))
        _walk(pb, 2 * np.pi * (1.0 + sp) * np.clip(u - 0.4, 0, None), 0.35 * (u > 0.4))
    else:
        raise BadArgument(f"unknown interaction kind {kind!r}")
    return (xa, ya, pa), (xb, yb, pb)


def _scene_transform(xz, yaw, scene_yaw, shift):
    c, s = np.cos(scene_yaw), np.sin(scene_yaw)
    # rotation about +y acting on (x, z)
    x = c * xz[:, 0] + s * xz[:, 1] + shift[0]
    z = -s * xz[:, 0] + c * xz[:, 1] + shift[1]
    return np.stack([x, z], -1), yaw + scene_yaw


def sample_parameters(rng: np.random.Generator, grammar: GrammarConfig):
    kind = grammar.kinds[rng.integers(len(grammar.kinds))]
    p = {
        "kind": kind,
        "speed": grammar.speeds[rng.integers(len(grammar.speeds))],
        "duration": grammar.durations[rng.integers(len(grammar.durations))],
    }
    if kind == "approach":
        p["end"] = ("shake", "hug")[rng.integers(2)]
    elif kind == "circle":
        p["direction"] = ("clockwise", "counterclockwise")[rng.integers(2)]
    elif kind == "mirror":
        p["side"] = grammar.sides[rng.integers(len(grammar.sides))]
        p["reps"] = int(rng.integers(0, 2))
    return p


def make_interaction(params: dict, rng: np.random.Generator, grammar: GrammarConfig = GrammarConfig(),
                     skeleton: Skeleton | None = None) -> InteractionSample:
    skeleton = skeleton or default_skeleton()
    lo, hi = DURATION_FRAMES[params["duration"]]
    frames = int(rng.integers(lo, hi + 1))
    scene_yaw = rng.uniform(-grammar.scene_yaw, grammar.scene_yaw)
    shift = rng.uniform(-grammar.scene_shift, grammar.scene_shift, size=2)
    agents = []
    for xz, yaw, pose in _interaction(params["kind"], params, frames, skeleton, grammar.fps):
        xz, yaw = _scene_transform(xz, yaw, scene_yaw, shift)
        agents.append(pose.build(xz, yaw, fps=grammar.fps))
    captions = _captions(params["kind"], params, params["duration"], grammar.captions_per_sample, rng)
    return InteractionSample(tuple(agents), captions, Provenance.REAL, {"params": dict(params)})


def generate_toy_samples(seed: int, n_samples: int, grammar: GrammarConfig = GrammarConfig()) -> list[InteractionSample]:
    """Deterministic list of procedurally generated, captioned interactions."""
    if n_samples < 8:
        raise BadArgument("n_samples must be >= 8")
    rng = np.random.default_rng(seed)
    skeleton = default_skeleton()
    return [make_interaction(sample_parameters(rng, grammar), rng, grammar, skeleton) for _ in range(n_samples)]


# ------------------------------------------------------ single-person stub

_KEYWORDS = {
    "forward": ("forward", "approach", "toward", "lunge", "advanc", "steps in"),
    "backward": ("back", "retreat", "stumbl", "away"),
    "raise": ("raise", "lift", "clap", "up", "overhead"),
    "reach": ("push", "punch", "extend", "reach", "shove", "hand", "outstretch", "wrap"),
    "circle": ("circle", "around", "turn"),
    "jump": ("jump", "leap", "hop"),
    "lean": ("lean", "bow"),
    "kick": ("kick", "swing", "leg"),
}


def text_primitives(text: str) -> set[str]:
    low = text.lower()
    return {name for name, keys in _KEYWORDS.items() if any(k in low for k in keys)}


class ProceduralSource:
    """Single-person motion source: maps caption keywords to parameterized primitives.

    Follows the ``(text, frame_count, seed) -> MotionSequence`` adapter contract.
    The agent stands at ``x = -0.7`` facing +x, the layout used by the toy pairs.
    """

    def __init__(self, skeleton: Skeleton | None = None, fps: int = DEFAULT_FPS):
        self.skeleton = skeleton or default_skeleton()
        self.fps = fps

    def __call__(self, text: str, frame_count: int, seed: int) -> MotionSequence:
        if frame_count < 2:
            raise BadArgument("frame_count must be >= 2")
        rng = np.random.default_rng(seed)
        prims = text_primitives(text)
        sp = 1.4 if ("quick" in text.lower() or "swift" in text.lower() or "sharp" in text.lower()) else 0.8
        t = frame_count
        u = np.linspace(0.0, 1.0, t)
        pose = Pose(t, self.skeleton)
        pose.arms_down()
        x = np.full(t, -0.7) + rng.uniform(-0.05, 0.05)
        z = np.zeros(t)
        yaw = np.full(t, np.pi / 2)
        height = np.full(t, PELVIS_HEIGHT)
        moving = False
        if "circle" in prims:
            theta = np.pi + sp * 2.2 * u * 2 * np.pi / 3
            x, z = 0.8 * np.cos(theta), 0.8 * np.sin(theta)
            yaw = np.arctan2(-x, -z)
            moving = True
        elif "forward" in prims:
            x = x + 0.5 * sp * _ease(u / 0.6)
            moving = True
        elif "backward" in prims:
            x = x - 0.6 * sp * _ease((u - 0.2) / 0.6)
            moving = True
        if moving:
            _walk(pose, 2 * np.pi * 2.0 * sp * u, 0.35)
        if "raise" in prims:
            _arm_raise(pose, "both", np.sin(np.pi * u) ** 2 * 0.8)
        if "reach" in prims:
            _arm_forward(pose, "both", np.sin(np.pi * np.clip((u - 0.2) / 0.5, 0, 1)))
        if "lean" in prims:
            pose.rotate(SPINE1, "x", -0.3 * np.sin(np.pi * u))
        if "kick" in prims:
            pose.rotate(R_HIP, "x", -0.9 * np.sin(np.pi * np.clip((u - 0.4) / 0.3, 0, 1)))
        if "jump" in prims:
            height = height + 0.25 * np.abs(np.sin(2 * np.pi * sp * u))
        if not prims:
            pose.rotate(SPINE1, "z", 0.05 * np.sin(2 * np.pi * u + rng.uniform(0, np.pi)))
        return pose.build(np.stack([x, z], -1), yaw, height, self.fps)
