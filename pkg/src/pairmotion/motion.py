"""Skeletons, rotation algebra, forward kinematics and the flat per-frame motion layout.

Per-frame layout for a skeleton with ``N`` joints::

    [ positions (3N) | velocities (3N) | local 6D rotations of joints 1..N-1 (6(N-1)) | foot contacts (4) ]

which is 262 channels for the default 22-joint skeleton.  Velocities are
backward differences in meters/frame with a zero first frame.  The world is
y-up and characters face +z in their rest pose.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadArgument, DegenerateRotation, NotARotation, ShapeMismatch

DEFAULT_FPS = 30
# squared-speed threshold (m^2/frame^2) used for contact labelling
CONTACT_SPEED_SQ = 0.002
_EPS_NORM = 1e-8

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
_PARENTS_22 = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
_OFFSETS_22 = (
    (0.0, 0.0, 0.0),
    (0.09, -0.08, 0.0), (-0.09, -0.08, 0.0), (0.0, 0.11, -0.01),
    (0.02, -0.38, 0.0), (-0.02, -0.38, 0.0), (0.0, 0.13, 0.0),
    (0.0, -0.40, -0.03), (0.0, -0.40, -0.03), (0.0, 0.05, 0.02),
    (0.02, -0.05, 0.12), (-0.02, -0.05, 0.12), (0.0, 0.21, -0.02),
    (0.08, 0.12, 0.0), (-0.08, 0.12, 0.0), (0.0, 0.09, 0.05),
    (0.10, 0.03, 0.0), (-0.10, 0.03, 0.0), (0.26, 0.0, 0.0),
    (-0.26, 0.0, 0.0), (0.25, 0.0, 0.0), (-0.25, 0.0, 0.0),
)


def representation_width(joint_count: int) -> int:
    return 3 * joint_count + 3 * joint_count + 6 * (joint_count - 1) + 4


def joint_count_from_width(width: int) -> int:
    n, rem = divmod(width + 2, 12)
    if rem or n < 2:
        raise ShapeMismatch(f"width {width} does not match any joint count")
    return n


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...]
    offsets: np.ndarray
    foot_joint_ids: tuple[int, int, int, int]
    # left hip, right hip, left shoulder, right shoulder; used for facing direction
    facing_joint_ids: tuple[int, int, int, int] = (1, 2, 16, 17)

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        n = len(self.parents)
        if offsets.shape != (n, 3):
            raise ShapeMismatch(f"offsets must be ({n}, 3), got {offsets.shape}")
        if self.parents[0] != -1:
            raise BadArgument("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise BadArgument(f"joint {j} has parent {self.parents[j]}; parents must precede children")
        if n > 1 and np.any(np.linalg.norm(offsets[1:], axis=-1) <= 0):
            raise BadArgument("non-root offsets must have positive length")
        for ids, name in ((self.foot_joint_ids, "foot"), (self.facing_joint_ids, "facing")):
            if len(set(ids)) != 4 or any(not 0 <= k < n for k in ids):
                raise BadArgument(f"{name}_joint_ids must be 4 distinct valid joints, got {ids}")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def width(self) -> int:
        return representation_width(self.joint_count)

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets[1:], axis=-1)

    def rest_pose(self) -> np.ndarray:
        pos = np.zeros((self.joint_count, 3))
        for j in range(1, self.joint_count):
            pos[j] = pos[self.parents[j]] + self.offsets[j]
        return pos


def default_skeleton() -> Skeleton:
    """The 22-joint body used throughout (SMPL-like ordering, self-defined offsets)."""
    return Skeleton(_PARENTS_22, np.array(_OFFSETS_22), foot_joint_ids=(7, 10, 8, 11))


def chain_skeleton(joint_count: int, seed: int = 0) -> Skeleton:
    """A small random tree, handy for tests on reduced joint counts (needs >= 5 joints)."""
    if joint_count < 5:
        raise BadArgument("chain_skeleton needs at least 5 joints")
    rng = np.random.default_rng(seed)
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, joint_count)]
    offsets = rng.normal(size=(joint_count, 3)) * 0.3
    offsets[0] = 0.0
    offsets[1:] += np.sign(offsets[1:]) * 0.05
    return Skeleton(tuple(parents), offsets, foot_joint_ids=(1, 2, 3, 4), facing_joint_ids=(1, 2, 3, 4))


# ---------------------------------------------------------------- rotations

def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt a 6D rotation (first two matrix columns) back to a 3x3 matrix.

    Works on any leading batch shape ``(..., 6) -> (..., 3, 3)``.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dimension 6, got {r6.shape}")
    a, b = r6[..., :3], r6[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < _EPS_NORM):
        raise DegenerateRotation("first column has (near) zero norm")
    x = a / na
    b = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb < _EPS_NORM):
        raise DegenerateRotation("second column is (near) parallel to the first")
    y = b / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d(rot: np.ndarray, atol: float = 1e-4) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {rot.shape}")
    gram = np.swapaxes(rot, -1, -2) @ rot
    if not np.allclose(gram, np.eye(3), atol=atol) or not np.allclose(np.linalg.det(rot), 1.0, atol=atol):
        raise NotARotation("matrix is not a proper rotation")
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def axis_angle_to_matrix(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, batched over leading dims."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = np.where(angle > 1e-12, aa / np.maximum(angle, 1e-12), np.array([1.0, 0.0, 0.0]))
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(angle)[..., None]
    c = np.cos(angle)[..., None]
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def yaw_matrix(angle) -> np.ndarray:
    """Rotation about +y (the up axis)."""
    angle = np.asarray(angle, dtype=np.float64)
    aa = np.zeros(angle.shape + (3,))
    aa[..., 1] = angle
    return axis_angle_to_matrix(aa)


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# ------------------------------------------------------------ kinematics

def forward_kinematics(skeleton: Skeleton, root_positions, rotations6d, root_rotations6d) -> np.ndarray:
    """Global joint positions ``(T, N, 3)`` from a root track and local 6D rotations."""
    root_positions = np.asarray(root_positions, dtype=np.float64)
    rotations6d = np.asarray(rotations6d, dtype=np.float64)
    root_rotations6d = np.asarray(root_rotations6d, dtype=np.float64)
    n = skeleton.joint_count
    t = root_positions.shape[0]
    if root_positions.shape != (t, 3):
        raise ShapeMismatch(f"root_positions must be (T, 3), got {root_positions.shape}")
    if rotations6d.shape != (t, n - 1, 6):
        raise ShapeMismatch(f"rotations6d must be ({t}, {n - 1}, 6), got {rotations6d.shape}")
    if root_rotations6d.shape != (t, 6):
        raise ShapeMismatch(f"root_rotations6d must be ({t}, 6), got {root_rotations6d.shape}")

    local = rot6d_to_matrix(rotations6d)
    global_rot = np.empty((t, n, 3, 3))
    positions = np.empty((t, n, 3))
    global_rot[:, 0] = rot6d_to_matrix(root_rotations6d)
    positions[:, 0] = root_positions
    for j in range(1, n):
        p = skeleton.parents[j]
        positions[:, j] = positions[:, p] + global_rot[:, p] @ skeleton.offsets[j]
        global_rot[:, j] = global_rot[:, p] @ local[:, j - 1]
    return positions


def compute_velocities(positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions)
    vel = np.zeros_like(positions)
    vel[1:] = positions[1:] - positions[:-1]
    return vel


def detect_foot_contacts(positions, skeleton: Skeleton, velocity_threshold: float = float(np.sqrt(CONTACT_SPEED_SQ))) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[1:] != (skeleton.joint_count, 3):
        raise ShapeMismatch(f"positions must be (T, {skeleton.joint_count}, 3), got {positions.shape}")
    if positions.shape[0] < 2:
        raise ShapeMismatch("contact detection needs at least two frames")
    feet = positions[:, list(skeleton.foot_joint_ids)]
    speed_sq = np.sum((feet[1:] - feet[:-1]) ** 2, axis=-1)
    contacts = np.empty((positions.shape[0], 4))
    contacts[1:] = (speed_sq < velocity_threshold ** 2).astype(np.float64)
    contacts[0] = contacts[1]
    return contacts


# -------------------------------------------------------- representation

def build_representation(positions, rotations6d, contacts) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    rotations6d = np.asarray(rotations6d, dtype=np.float64)
    contacts = np.asarray(contacts, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[-1] != 3:
        raise ShapeMismatch(f"positions must be (T, N, 3), got {positions.shape}")
    t, n, _ = positions.shape
    if rotations6d.shape != (t, n - 1, 6):
        raise ShapeMismatch(f"rotations6d must be ({t}, {n - 1}, 6), got {rotations6d.shape}")
    if contacts.shape != (t, 4):
        raise ShapeMismatch(f"contacts must be ({t}, 4), got {contacts.shape}")
    velocities = compute_velocities(positions)
    return np.concatenate(
        [positions.reshape(t, -1), velocities.reshape(t, -1), rotations6d.reshape(t, -1), contacts], axis=-1
    )


def split_representation(flat):
    """Inverse of :func:`build_representation`: ``(positions, velocities, rotations6d, contacts)``."""
    flat = np.asarray(flat)
    if flat.ndim != 2:
        raise ShapeMismatch(f"expected (T, width), got {flat.shape}")
    t, w = flat.shape
    n = joint_count_from_width(w)
    i0, i1, i2 = 3 * n, 6 * n, 6 * n + 6 * (n - 1)
    return (
        flat[:, :i0].reshape(t, n, 3),
        flat[:, i0:i1].reshape(t, n, 3),
        flat[:, i1:i2].reshape(t, n - 1, 6),
        flat[:, i2:],
    )


def channel_slices(joint_count: int) -> dict[str, slice]:
    n = joint_count
    return {
        "positions": slice(0, 3 * n),
        "velocities": slice(3 * n, 6 * n),
        "rotations": slice(6 * n, 12 * n - 6),
        "contacts": slice(12 * n - 6, 12 * n - 2),
    }


@dataclass
class MotionSequence:
    positions: np.ndarray
    velocities: np.ndarray
    rotations6d: np.ndarray
    contacts: np.ndarray
    fps: int = DEFAULT_FPS

    @classmethod
    def from_positions(cls, positions, rotations6d, contacts, fps: int = DEFAULT_FPS) -> "MotionSequence":
        positions = np.asarray(positions, dtype=np.float64)
        return cls(positions, compute_velocities(positions), np.asarray(rotations6d, dtype=np.float64),
                   np.asarray(contacts, dtype=np.float64), fps)

    @classmethod
    def from_representation(cls, flat, fps: int = DEFAULT_FPS, binarize_contacts: bool = True) -> "MotionSequence":
        pos, _, rot, contacts = split_representation(np.asarray(flat, dtype=np.float64))
        if binarize_contacts:
            contacts = (contacts > 0.5).astype(np.float64)
        return cls.from_positions(pos, rot, contacts, fps)

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    @property
    def joint_count(self) -> int:
        return self.positions.shape[1]

    def to_representation(self) -> np.ndarray:
        return build_representation(self.positions, self.rotations6d, self.contacts)

    def validate(self, atol: float = 1e-6) -> None:
        t, n = self.frames, self.joint_count
        if self.positions.shape != (t, n, 3) or self.velocities.shape != (t, n, 3):
            raise ShapeMismatch("positions/velocities must be (T, N, 3)")
        if self.rotations6d.shape != (t, n - 1, 6) or self.contacts.shape != (t, 4):
            raise ShapeMismatch("rotations6d must be (T, N-1, 6) and contacts (T, 4)")
        if not np.allclose(self.velocities, compute_velocities(self.positions), atol=atol, rtol=0):
            raise BadArgument("velocities are not the backward difference of positions")
        if not np.all((self.contacts == 0) | (self.contacts == 1)):
            raise BadArgument("contacts must be binary")


class Provenance(str, enum.Enum):
    REAL = "real"
    SYNTHETIC_RAW = "synthetic_raw"
    SYNTHETIC_FILTERED = "synthetic_filtered"


@dataclass
class InteractionSample:
    agents: tuple[MotionSequence, MotionSequence]
    captions: list[str]
    provenance: Provenance = Provenance.REAL
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        a, b = self.agents
        if a.frames != b.frames or a.joint_count != b.joint_count or a.fps != b.fps:
            raise ShapeMismatch("both agents must share frame count, joint count and fps")
        if not self.captions:
            raise BadArgument("an interaction needs at least one caption")
        self.provenance = Provenance(self.provenance)

    @property
    def frames(self) -> int:
        return self.agents[0].frames

    def to_array(self) -> np.ndarray:
        """Stacked representation, shape ``(2, T, width)``."""
        return np.stack([a.to_representation() for a in self.agents])

    @classmethod
    def from_array(cls, arr, captions: Sequence[str], provenance=Provenance.REAL, fps: int = DEFAULT_FPS, metadata=None):
        agents = tuple(MotionSequence.from_representation(arr[i], fps=fps) for i in range(2))
        return cls(agents, list(captions), provenance, dict(metadata or {}))

    def validate(self) -> None:
        for agent in self.agents:
            agent.validate()


def _positions_of(x) -> np.ndarray:
    return x.positions if isinstance(x, MotionSequence) else np.asarray(x, dtype=np.float64)


def joint_pair_distances(a, b) -> np.ndarray:
    """Distances ``out[t, i, j]`` between joint ``i`` of ``a`` and joint ``j`` of ``b``."""
    pa, pb = _positions_of(a), _positions_of(b)
    if pa.shape != pb.shape or pa.ndim != 3 or pa.shape[-1] != 3:
        raise ShapeMismatch(f"agents must share (T, N, 3) shape, got {pa.shape} and {pb.shape}")
    diff = pa[:, :, None, :] - pb[:, None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))
