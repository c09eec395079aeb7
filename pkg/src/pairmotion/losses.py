"""Training objective for the two-person denoiser.

Motion tensors are ``(B, 2, T, C)`` in the flat per-frame layout (a leading
batch axis may be omitted).  Geometric terms expect meters, i.e. tensors that
have already been denormalized.  ``frame_mask`` is ``(B, T)`` with 1 on valid
frames.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import BadArgument, ShapeMismatch
from .motion import Skeleton, joint_count_from_width

TERMS = ("base", "vel", "foot", "bone", "rel_orient", "ada_interact")


@dataclass
class LossWeights:
    base: float = 1.0
    vel: float = 1.0
    foot: float = 1.0
    bone: float = 1.0
    rel_orient: float = 1.0
    ada_interact: float = 1.0
    epsilon: float = 0.1

    def __post_init__(self):
        for name in TERMS:
            w = getattr(self, name)
            if not math.isfinite(w) or w < 0:
                raise BadArgument(f"loss weight {name}={w} must be finite and >= 0")
        if not self.epsilon > 0:
            raise BadArgument("epsilon must be > 0")

    @classmethod
    def only(cls, **kw) -> "LossWeights":
        """All weights zero except those given."""
        base = {name: 0.0 for name in TERMS}
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def _batched(x):
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 2:
        raise ShapeMismatch(f"expected (B, 2, T, C), got {tuple(x.shape)}")
    return x


def _check_pair(x0, x0_hat):
    x0, x0_hat = _batched(x0), _batched(x0_hat)
    if x0.shape != x0_hat.shape:
        raise ShapeMismatch(f"target {tuple(x0.shape)} and prediction {tuple(x0_hat.shape)} differ")
    return x0, x0_hat


def _frame_weights(x, frame_mask):
    b, _, t, _ = x.shape
    if frame_mask is None:
        return torch.ones(b, t, dtype=x.dtype, device=x.device)
    frame_mask = torch.as_tensor(frame_mask, device=x.device).reshape(b, t)
    return frame_mask.to(x.dtype)


def positions(x):
    """``(..., T, C) -> (..., T, N, 3)`` joint positions."""
    n = joint_count_from_width(x.shape[-1])
    return x[..., : 3 * n].reshape(*x.shape[:-1], n, 3)


def contacts(x):
    return x[..., -4:]


def base_reconstruction(x0, x0_hat, frame_mask=None, channel_mask=None):
    """MSE over valid frames and channels of both agents.

    ``channel_mask`` (shape ``(2, C)``) drops channels from the average, which
    the reaction generator uses to exclude its conditioned channels.
    """
    x0, x0_hat = _check_pair(x0, x0_hat)
    fw = _frame_weights(x0, frame_mask)[:, None, :, None]
    cw = torch.ones(2, x0.shape[-1], dtype=x0.dtype, device=x0.device) if channel_mask is None else \
        torch.as_tensor(channel_mask, dtype=x0.dtype, device=x0.device)
    w = fw * cw[None, :, None, :]
    return ((x0_hat - x0) ** 2 * w).sum() / w.expand_as(x0).sum().clamp_min(1.0)


def _pair_frame_weights(fw):
    return fw[:, 1:] * fw[:, :-1]


def velocity_loss(x0, x0_hat, skeleton: Skeleton | None = None, frame_mask=None):
    """MSE between frame-difference sequences of joint positions."""
    x0, x0_hat = _check_pair(x0, x0_hat)
    p, ph = positions(x0), positions(x0_hat)
    v, vh = p[:, :, 1:] - p[:, :, :-1], ph[:, :, 1:] - ph[:, :, :-1]
    w = _pair_frame_weights(_frame_weights(x0, frame_mask))[:, None, :, None, None]
    w = w.expand_as(v)
    return ((vh - v) ** 2 * w).sum() / w.sum().clamp_min(1.0)


def foot_contact_loss(x0, x0_hat, skeleton: Skeleton, frame_mask=None):
    """Mean over (agent, frame, foot joint) of gt_contact * |predicted - true foot velocity|^2.

    On contact frames where the true foot is still this is the squared
    predicted foot speed; the residual form keeps the term exactly zero at a
    perfect prediction even when labelled contacts carry small true motion.
    """
    x0, x0_hat = _check_pair(x0, x0_hat)
    feet = list(skeleton.foot_joint_ids)
    p, ph = positions(x0)[..., feet, :], positions(x0_hat)[..., feet, :]
    speed_sq = (((ph[:, :, 1:] - ph[:, :, :-1]) - (p[:, :, 1:] - p[:, :, :-1])) ** 2).sum(-1)
    c = contacts(x0)[:, :, 1:]
    w = _pair_frame_weights(_frame_weights(x0, frame_mask))[:, None, :, None].expand_as(speed_sq)
    return (speed_sq * c * w).sum() / w.sum().clamp_min(1.0)


def bone_lengths(p, skeleton: Skeleton):
    parents = list(skeleton.parents[1:])
    children = list(range(1, skeleton.joint_count))
    return torch.linalg.vector_norm(p[..., children, :] - p[..., parents, :], dim=-1)


def bone_length_loss(x0, x0_hat, skeleton: Skeleton, frame_mask=None):
    """Per frame: sum over bones of squared length error; averaged over agents and valid frames."""
    x0, x0_hat = _check_pair(x0, x0_hat)
    err = ((bone_lengths(positions(x0_hat), skeleton) - bone_lengths(positions(x0), skeleton)) ** 2).sum(-1)
    w = _frame_weights(x0, frame_mask)[:, None, :].expand_as(err)
    return (err * w).sum() / w.sum().clamp_min(1.0)


def facing_rotation(p, skeleton: Skeleton):
    """Yaw-only root orientation ``(..., 3, 3)`` derived from hip and shoulder joints."""
    lh, rh, ls, rs = skeleton.facing_joint_ids
    across = (p[..., rh, :] - p[..., lh, :]) + (p[..., rs, :] - p[..., ls, :])
    # forward = up x across with up = +y
    fx, fz = across[..., 2], -across[..., 0]
    norm = torch.sqrt(fx * fx + fz * fz + 1e-8)
    fx, fz = fx / norm, fz / norm
    zero, one = torch.zeros_like(fx), torch.ones_like(fx)
    rows = [torch.stack([fz, zero, fx], -1), torch.stack([zero, one, zero], -1), torch.stack([-fx, zero, fz], -1)]
    return torch.stack(rows, dim=-2)


def relative_orientation_6d(x, skeleton: Skeleton):
    """Agent-2 facing expressed in agent-1's facing frame, as 6D, shape ``(B, T, 6)``."""
    x = _batched(x)
    r1 = facing_rotation(positions(x[:, 0]), skeleton)
    r2 = facing_rotation(positions(x[:, 1]), skeleton)
    rel = r1.transpose(-1, -2) @ r2
    return torch.cat([rel[..., :, 0], rel[..., :, 1]], dim=-1)


def relative_orientation_loss(x0, x0_hat, skeleton: Skeleton, frame_mask=None):
    x0, x0_hat = _check_pair(x0, x0_hat)
    err = (relative_orientation_6d(x0_hat, skeleton) - relative_orientation_6d(x0, skeleton)) ** 2
    w = _frame_weights(x0, frame_mask)[:, :, None].expand_as(err)
    return (err * w).sum() / w.sum().clamp_min(1.0)


def _pair_dist(a, b):
    return torch.linalg.vector_norm(a[..., :, None, :] - b[..., None, :, :], dim=-1)


def adaptive_interaction_loss(x1, x2, x1_hat, x2_hat, epsilon: float = 0.1, frame_mask=None, reduction: str = "mean"):
    """Inter-agent joint-pair distance error weighted by ``1 / (d_gt + epsilon)``.

    Arguments are joint positions ``(B, T, N, 3)`` or ``(T, N, 3)``.  The weight
    uses ground-truth distances and carries no gradient.  ``reduction="mean"``
    divides the per-frame double sum by ``N^2`` and averages over valid
    frames; ``"sum"`` returns the raw double sum accumulated over frames.
    """
    if not epsilon > 0:
        raise BadArgument("epsilon must be > 0")
    tensors = [torch.as_tensor(v) for v in (x1, x2, x1_hat, x2_hat)]
    tensors = [v[None] if v.dim() == 3 else v for v in tensors]
    if any(v.shape != tensors[0].shape for v in tensors) or tensors[0].shape[-1] != 3:
        raise ShapeMismatch("all four motions must share (B, T, N, 3)")
    x1, x2, x1_hat, x2_hat = tensors
    d = _pair_dist(x1, x2)
    d_hat = _pair_dist(x1_hat, x2_hat)
    weight = 1.0 / (d.detach() + epsilon)
    per_frame = (weight * (d - d_hat).abs()).sum(dim=(-1, -2))
    b, t, n, _ = x1.shape
    fw = torch.ones(b, t, dtype=per_frame.dtype) if frame_mask is None else \
        torch.as_tensor(frame_mask).reshape(b, t).to(per_frame.dtype)
    if reduction == "sum":
        return (per_frame * fw).sum()
    if reduction != "mean":
        raise BadArgument(f"unknown reduction {reduction!r}")
    return (per_frame * fw).sum() / (n * n) / fw.sum().clamp_min(1.0)


def total_loss(x0, x0_hat, skeleton: Skeleton, weights: LossWeights, frame_mask=None,
               base_pair=None, channel_mask=None):
    """Weighted sum of every term plus the breakdown of weighted contributions.

    ``base_pair`` optionally supplies the (normalized) tensors for the base
    reconstruction term; geometric terms always use ``x0``/``x0_hat``.
    """
    x0, x0_hat = _check_pair(x0, x0_hat)
    bx, bxh = base_pair if base_pair is not None else (x0, x0_hat)
    terms = {
        "base": base_reconstruction(bx, bxh, frame_mask, channel_mask),
        "vel": velocity_loss(x0, x0_hat, skeleton, frame_mask),
        "foot": foot_contact_loss(x0, x0_hat, skeleton, frame_mask),
        "bone": bone_length_loss(x0, x0_hat, skeleton, frame_mask),
        "rel_orient": relative_orientation_loss(x0, x0_hat, skeleton, frame_mask),
        "ada_interact": adaptive_interaction_loss(
            positions(x0[:, 0]), positions(x0[:, 1]), positions(x0_hat[:, 0]), positions(x0_hat[:, 1]),
            weights.epsilon, frame_mask),
    }
    terms = {k: getattr(weights, k) * v for k, v in terms.items()}
    return sum(terms.values()), terms
