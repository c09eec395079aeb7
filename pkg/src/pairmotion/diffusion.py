"""Cosine-schedule diffusion: forward noising, the training step, guided DDIM and reaction sampling."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import BadArgument, NonFiniteLoss, ShapeMismatch
from .losses import LossWeights, total_loss
from .motion import InteractionSample, Provenance, Skeleton, channel_slices, compute_velocities, joint_count_from_width
from .normalize import Normalizer
from .text import TokenizedPrompt, null_prompt


@dataclass
class NoiseSchedule:
    steps: int
    alpha_bar: np.ndarray
    betas: np.ndarray


def cosine_schedule(steps: int = 1000, s: float = 0.008) -> NoiseSchedule:
    if steps < 1:
        raise BadArgument("steps must be >= 1")

    def f(t):
        return np.cos((t / steps + s) / (1 + s) * np.pi / 2) ** 2

    t = np.arange(steps + 1, dtype=np.float64)
    alpha_bar = f(t) / f(0.0)
    betas = np.minimum(1 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    return NoiseSchedule(steps, alpha_bar, betas)


def _coef(values: np.ndarray, t, like):
    if isinstance(like, torch.Tensor):
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[torch.as_tensor(t, device=like.device)]
        return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))
    c = np.asarray(values)[np.asarray(t)]
    return c.reshape(c.shape + (1,) * (np.ndim(like) - np.ndim(c)))


def q_sample(x0, t, noise, schedule: NoiseSchedule):
    """``sqrt(ab[t]) x0 + sqrt(1 - ab[t]) noise``; ``t`` may be a scalar or one step per leading item."""
    if tuple(np.shape(noise)) != tuple(np.shape(x0)):
        raise ShapeMismatch(f"noise {tuple(np.shape(noise))} != x0 {tuple(np.shape(x0))}")
    ab = _coef(schedule.alpha_bar, t, x0)
    if isinstance(x0, torch.Tensor):
        return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * noise
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise


@dataclass
class SamplerConfig:
    ddim_steps: int = 50
    guidance_weight: float = 3.5
    eta: float = 0.0
    seed: int = 0
    clip_x0: float | None = 6.0

    def validate(self, steps: int) -> None:
        if not 1 <= self.ddim_steps <= steps:
            raise BadArgument(f"ddim_steps must lie in [1, {steps}]")
        if self.eta < 0:
            raise BadArgument("eta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def cfg_combine(cond_pred, uncond_pred, w: float):
    """Classifier-free guidance, ``uncond + w (cond - uncond)``.

    Written as ``cond + (w - 1)(cond - uncond)`` so that ``w = 1`` returns the
    conditional prediction exactly; ``w = 0`` returns the unconditional one.
    """
    if tuple(np.shape(cond_pred)) != tuple(np.shape(uncond_pred)):
        raise ShapeMismatch("conditional and unconditional predictions differ in shape")
    if w == 0:
        return uncond_pred
    return cond_pred + (w - 1.0) * (cond_pred - uncond_pred)


def ddim_timesteps(steps: int, ddim_steps: int) -> np.ndarray:
    """Descending, uniformly strided subsequence of ``[0, steps - 1]``."""
    return np.unique(np.round(np.linspace(0, steps - 1, ddim_steps)).astype(np.int64))[::-1]


def initial_noise(frames: int, channels: int, seed: int, dtype=torch.float32):
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(2, 1, frames, channels, generator=gen, dtype=torch.float64).to(dtype)
    return x[0], x[1], gen


def _text(prompt: TokenizedPrompt, dtype):
    return torch.as_tensor(prompt.embeddings, dtype=dtype)[None], torch.as_tensor(prompt.mask)[None]


def _model_dtype(model):
    params = list(model.parameters()) if isinstance(model, torch.nn.Module) else []
    return params[0].dtype if params else torch.float64


@torch.no_grad()
def guided_prediction(model, x1, x2, t: int, prompt, null, w: float, clip_x0):
    dtype = x1.dtype
    tt = torch.full((x1.shape[0],), int(t), dtype=torch.long)
    cond = uncond = None
    if w != 0:
        cond = model(x1, x2, tt, *_text(prompt, dtype))
    if w != 1:
        uncond = model(x1, x2, tt, *_text(null, dtype))
    if cond is None:
        pred = uncond
    elif uncond is None:
        pred = cond
    else:
        pred = tuple(cfg_combine(c, u, w) for c, u in zip(cond, uncond))
    if clip_x0 is not None:
        pred = tuple(p.clamp(-clip_x0, clip_x0) for p in pred)
    return pred


def _ddim_loop(model, prompt, frames, channels, sampler: SamplerConfig, schedule: NoiseSchedule, null, impose=None):
    sampler.validate(schedule.steps)
    dtype = _model_dtype(model)
    null = null if null is not None else null_prompt(prompt.embeddings.shape[-1])
    x1, x2, gen = initial_noise(frames, channels, sampler.seed, dtype)
    ts = ddim_timesteps(schedule.steps, sampler.ddim_steps)
    ab = schedule.alpha_bar
    if impose is not None:
        x1 = impose(x1, int(ts[0]), gen)
    for i, t in enumerate(ts):
        p1, p2 = guided_prediction(model, x1, x2, int(t), prompt, null, sampler.guidance_weight, sampler.clip_x0)
        if i + 1 == len(ts):
            x1, x2 = p1, p2
            break
        t_prev = int(ts[i + 1])
        a_t, a_p = ab[t], ab[t_prev]
        sigma = sampler.eta * math.sqrt((1 - a_p) / (1 - a_t)) * math.sqrt(1 - a_t / a_p)
        dir_coef = math.sqrt(max(1 - a_p - sigma ** 2, 0.0))
        new = []
        for x, p in ((x1, p1), (x2, p2)):
            eps = (x - math.sqrt(a_t) * p) / math.sqrt(1 - a_t)
            nx = math.sqrt(a_p) * p + dir_coef * eps
            if sigma > 0:
                nx = nx + sigma * torch.randn(x.shape, generator=gen, dtype=torch.float64).to(dtype)
            new.append(nx)
        x1, x2 = new
        if impose is not None:
            x1 = impose(x1, t_prev, gen)
    return x1[0].double(), x2[0].double()


def ddim_sample(model, prompt: TokenizedPrompt, frames: int, sampler: SamplerConfig, schedule: NoiseSchedule,
                normalizer: Normalizer | None = None, null: TokenizedPrompt | None = None,
                fps: int = 30) -> InteractionSample:
    """Generate both agents from seeded Gaussian noise with guided, strided DDIM updates.

    ``model(x1, x2, t, text, text_mask)`` must return clean-sample predictions
    in normalized units; the result is denormalized with ``normalizer``.
    """
    channels = model.config.channel_width if hasattr(model, "config") else normalizer.width
    x1, x2 = _ddim_loop(model, prompt, frames, channels, sampler, schedule, null)
    arr = torch.stack([x1, x2]).numpy()
    if normalizer is not None:
        arr = normalizer.denormalize(arr)
    return InteractionSample.from_array(arr, [prompt.text], Provenance.SYNTHETIC_RAW, fps=fps)


def condition_channels(joint_count: int) -> np.ndarray:
    """Channel indices (positions and velocities) fixed by a reaction condition."""
    sl = channel_slices(joint_count)
    return np.r_[sl["positions"], sl["velocities"]]


def reaction_sample(model, condition_positions, prompt: TokenizedPrompt, sampler: SamplerConfig,
                    schedule: NoiseSchedule, normalizer: Normalizer | None = None,
                    null: TokenizedPrompt | None = None, noise_condition: bool | None = None,
                    fps: int = 30) -> InteractionSample:
    """Generate agent 2 while agent 1's joint positions are imposed at every step.

    Agent-1 position and velocity channels are overwritten after each update
    and on the final output, where the positions equal ``condition_positions``
    exactly.  ``noise_condition`` selects whether the imposed channels are the
    clean condition or the condition noised to the current level; it defaults
    to clean for models trained as reaction generators.
    """
    cond = np.asarray(condition_positions, dtype=np.float64)
    if cond.ndim != 3 or cond.shape[-1] != 3 or not np.all(np.isfinite(cond)):
        raise ShapeMismatch("condition must be a finite (T, N, 3) array")
    frames, n, _ = cond.shape
    channels = model.config.channel_width if hasattr(model, "config") else normalizer.width
    if joint_count_from_width(channels) != n:
        raise ShapeMismatch(f"condition has {n} joints but the model expects {joint_count_from_width(channels)}")
    normalizer = normalizer or Normalizer.identity(channels)
    if noise_condition is None:
        noise_condition = not getattr(getattr(model, "config", None), "reaction", False)
    idx = condition_channels(n)
    clean = np.concatenate([cond.reshape(frames, -1), compute_velocities(cond).reshape(frames, -1)], axis=-1)
    clean_norm = (clean - normalizer.mean[idx]) / normalizer.std[idx]
    dtype = _model_dtype(model)
    clean_t = torch.as_tensor(clean_norm, dtype=dtype)[None]
    idx_t = torch.as_tensor(idx)

    def impose(x1, t, gen):
        x1 = x1.clone()
        value = clean_t
        if noise_condition:
            z = torch.randn(clean_t.shape, generator=gen, dtype=torch.float64).to(dtype)
            value = q_sample(clean_t, t, z, schedule)
        x1[..., idx_t] = value
        return x1

    x1, x2 = _ddim_loop(model, prompt, frames, channels, sampler, schedule, null, impose)
    arr = normalizer.denormalize(torch.stack([x1, x2]).numpy())
    arr[0][:, idx] = clean
    return InteractionSample.from_array(arr, [prompt.text], Provenance.SYNTHETIC_RAW, fps=fps)


# ------------------------------------------------------------------ training

@dataclass
class Batch:
    x0: torch.Tensor          # (B, 2, T, C), normalized
    frame_mask: torch.Tensor  # (B, T) bool
    text: torch.Tensor        # (B, 77, D)
    text_mask: torch.Tensor   # (B, 77) bool


def compute_loss(model, batch: Batch, schedule: NoiseSchedule, weights: LossWeights, gen: torch.Generator,
                 normalizer: Normalizer, skeleton: Skeleton, p_uncond: float = 0.1, null: TokenizedPrompt | None = None):
    """Draws steps, noise and prompt drops from ``gen`` and returns ``(total, breakdown)``."""
    x0 = batch.x0
    b, _, frames, c = x0.shape
    dtype = x0.dtype
    t = torch.randint(0, schedule.steps, (b,), generator=gen)
    noise = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(dtype)
    drop = torch.rand(b, generator=gen, dtype=torch.float64) < p_uncond
    x_t = q_sample(x0, t, noise, schedule)

    channel_mask = None
    if model.config.reaction:
        idx = torch.as_tensor(condition_channels(joint_count_from_width(c)))
        x_t = x_t.clone()
        x_t[:, 0, :, idx] = x0[:, 0, :, idx]
        channel_mask = torch.ones(2, c, dtype=dtype)
        channel_mask[0, idx] = 0.0

    text, text_mask = batch.text, batch.text_mask
    if drop.any():
        null = null if null is not None else null_prompt(text.shape[-1])
        null_emb = torch.as_tensor(null.embeddings, dtype=text.dtype)
        null_mask = torch.as_tensor(null.mask)
        text = torch.where(drop[:, None, None], null_emb, text)
        text_mask = torch.where(drop[:, None], null_mask, text_mask)

    p1, p2 = model(x_t[:, 0], x_t[:, 1], t, text, text_mask, batch.frame_mask)
    pred = torch.stack([p1, p2], dim=1)
    fm = batch.frame_mask.to(dtype)
    total, terms = total_loss(normalizer.denormalize(x0), normalizer.denormalize(pred), skeleton, weights, fm,
                              base_pair=(x0, pred), channel_mask=channel_mask)
    return total, terms


def train_step(model, batch: Batch, schedule: NoiseSchedule, weights: LossWeights, gen: torch.Generator,
               normalizer: Normalizer, skeleton: Skeleton, p_uncond: float = 0.1, null=None):
    """One forward/backward pass; returns ``(losses by name, gradients by parameter name)``."""
    model.zero_grad(set_to_none=True)
    total, terms = compute_loss(model, batch, schedule, weights, gen, normalizer, skeleton, p_uncond, null)
    if not torch.isfinite(total) or not all(torch.isfinite(v) for v in terms.values()):
        raise NonFiniteLoss(f"non-finite loss: {float(total)}")
    total.backward()
    losses = {k: float(v.detach()) for k, v in terms.items()}
    losses["total"] = float(total.detach())
    grads = {name: p.grad for name, p in model.named_parameters()}
    return losses, grads
