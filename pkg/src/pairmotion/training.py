"""Denoiser training loop: batching, warm-up plus cosine learning rate, AdamW."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import Batch, NoiseSchedule, compute_loss, train_step
from .errors import BadArgument, DatasetTooSmall
from .losses import LossWeights
from .motion import InteractionSample, Skeleton
from .normalize import Normalizer
from .text import TokenizedPrompt, stack_prompts


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 5e-5
    warmup: int = 1000
    weight_decay: float = 1e-2
    p_uncond: float = 0.1
    max_frames: int = 128
    grad_clip: float | None = 1.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.warmup < 0:
            raise BadArgument("invalid training configuration")
        if not 0 <= self.p_uncond <= 1:
            raise BadArgument("p_uncond must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


FINETUNE_LR = 5e-6


def lr_factor(step: int, warmup: int, total: int) -> float:
    """Linear warm-up to 1, then cosine decay to 0 at ``total``."""
    if step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    return 0.5 * (1 + math.cos(math.pi * min(step - warmup, total - warmup) / (total - warmup)))


def make_batch(samples: Sequence[InteractionSample], prompts: Sequence[TokenizedPrompt], normalizer: Normalizer,
               rng: np.random.Generator, max_frames: int = 128, dtype=torch.float32) -> Batch:
    """Normalize, randomly crop to ``max_frames`` and zero-pad to the longest item."""
    if len(samples) != len(prompts):
        raise BadArgument("one prompt per sample is required")
    arrays = []
    for s in samples:
        arr = normalizer.normalize(s.to_array())
        if arr.shape[1] > max_frames:
            start = int(rng.integers(0, arr.shape[1] - max_frames + 1))
            arr = arr[:, start:start + max_frames]
        arrays.append(arr)
    frames = max(a.shape[1] for a in arrays)
    x0 = np.zeros((len(arrays), 2, frames, normalizer.width))
    mask = np.zeros((len(arrays), frames), dtype=bool)
    for i, a in enumerate(arrays):
        x0[i, :, :a.shape[1]] = a
        mask[i, :a.shape[1]] = True
    emb, tmask = stack_prompts(prompts)
    return Batch(torch.as_tensor(x0, dtype=dtype), torch.as_tensor(mask), torch.as_tensor(emb, dtype=dtype),
                 torch.as_tensor(tmask))


def pick_prompts(prompt_lists, idx, rng: np.random.Generator):
    return [prompt_lists[i][int(rng.integers(len(prompt_lists[i])))] for i in idx]


@torch.no_grad()
def evaluation_loss(model, batch: Batch, schedule: NoiseSchedule, weights: LossWeights, normalizer: Normalizer,
                    skeleton: Skeleton, seed: int = 0, repeats: int = 4) -> float:
    """Total loss averaged over ``repeats`` fixed draws of step and noise, prompts always kept."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    values = [float(compute_loss(model, batch, schedule, weights, gen, normalizer, skeleton, 0.0)[0])
              for _ in range(repeats)]
    model.train(was_training)
    return float(np.mean(values))


def train_denoiser(model, samples: Sequence[InteractionSample], prompt_lists, normalizer: Normalizer,
                   skeleton: Skeleton, config: TrainConfig, schedule: NoiseSchedule,
                   weights: LossWeights = LossWeights(), log: Callable[[dict], None] | None = None,
                   eval_batch: Batch | None = None) -> list[dict]:
    """Train in place and return the logged history.

    ``prompt_lists[i]`` holds the embedded captions of ``samples[i]``; one is
    drawn per use.  When ``eval_batch`` is given its fixed-seed loss is logged
    alongside the training loss.
    """
    if len(samples) < 1:
        raise DatasetTooSmall("no training samples")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, config.warmup, config.steps))
    dtype = next(model.parameters()).dtype
    model.train()
    history = []
    start = time.perf_counter()

    def record(step, losses):
        entry = {"step": step, "lr": opt.param_groups[0]["lr"], **losses,
                 "elapsed_s": round(time.perf_counter() - start, 3)}
        if eval_batch is not None:
            entry["eval_total"] = evaluation_loss(model, eval_batch, schedule, weights, normalizer, skeleton)
        history.append(entry)
        if log:
            log(entry)

    for step in range(config.steps):
        idx = rng.choice(len(samples), size=min(config.batch_size, len(samples)), replace=False)
        batch = make_batch([samples[i] for i in idx], pick_prompts(prompt_lists, idx, rng), normalizer, rng,
                           config.max_frames, dtype)
        losses, _ = train_step(model, batch, schedule, weights, gen, normalizer, skeleton, config.p_uncond)
        # logged values describe the parameters before this step's update
        if step % config.log_every == 0 or step + 1 == config.steps:
            record(step, losses)
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        sched.step()
    model.eval()
    return history
