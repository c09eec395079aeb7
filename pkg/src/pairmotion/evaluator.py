"""Contrastive text/motion evaluator producing unit-norm 512-d embeddings."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import attention, sinusoidal_positions
from .errors import BadArgument, DatasetTooSmall, ShapeMismatch
from .io import load_container, save_container
from .motion import InteractionSample
from .normalize import Normalizer
from .text import TokenizedPrompt, stack_prompts

HELD_OUT_SIZE = 500


@dataclass
class EvaluatorConfig:
    width: int = 128
    heads: int = 4
    layers: int = 2
    text_width: int = 64
    channel_width: int = 262
    embed_dim: int = 512
    max_frames: int = 256
    init_temperature: float = 0.07

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class JointEmbedding:
    vector: np.ndarray
    modality: str

    def __post_init__(self):
        if self.modality not in ("text", "motion"):
            raise BadArgument(f"unknown modality {self.modality!r}")


class EncoderLayer(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x, mask):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        x = x + self.proj(attention(q, k, v, self.heads, mask))
        return x + self.ffn(self.norm2(x))


class SequenceEncoder(nn.Module):
    """Transformer over a masked token sequence, mean-pooled to a unit vector."""

    def __init__(self, in_width, width, heads, layers, out_width, max_len):
        super().__init__()
        self.in_proj = nn.Linear(in_width, width)
        self.layers = nn.ModuleList(EncoderLayer(width, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, out_width)
        self.register_buffer("pe", sinusoidal_positions(max_len, width).float(), persistent=False)

    def forward(self, x, mask):
        h = self.in_proj(x) + self.pe[: x.shape[1]].to(x.dtype)
        for layer in self.layers:
            h = layer(h, mask)
        m = mask.to(h.dtype)[..., None]
        pooled = (self.norm(h) * m).sum(1) / m.sum(1).clamp_min(1.0)
        return F.normalize(self.out_proj(pooled), dim=-1)


class Evaluator(nn.Module):
    def __init__(self, config: EvaluatorConfig, normalizer: Normalizer | None = None):
        super().__init__()
        self.config = config
        c2 = 2 * config.channel_width
        self.motion_encoder = SequenceEncoder(c2, config.width, config.heads, config.layers, config.embed_dim,
                                              config.max_frames)
        self.text_head = SequenceEncoder(config.text_width, config.width, config.heads, config.layers,
                                         config.embed_dim, 77)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / config.init_temperature)))
        normalizer = normalizer or Normalizer.identity(c2)
        self.register_buffer("motion_mean", torch.as_tensor(normalizer.mean, dtype=torch.float32))
        self.register_buffer("motion_std", torch.as_tensor(normalizer.std, dtype=torch.float32))
        self.trained = False

    @property
    def temperature(self):
        return torch.exp(-self.logit_scale.clamp(0.0, math.log(100.0)))

    def motion_forward(self, x, mask):
        x = (x - self.motion_mean.to(x.dtype)) / self.motion_std.to(x.dtype)
        return self.motion_encoder(x, mask)

    def text_forward(self, emb, mask):
        return self.text_head(emb, mask)


def motion_batch(samples, dtype=torch.float32):
    """Pad interactions to a common length: ``(B, T, 2C)`` features and a ``(B, T)`` frame mask."""
    arrays = [np.concatenate(list(s.to_array()), axis=-1) for s in samples]
    frames = max(a.shape[0] for a in arrays)
    x = np.zeros((len(arrays), frames, arrays[0].shape[-1]))
    mask = np.zeros((len(arrays), frames), dtype=bool)
    for i, a in enumerate(arrays):
        x[i, : len(a)] = a
        mask[i, : len(a)] = True
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(mask)


def _dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def encode_motions(samples, evaluator: Evaluator, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch_size):
        x, m = motion_batch(samples[i:i + batch_size], _dtype(evaluator))
        if x.shape[-1] != 2 * evaluator.config.channel_width:
            raise ShapeMismatch(f"evaluator expects {evaluator.config.channel_width} channels per agent")
        out.append(evaluator.motion_forward(x, m).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, evaluator.config.embed_dim))


@torch.no_grad()
def encode_texts(prompts, evaluator: Evaluator, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(prompts), batch_size):
        emb, mask = stack_prompts(prompts[i:i + batch_size])
        out.append(evaluator.text_forward(torch.as_tensor(emb, dtype=_dtype(evaluator)),
                                          torch.as_tensor(mask)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, evaluator.config.embed_dim))


def encode_motion(sample: InteractionSample, evaluator: Evaluator) -> JointEmbedding:
    return JointEmbedding(encode_motions([sample], evaluator)[0], "motion")


def encode_text(prompt: TokenizedPrompt, evaluator: Evaluator) -> JointEmbedding:
    return JointEmbedding(encode_texts([prompt], evaluator)[0], "text")


def contrastive_loss(text_embs, motion_embs, temperature):
    """Symmetric cross-entropy over cosine-similarity logits with matches on the diagonal."""
    as_numpy = not isinstance(text_embs, torch.Tensor)
    text = torch.as_tensor(np.asarray(text_embs) if as_numpy else text_embs)
    motion = torch.as_tensor(np.asarray(motion_embs) if as_numpy else motion_embs)
    if text.shape != motion.shape or text.dim() != 2:
        raise ShapeMismatch("text and motion embeddings must both be (B, D)")
    if text.shape[0] < 2:
        raise DatasetTooSmall("contrastive loss needs B >= 2")
    temperature = torch.as_tensor(temperature, dtype=text.dtype)
    if not torch.all(temperature > 0):
        raise BadArgument("temperature must be > 0")
    logits = text @ motion.T / temperature
    labels = torch.arange(text.shape[0])
    loss = (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)) / 2
    return float(loss) if as_numpy else loss


@dataclass
class EvaluatorTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-2
    seed: int = 0


@dataclass
class TrainedEvaluator:
    evaluator: Evaluator
    bank: np.ndarray
    train_indices: np.ndarray
    heldout_indices: np.ndarray
    history: list = field(default_factory=list)


def split_held_out(n: int, held_out=None, seed: int = 0):
    """Seeded ``(train_indices, heldout_indices)``; 500 held out when the set is large enough."""
    if held_out is None:
        size = HELD_OUT_SIZE if n >= 2 * HELD_OUT_SIZE else max(1, n // 8)
    elif isinstance(held_out, float):
        size = int(round(held_out * n))
    else:
        size = int(held_out)
    if not 1 <= size < n:
        raise DatasetTooSmall(f"dataset of {n} cannot hold out {size} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[size:]), np.sort(perm[:size])


def train_evaluator(samples, prompts, config: EvaluatorConfig, train_config: EvaluatorTrainConfig = EvaluatorTrainConfig(),
                    held_out=None, heldout_indices=None, log=None) -> TrainedEvaluator:
    """Fit both encoders on all but the held-out samples and embed the held-out motions as the reference bank.

    ``prompts[i]`` holds the embedded captions of ``samples[i]``; one caption per
    sample is drawn each epoch.  ``held_out`` is a count or a fraction
    (default: 500 samples, or all but one for smaller sets).
    """
    n = len(samples)
    if heldout_indices is not None:
        heldout_indices = np.sort(np.asarray(heldout_indices, dtype=np.int64))
        train_idx = np.setdiff1d(np.arange(n), heldout_indices)
        if len(train_idx) == 0:
            raise DatasetTooSmall("no training samples left")
    else:
        train_idx, heldout_indices = split_held_out(n, held_out, train_config.seed)
    if len(train_idx) < 2:
        raise DatasetTooSmall("need at least two training samples")

    torch.manual_seed(train_config.seed)
    arrays = [np.concatenate(list(samples[i].to_array()), axis=-1) for i in train_idx]
    evaluator = Evaluator(config, Normalizer.fit(arrays))
    opt = torch.optim.AdamW(evaluator.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)
    rng = np.random.default_rng(train_config.seed)
    history = []
    for epoch in range(train_config.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(order) - 1, train_config.batch_size):
            idx = order[s:s + train_config.batch_size]
            if len(idx) < 2:
                continue
            x, m = motion_batch([samples[i] for i in idx])
            chosen = [prompts[i][rng.integers(len(prompts[i]))] for i in idx]
            emb, tmask = stack_prompts(chosen)
            t_emb = evaluator.text_forward(torch.as_tensor(emb), torch.as_tensor(tmask))
            m_emb = evaluator.motion_forward(x, m)
            loss = contrastive_loss(t_emb, m_emb, evaluator.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
        if log:
            log({"epoch": epoch, "contrastive_loss": history[-1], "temperature": float(evaluator.temperature.detach())})
    evaluator.trained = True
    evaluator.eval()
    bank = encode_motions([samples[i] for i in heldout_indices], evaluator)
    return TrainedEvaluator(evaluator, bank, train_idx, heldout_indices, history)


def save_evaluator(path, evaluator: Evaluator, bank: np.ndarray | None = None, extra_meta: dict | None = None):
    tensors = {k: v.detach().cpu().float().numpy() for k, v in evaluator.state_dict().items()}
    if bank is not None:
        tensors["extra/bank"] = np.asarray(bank, dtype=np.float32)
    save_container(path, tensors, {"kind": "evaluator", "config": evaluator.config.to_dict(),
                                   "trained": evaluator.trained, **(extra_meta or {})})


def load_evaluator(path):
    """Returns ``(evaluator, bank or None, manifest)``."""
    tensors, manifest = load_container(path)
    if manifest.get("kind") != "evaluator":
        raise BadArgument(f"{path} is not an evaluator checkpoint")
    ev = Evaluator(EvaluatorConfig.from_dict(manifest["config"]))
    ev.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("extra/")})
    ev.trained = bool(manifest.get("trained", False))
    ev.eval()
    return ev, tensors.get("extra/bank"), manifest
