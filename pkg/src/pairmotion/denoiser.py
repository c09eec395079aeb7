"""Dual-agent transformer denoiser with word-level text conditioning.

One *round* applies, to each agent, a word-conditioning block (motion tokens
cross-attend to the per-token text embeddings) followed by an interaction
block (self-attention, cross-attention to the partner, feed-forward).  All
sub-steps are residual and timestep-modulated through AdaLN.  The same
weights serve both agents.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadArgument, OutOfRange, ShapeMismatch
from .io import load_container, save_container
from .text import TokenizedPrompt, stack_prompts

SCHEMES = ("parallel", "alternating")


@dataclass
class ModelConfig:
    block_pairs: int = 12
    model_width: int = 256
    head_count: int = 8
    text_width: int = 64
    channel_width: int = 262
    max_frames: int = 128
    update_scheme: str = "parallel"
    ffn_mult: int = 2
    diffusion_steps: int = 1000
    # trained with clean agent-1 positions/velocities (reaction generator)
    reaction: bool = False

    def __post_init__(self):
        if self.block_pairs < 1:
            raise BadArgument("block_pairs must be >= 1")
        if self.model_width % self.head_count:
            raise BadArgument("model_width must be divisible by head_count")
        if self.update_scheme not in SCHEMES:
            raise BadArgument(f"update_scheme must be one of {SCHEMES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def timestep_embedding(t, width: int, steps: int = 1000) -> torch.Tensor:
    """Sinusoidal features of integer diffusion steps, shape ``(..., width)``."""
    t = torch.as_tensor(t)
    if torch.any(t < 0) or torch.any(t >= steps):
        raise OutOfRange(f"timestep outside [0, {steps})")
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if width % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def sinusoidal_positions(frames: int, width: int) -> torch.Tensor:
    pos = torch.arange(frames, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float64) * (-math.log(10000.0) / width))
    pe = torch.zeros(frames, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : width // 2]
    return pe


def attention(q, k, v, heads: int, key_mask=None, return_weights: bool = False):
    """Multi-head scaled dot-product attention; ``key_mask`` is True where keys are valid."""
    b, s, w = q.shape
    dh = w // heads
    q = q.view(b, s, heads, dh).transpose(1, 2)
    k = k.view(b, k.shape[1], heads, dh).transpose(1, 2)
    v = v.view(b, v.shape[1], heads, dh).transpose(1, 2)
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(b, s, w)
    return (out, weights) if return_weights else out


class AdaLN(nn.Module):
    """Layer norm whose shift and scale are produced from the timestep embedding."""

    def __init__(self, width: int, cond_width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.producer = nn.Linear(cond_width, 2 * width)

    def forward(self, x, cond):
        if x.shape[-1] != self.norm.normalized_shape[0]:
            raise ShapeMismatch(f"feature width {x.shape[-1]} != {self.norm.normalized_shape[0]}")
        shift, scale = self.producer(F.silu(cond)).chunk(2, dim=-1)
        return self.norm(x) * (1 + scale[:, None]) + shift[:, None]


def adaln_modulate(features, t_emb, module: AdaLN):
    """Apply ``module`` to ``(S, W)`` or ``(B, S, W)`` features with a matching ``t_emb``."""
    squeeze = features.dim() == 2
    if squeeze:
        features, t_emb = features[None], t_emb.reshape(1, -1)
    out = module(features, t_emb)
    return out[0] if squeeze else out


class Attend(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, query_src, kv_src, key_mask=None):
        return self.out(attention(self.q(query_src), self.k(kv_src), self.v(kv_src), self.heads, key_mask))


class WordConditioningBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.motion_norm = AdaLN(width, width)
        self.text_norm = AdaLN(width, width)
        self.attn = Attend(width, heads)

    def forward(self, h, text, text_mask, temb):
        if h.shape[-1] != text.shape[-1]:
            raise ShapeMismatch("motion and text features must share the model width")
        return h + self.attn(self.motion_norm(h, temb), self.text_norm(text, temb), text_mask)


class InteractionBlock(nn.Module):
    def __init__(self, width: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.self_norm = AdaLN(width, width)
        self.self_attn = Attend(width, heads)
        self.cross_norm = AdaLN(width, width)
        self.partner_norm = AdaLN(width, width)
        self.cross_attn = Attend(width, heads)
        self.ffn_norm = AdaLN(width, width)
        self.ffn_in = nn.Linear(width, ffn_mult * width)
        self.ffn_out = nn.Linear(ffn_mult * width, width)

    def forward(self, h, partner, temb, frame_mask=None):
        if h.shape != partner.shape:
            raise ShapeMismatch(f"self {tuple(h.shape)} and partner {tuple(partner.shape)} differ")
        a = self.self_norm(h, temb)
        h = h + self.self_attn(a, a, frame_mask)
        h = h + self.cross_attn(self.cross_norm(h, temb), self.partner_norm(partner, temb), frame_mask)
        return h + self.ffn_out(F.gelu(self.ffn_in(self.ffn_norm(h, temb))))


class Round(nn.Module):
    def __init__(self, width, heads, ffn_mult):
        super().__init__()
        self.word = WordConditioningBlock(width, heads)
        self.interact = InteractionBlock(width, heads, ffn_mult)

    def forward(self, h, partner, text, text_mask, temb, frame_mask=None):
        return self.interact(self.word(h, text, text_mask, temb), partner, temb, frame_mask)


class InteractionDenoiser(nn.Module):
    """Predicts both agents' clean representations from their noised versions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.model_width
        self.input_proj = nn.Linear(config.channel_width, w)
        self.text_proj = nn.Linear(config.text_width, w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.rounds = nn.ModuleList(Round(w, config.head_count, config.ffn_mult) for _ in range(config.block_pairs))
        self.output_proj = nn.Linear(w, config.channel_width)
        self.register_buffer("positions", sinusoidal_positions(config.max_frames, w).float(), persistent=False)

    def embed_timestep(self, t):
        feats = timestep_embedding(t, self.config.model_width, self.config.diffusion_steps)
        return self.time_mlp(feats.to(self.input_proj.weight.dtype))

    def forward(self, x1, x2, t, text, text_mask, frame_mask=None, first_agent: int = 0):
        cfg = self.config
        if x1.shape != x2.shape or x1.dim() != 3 or x1.shape[-1] != cfg.channel_width:
            raise ShapeMismatch(f"agents must be (B, T, {cfg.channel_width}) and equal; got {tuple(x1.shape)}, {tuple(x2.shape)}")
        b, frames, _ = x1.shape
        if frames > cfg.max_frames:
            raise ShapeMismatch(f"{frames} frames exceeds max_frames={cfg.max_frames}")
        t = torch.as_tensor(t).reshape(-1).expand(b)
        temb = self.embed_timestep(t)
        pe = self.positions[:frames].to(x1.dtype)
        h1 = self.input_proj(x1) + pe
        h2 = self.input_proj(x2) + pe
        txt = self.text_proj(text)

        if cfg.update_scheme == "parallel":
            # both agents advance from the partner's pre-round state; batched so the ops are identical
            h = torch.cat([h1, h2])
            temb2, txt2, tmask2 = torch.cat([temb, temb]), torch.cat([txt, txt]), torch.cat([text_mask, text_mask])
            fmask2 = None if frame_mask is None else torch.cat([frame_mask, frame_mask])
            for rnd in self.rounds:
                partner = torch.cat([h[b:], h[:b]])
                h = rnd(h, partner, txt2, tmask2, temb2, fmask2)
            h1, h2 = h[:b], h[b:]
        else:
            hs = [h1, h2]
            order = (0, 1) if first_agent == 0 else (1, 0)
            for rnd in self.rounds:
                for i in order:
                    hs[i] = rnd(hs[i], hs[1 - i], txt, text_mask, temb, frame_mask)
            h1, h2 = hs
        return self.output_proj(h1), self.output_proj(h2)


def prompt_batch(prompts, dtype=torch.float32, device=None):
    emb, mask = stack_prompts(prompts)
    return torch.as_tensor(emb, dtype=dtype, device=device), torch.as_tensor(mask, device=device)


def denoise(model: InteractionDenoiser, x1_t, x2_t, t: int, prompt: TokenizedPrompt, first_agent: int = 0):
    """Single-sample convenience wrapper: ``(T, C)`` arrays in, ``(T, C)`` tensors out."""
    dtype = model.input_proj.weight.dtype
    x1 = torch.as_tensor(x1_t, dtype=dtype)[None]
    x2 = torch.as_tensor(x2_t, dtype=dtype)[None]
    text, mask = prompt_batch([prompt], dtype)
    y1, y2 = model(x1, x2, torch.tensor([t]), text, mask, first_agent=first_agent)
    return y1[0], y2[0]


def save_model(path, model: InteractionDenoiser, extra_arrays: dict | None = None, extra_meta: dict | None = None):
    tensors = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        tensors[f"extra/{k}"] = np.asarray(v, dtype=np.float32)
    save_container(path, tensors, {"kind": "denoiser", "config": model.config.to_dict(), **(extra_meta or {})})


def load_model(path):
    """Returns ``(model, extra_arrays, manifest)``."""
    tensors, manifest = load_container(path)
    if manifest.get("kind") != "denoiser":
        raise BadArgument(f"{path} is not a denoiser checkpoint")
    model = InteractionDenoiser(ModelConfig.from_dict(manifest["config"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("extra/")}
    model.load_state_dict(state)
    extras = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return model, extras, manifest
