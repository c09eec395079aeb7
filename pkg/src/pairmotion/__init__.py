"""Text-conditioned two-person motion generation, evaluation and synthetic-data composition."""
from .errors import *  # noqa: F401,F403
from .motion import InteractionSample, MotionSequence, Provenance, Skeleton, default_skeleton
from .text import StubEmbedder, TokenizedPrompt, embed_words, tokenize
from .denoiser import InteractionDenoiser, ModelConfig, denoise
from .diffusion import SamplerConfig, cosine_schedule, ddim_sample, reaction_sample
from .losses import LossWeights, adaptive_interaction_loss, total_loss

__version__ = "0.1.0"
