"""Run configuration: one YAML file holding every knob, validated when loaded."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .compose import FilterConfig, LLMConfig
from .denoiser import ModelConfig
from .diffusion import SamplerConfig
from .errors import BadArgument
from .evaluator import EvaluatorConfig, EvaluatorTrainConfig
from .losses import LossWeights
from .training import FINETUNE_LR, TrainConfig


@dataclass
class DiffusionConfig:
    steps: int = 1000
    cosine_s: float = 0.008


@dataclass
class TextConfig:
    backend: str = "stub"        # stub | external
    dim: int = 64
    command: str | None = None   # external encoder command line


@dataclass
class DataConfig:
    root: str = "runs/toy"
    n_samples: int = 256
    test: int = 32
    heldout: int = 32


@dataclass
class ComposeConfig:
    theme: str = "greeting"
    tags: list = field(default_factory=lambda: ["friendly"])
    examples: list = field(default_factory=list)
    m: int = 8
    min_frames: int = 32
    max_frames: int = 76
    annulus: str = "0.35"        # key into RunConfig.annuli


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune_lr: float = FINETUNE_LR
    # the reaction generator is shallower than the interaction model
    reaction_block_pairs: int = 8
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    evaluator_train: EvaluatorTrainConfig = field(default_factory=EvaluatorTrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    annuli: dict = field(default_factory=lambda: {"0.25": [0.25, 0.6], "0.30": [0.30, 0.6], "0.35": [0.35, 0.6]})
    text: TextConfig = field(default_factory=TextConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    data: DataConfig = field(default_factory=DataConfig)
    compose: ComposeConfig = field(default_factory=ComposeConfig)

    def validate(self) -> "RunConfig":
        if self.model.text_width != self.text.dim or self.evaluator.text_width != self.text.dim:
            raise BadArgument("model.text_width and evaluator.text_width must equal text.dim")
        if self.model.channel_width != self.evaluator.channel_width:
            raise BadArgument("model and evaluator disagree on channel_width")
        if self.model.diffusion_steps != self.diffusion.steps:
            raise BadArgument("model.diffusion_steps must equal diffusion.steps")
        self.sampler.validate(self.diffusion.steps)
        if self.text.backend not in ("stub", "external"):
            raise BadArgument("text.backend must be 'stub' or 'external'")
        for name, (lo, hi) in self.annuli.items():
            FilterConfig(r_min=lo, r_max=hi)
        if self.compose.annulus not in self.annuli:
            raise BadArgument(f"compose.annulus {self.compose.annulus!r} is not a configured annulus")
        if self.reaction_block_pairs < 1:
            raise BadArgument("reaction_block_pairs must be >= 1")
        if self.finetune_lr <= 0:
            raise BadArgument("finetune_lr must be > 0")
        return self

    def filter_for(self, annulus: str | None = None) -> FilterConfig:
        lo, hi = self.annuli[annulus or self.compose.annulus]
        return dataclasses.replace(self.filter, r_min=lo, r_max=hi)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, path=""):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise BadArgument(f"config section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise BadArgument(f"unknown config keys in {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if known[name].default is dataclasses.MISSING else known[name].default
        sub = type(default) if dataclasses.is_dataclass(default) else None
        kwargs[name] = _build(sub, value, f"{path}.{name}".strip(".")) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise BadArgument(f"bad config section {path or '<root>'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_config(path=None) -> RunConfig:
    """Read a YAML run configuration; ``None`` loads the packaged defaults."""
    if path is None:
        text = resources.files("pairmotion").joinpath("configs/default.yaml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return config_from_dict(yaml.safe_load(text) or {})


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
