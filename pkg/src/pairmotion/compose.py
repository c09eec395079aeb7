"""Synthesis by composition: LLM prompts, role decomposition, length estimation,
reaction-based composition and the two-stage (semantic + annulus) filter."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffusion import NoiseSchedule, SamplerConfig, reaction_sample
from .errors import BackendUnavailable, BadArgument, MalformedResponse, NotTrained, SourceUnavailable
from .evaluator import Evaluator, encode_motions, encode_texts
from .io import read_jsonl, write_jsonl
from .motion import InteractionSample, MotionSequence, Provenance
from .normalize import Normalizer
from .text import EmbeddingBackend, TokenizedPrompt, embed_words, tokenize

log = logging.getLogger(__name__)

INTERACTION_WORDS = 25
PERSON_WORDS = 15

INTERACTION_TEMPLATE = """You write compact, vivid descriptions of **two-person interactions**.

Each output sentence MUST:
• mention exactly two unnamed people (“one person… the other person…”),
• focus on body / arms / legs (ignore faces / fingers / appearance),
• be <=25 words,
• clearly match the given *Theme* and *Tags*,
• be entirely different from the examples.

Theme: {theme}
Tags : {tags}
Reference examples ({k}):
{examples}

Now craft {m} brand-new descriptions.
Return **only** a JSON array of strings.
"""

DECOMPOSITION_TEMPLATE = """Given the following description of a two-person interaction:

{two-person text}

Independently describe the motion of each person involved, using only information
implied by the full interaction. Do not mention or refer to the other person in
either description. Focus only on body, arms, and legs — ignore facial
expressions, fingers, or appearance.

Use "the person" to refer to each. Assume shared context (e.g., dancing,
greeting, arguing), but isolate each description.

Output JSON in this exact format:
    {{"1": {{"person1": "{description1}", "person2": "{description2}"}}}}

Each description must be one sentence, <=15 words, specific, and motion-focused
with relevant context.
"""


def _fill(template: str, values: dict[str, str]) -> str:
    # plain replacement: the decomposition template carries literal braces
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


def build_interaction_prompt(theme: str, tags: Sequence[str], examples: Sequence[str], m: int) -> str:
    if m < 1:
        raise BadArgument("m must be >= 1")
    if not examples:
        raise BadArgument("at least one reference example is required")
    if not theme.strip():
        raise BadArgument("theme is empty")
    return _fill(INTERACTION_TEMPLATE, {
        "theme": theme.strip(),
        "tags": ", ".join(t.strip() for t in tags),
        "k": str(len(examples)),
        "examples": "\n".join(e.strip() for e in examples),
        "m": str(m),
    })


def build_decomposition_prompt(two_person_text: str) -> str:
    if not two_person_text or not two_person_text.strip():
        raise BadArgument("two-person text is empty")
    return _fill(DECOMPOSITION_TEMPLATE, {"two-person text": two_person_text.strip()})


def _word_count(text: str) -> int:
    return len(text.split())


def _strip_fence(raw: str) -> str:
    s = raw.strip()
    if s.startswith("```"):
        s = s.split("\n", 1)[1] if "\n" in s else ""
        if s.rstrip().endswith("```"):
            s = s.rstrip()[:-3]
    return s.strip()


def parse_llm_descriptions(raw: str, expected: str = "array_of_strings"):
    """Strictly parse an LLM reply: a JSON array of strings, or the ``person1``/``person2`` pair object."""
    try:
        data = json.loads(_strip_fence(raw))
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedResponse(f"response is not JSON: {exc}") from exc
    if expected == "array_of_strings":
        if not isinstance(data, list) or not data or not all(isinstance(s, str) for s in data):
            raise MalformedResponse("expected a non-empty JSON array of strings")
        out = [s.strip() for s in data]
        if not all(out):
            raise MalformedResponse("empty description in response")
        for s in out:
            if _word_count(s) > INTERACTION_WORDS:
                log.warning("description exceeds %d words: %r", INTERACTION_WORDS, s)
        return out
    if expected == "person_pair":
        entry = data.get("1") if isinstance(data, dict) else None
        if not isinstance(entry, dict) or not all(isinstance(entry.get(k), str) for k in ("person1", "person2")):
            raise MalformedResponse('expected {"1": {"person1": ..., "person2": ...}}')
        pair = entry["person1"].strip(), entry["person2"].strip()
        if not all(pair):
            raise MalformedResponse("empty single-person description")
        for s in pair:
            if _word_count(s) > PERSON_WORDS:
                log.warning("single-person description exceeds %d words: %r", PERSON_WORDS, s)
        return pair
    raise BadArgument(f"unknown expected shape {expected!r}")


@dataclass
class PromptBundle:
    theme: str
    tags: list[str]
    two_person_text: str
    person1_text: str
    person2_text: str

    def __post_init__(self):
        for name in ("two_person_text", "person1_text", "person2_text"):
            value = getattr(self, name).strip()
            if not value:
                raise BadArgument(f"{name} is empty")
            setattr(self, name, value)
        for text, budget in ((self.two_person_text, INTERACTION_WORDS), (self.person1_text, PERSON_WORDS),
                             (self.person2_text, PERSON_WORDS)):
            if _word_count(text) > budget:
                log.warning("text exceeds its %d-word budget: %r", budget, text)


# ----------------------------------------------------------------- LLM client

ENDPOINT_ENV = "PAIRMOTION_LLM_ENDPOINT"
API_KEY_ENV = "PAIRMOTION_LLM_API_KEY"


@dataclass
class LLMConfig:
    endpoint: str | None = None
    model: str = "deepseek-chat"
    max_tokens: int = 512
    concurrency: int = 4
    timeout: float = 60.0
    offline: bool = False
    fixtures: str | None = None


class LLMClient:
    """Chat-completion client with a fixture recorder and an offline replay mode.

    Fixtures are JSON lines ``{prompt, response, timestamp}``.  Offline, the
    most recent recorded response for an identical prompt is returned.
    """

    def __init__(self, config: LLMConfig = LLMConfig()):
        self.config = config
        self._lock = threading.Lock()
        self._replay: dict[str, str] = {}
        if config.offline:
            if not config.fixtures or not Path(config.fixtures).exists():
                raise BackendUnavailable("offline mode needs an existing fixtures file")
            for rec in read_jsonl(config.fixtures):
                self._replay[rec["prompt"]] = rec["response"]

    def _post(self, prompt: str) -> str:
        endpoint = self.config.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise BackendUnavailable(f"no LLM endpoint configured (set {ENDPOINT_ENV})")
        body = json.dumps({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": self.config.max_tokens,
        }).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise BackendUnavailable(f"LLM request failed: {exc}") from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse("unexpected completion payload") from exc

    def complete(self, prompt: str) -> str:
        if self.config.offline:
            try:
                return self._replay[prompt]
            except KeyError:
                raise BackendUnavailable("no recorded response for this prompt") from None
        response = self._post(prompt)
        if self.config.fixtures:
            with self._lock:
                write_jsonl(self.config.fixtures, [{"prompt": prompt, "response": response,
                                                    "timestamp": time.time()}], append=True)
        return response

    def complete_many(self, prompts: Sequence[str]) -> list[str]:
        with ThreadPoolExecutor(max_workers=max(1, self.config.concurrency)) as pool:
            return list(pool.map(self.complete, prompts))


def generate_bundles(client: LLMClient, theme: str, tags: Sequence[str], examples: Sequence[str], m: int) -> list[PromptBundle]:
    """Ask for ``m`` interaction texts, then split each into the two single-person roles."""
    texts = parse_llm_descriptions(client.complete(build_interaction_prompt(theme, tags, examples, m)))
    replies = client.complete_many([build_decomposition_prompt(t) for t in texts])
    bundles = []
    for text, reply in zip(texts, replies):
        p1, p2 = parse_llm_descriptions(reply, "person_pair")
        bundles.append(PromptBundle(theme, list(tags), text, p1, p2))
    return bundles


# ------------------------------------------------------------ length model

@dataclass
class LengthEstimator:
    """Ridge regression from caption features to frame count."""

    min_frames: int = 16
    max_frames: int = 128
    l2: float = 1e-2
    weights: np.ndarray | None = None

    @staticmethod
    def features(prompt: TokenizedPrompt) -> np.ndarray:
        if prompt.embeddings is None:
            raise BadArgument("prompt must be embedded")
        inner = prompt.embeddings[1:prompt.length - 1].astype(np.float64)
        mean = inner.mean(0) if len(inner) else np.zeros(prompt.embeddings.shape[-1])
        return np.concatenate([mean, [prompt.length - 2, 1.0]])

    def fit(self, prompts: Sequence[TokenizedPrompt], frames: Sequence[int]) -> "LengthEstimator":
        x = np.stack([self.features(p) for p in prompts])
        y = np.asarray(frames, dtype=np.float64)
        reg = self.l2 * np.eye(x.shape[1])
        reg[-1, -1] = 0.0
        self.weights = np.linalg.solve(x.T @ x + reg, x.T @ y)
        return self

    def predict(self, prompt: TokenizedPrompt) -> int:
        if self.weights is None:
            raise NotTrained("length estimator has not been fitted")
        value = float(self.features(prompt) @ self.weights)
        return int(np.clip(round(value), self.min_frames, self.max_frames))

    def to_dict(self) -> dict:
        return {"min_frames": self.min_frames, "max_frames": self.max_frames, "l2": self.l2,
                "weights": None if self.weights is None else self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LengthEstimator":
        w = d.get("weights")
        return cls(d["min_frames"], d["max_frames"], d["l2"], None if w is None else np.asarray(w))


def estimate_length(prompt: TokenizedPrompt, estimator: LengthEstimator) -> int:
    return estimator.predict(prompt)


# ------------------------------------------------------------- composition

SingleSource = Callable[[str, int, int], MotionSequence]


def compose_interaction(bundle: PromptBundle, single_person_source: SingleSource | None, reaction_model,
                        sampler: SamplerConfig, schedule: NoiseSchedule, backend: EmbeddingBackend,
                        estimator: LengthEstimator | None = None, normalizer: Normalizer | None = None,
                        frames: int | None = None, seed: int = 0) -> InteractionSample:
    """Agent 1 from the single-person source, agent 2 from the reaction generator."""
    if single_person_source is None:
        raise SourceUnavailable("no single-person motion source configured")
    prompt = embed_words(tokenize(bundle.two_person_text), backend)
    if frames is None:
        if estimator is None:
            raise NotTrained("either a frame count or a fitted length estimator is required")
        frames = estimator.predict(prompt)
    max_frames = getattr(getattr(reaction_model, "config", None), "max_frames", frames)
    frames = min(frames, max_frames)
    try:
        agent1 = single_person_source(bundle.person1_text, frames, seed)
    except SourceUnavailable:
        raise
    except Exception as exc:
        raise SourceUnavailable(f"single-person source failed: {exc}") from exc
    sampled = reaction_sample(reaction_model, agent1.positions, prompt, dataclasses.replace(sampler, seed=seed),
                              schedule, normalizer, fps=agent1.fps)
    meta = {"theme": bundle.theme, "tags": list(bundle.tags), "person1_text": bundle.person1_text,
            "person2_text": bundle.person2_text}
    return InteractionSample((agent1, sampled.agents[1]), [bundle.two_person_text], Provenance.SYNTHETIC_RAW, meta)


# ----------------------------------------------------------------- filtering

FILTER_MODES = ("mean_knn", "heldout_knn")


@dataclass
class FilterConfig:
    cosine_threshold: float = 0.58
    k_neighbors: int = 20
    r_min: float = 0.35
    r_max: float = 0.6
    mode: str = "mean_knn"

    def __post_init__(self):
        # r_min = 0 is accepted so that an all-pass annulus (0, inf) can be expressed
        if not 0 <= self.r_min < self.r_max:
            raise BadArgument("annulus must satisfy 0 <= r_min < r_max")
        if self.k_neighbors < 1:
            raise BadArgument("k_neighbors must be >= 1")
        if not -1 <= self.cosine_threshold < 1:
            raise BadArgument("cosine_threshold must lie in [-1, 1)")
        if self.mode not in FILTER_MODES:
            raise BadArgument(f"mode must be one of {FILTER_MODES}")


def _caption_prompts(samples, backend):
    return embed_words([tokenize(s.captions[0]) for s in samples], backend)


def semantic_scores(samples, evaluator: Evaluator, prompts: Sequence[TokenizedPrompt]) -> np.ndarray:
    """Cosine similarity between each sample's motion embedding and its caption embedding."""
    if not getattr(evaluator, "trained", False):
        raise NotTrained("evaluator has not been trained")
    if not samples:
        return np.zeros(0)
    return np.sum(encode_texts(list(prompts), evaluator) * encode_motions(list(samples), evaluator), axis=-1)


def semantic_filter(samples, evaluator: Evaluator, prompts: Sequence[TokenizedPrompt], threshold: float = 0.58) -> list[int]:
    """Indices of samples whose caption/motion cosine similarity is at least ``threshold``."""
    scores = semantic_scores(samples, evaluator, prompts)
    return [i for i, s in enumerate(scores) if s >= threshold]


def knn_annulus_filter(gen_embs, heldout_bank, config: FilterConfig) -> list[int]:
    """Indices of generated embeddings that lie in the ``[r_min, r_max]`` annulus around the real bank.

    ``mean_knn``: the mean distance from a generated point to its ``k`` nearest
    bank points must lie in ``[r_min, r_max]``.  ``heldout_knn``: a generated
    point is kept when it is among the ``k`` nearest generated points of some
    bank point at a distance strictly inside ``(r_min, r_max)``.
    """
    gen = np.asarray(gen_embs, dtype=np.float64)
    bank = np.asarray(heldout_bank, dtype=np.float64)
    if bank.ndim != 2 or len(bank) == 0:
        raise BadArgument("held-out bank is empty")
    if len(gen) == 0:
        return []
    dist = np.linalg.norm(gen[:, None, :] - bank[None, :, :], axis=-1)
    k = config.k_neighbors
    if config.mode == "mean_knn":
        if k > len(bank):
            raise BadArgument(f"k={k} exceeds bank size {len(bank)}")
        mean = np.sort(dist, axis=1)[:, :k].mean(axis=1)
        return [int(i) for i in np.flatnonzero((mean >= config.r_min) & (mean <= config.r_max))]
    k = min(k, len(gen))
    nearest = np.argsort(dist.T, axis=1, kind="stable")[:, :k]
    keep = np.zeros(len(gen), dtype=bool)
    for h, cols in enumerate(nearest):
        d = dist[cols, h]
        keep[cols[(d > config.r_min) & (d < config.r_max)]] = True
    return [int(i) for i in np.flatnonzero(keep)]


def filter_pipeline(samples: Sequence[InteractionSample], evaluator: Evaluator, bank, config: FilterConfig,
                    backend: EmbeddingBackend | None = None, prompts: Sequence[TokenizedPrompt] | None = None,
                    order: str = "semantic_first") -> list[InteractionSample]:
    """Semantic and annulus filtering; kept samples come back marked ``synthetic_filtered``.

    In ``mean_knn`` mode both stages are per-sample predicates and the result
    does not depend on ``order``.  In ``heldout_knn`` mode the neighbour search
    runs over whichever samples reach that stage.
    """
    samples = list(samples)
    if not samples:
        return []
    if prompts is None:
        if backend is None:
            raise BadArgument("either prompts or an embedding backend is required")
        prompts = _caption_prompts(samples, backend)
    prompts = list(prompts)
    embs = encode_motions(samples, evaluator)
    texts = encode_texts(prompts, evaluator)
    if not getattr(evaluator, "trained", False):
        raise NotTrained("evaluator has not been trained")
    scores = np.sum(embs * texts, axis=-1)

    def semantic(idx):
        return [i for i in idx if scores[i] >= config.cosine_threshold]

    def annulus(idx):
        sub = knn_annulus_filter(embs[idx], bank, config) if idx else []
        return [idx[j] for j in sub]

    idx = list(range(len(samples)))
    if order == "semantic_first":
        idx = annulus(semantic(idx))
    elif order == "knn_first":
        idx = semantic(annulus(idx))
    else:
        raise BadArgument(f"unknown order {order!r}")
    return [dataclasses.replace(samples[i], provenance=Provenance.SYNTHETIC_FILTERED,
                                metadata={**samples[i].metadata, "semantic_score": float(scores[i])})
            for i in sorted(idx)]


def calibrate_filter(real_samples, evaluator: Evaluator, prompts, bank, k_neighbors: int = 20,
                     score_quantile: float = 0.25, radius_quantiles=(0.25, 0.95)) -> FilterConfig:
    """Derive thresholds for a retrained evaluator from real data it did not train on.

    The semantic threshold is a low quantile of matched real caption/motion
    similarities; the annulus spans quantiles of the real samples' mean
    distance to their nearest bank neighbours.
    """
    scores = semantic_scores(real_samples, evaluator, prompts)
    embs = encode_motions(list(real_samples), evaluator)
    dist = np.linalg.norm(embs[:, None] - np.asarray(bank)[None], axis=-1)
    k = min(k_neighbors, len(bank))
    mean = np.sort(dist, axis=1)[:, :k].mean(axis=1)
    r_min, r_max = np.quantile(mean, radius_quantiles)
    return FilterConfig(float(np.quantile(scores, score_quantile)), k, float(max(r_min, 1e-6)), float(r_max))
