"""Compose synthetic interactions from LLM prompts and filter them.

Uses the recorded LLM responses in tests/fixtures (no network), the procedural
single-person source for agent 1 and a freshly initialised reaction model for
agent 2, then runs the semantic and k-NN annulus stages with an untrained
evaluator to show what each stage computes.  Use trained checkpoints via the
CLI (compose / filter --calibrate) for real runs.

    python demos/02_compose_and_filter.py
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from pairmotion.compose import (
    FilterConfig, LLMClient, LLMConfig, filter_pipeline, generate_bundles, compose_interaction, semantic_scores,
)
from pairmotion.config import load_config
from pairmotion.denoiser import InteractionDenoiser, ModelConfig
from pairmotion.diffusion import SamplerConfig, cosine_schedule
from pairmotion.evaluator import Evaluator, EvaluatorConfig, encode_motions
from pairmotion.text import StubEmbedder, embed_words, tokenize
from pairmotion.toy import ProceduralSource

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixtures", default=str(ROOT / "tests/fixtures/llm_fixture.jsonl"))
    ap.add_argument("--config", default=str(ROOT / "tests/fixtures/tiny.yaml"))
    args = ap.parse_args()

    cfg = load_config(args.config)
    client = LLMClient(LLMConfig(offline=True, fixtures=args.fixtures))
    bundles = generate_bundles(client, cfg.compose.theme, cfg.compose.tags, cfg.compose.examples, cfg.compose.m)
    for b in bundles:
        print(f"- {b.two_person_text}\n    p1: {b.person1_text}\n    p2: {b.person2_text}")

    torch.manual_seed(0)
    reaction = InteractionDenoiser(ModelConfig(block_pairs=2, model_width=32, head_count=2, max_frames=64,
                                               reaction=True))
    backend = StubEmbedder(64)
    composed = [compose_interaction(b, ProceduralSource(), reaction, SamplerConfig(ddim_steps=10), cosine_schedule(),
                                    backend, frames=40, seed=i) for i, b in enumerate(bundles)]
    print(f"composed {len(composed)} interactions; agent 1 comes verbatim from the single-person source")

    evaluator = Evaluator(EvaluatorConfig(width=32, heads=2, layers=1)).eval()
    evaluator.trained = True  # demo only: a real run loads a trained checkpoint
    prompts = [embed_words(tokenize(s.captions[0]), backend) for s in composed]
    scores = semantic_scores(composed, evaluator, prompts)
    print("semantic scores", np.round(scores, 3))

    # a toy held-out bank: perturbed copies of the composed embeddings, so distances are small and known
    embs = encode_motions(composed, evaluator)
    bank = embs + np.random.default_rng(0).normal(scale=0.05, size=embs.shape)
    knn = np.sort(np.linalg.norm(embs[:, None] - bank[None], axis=-1), axis=1)[:, :2].mean(axis=1)
    print("mean 2-NN distance to bank", np.round(knn, 3))
    for lo, hi in [(0.0, 0.05), (0.0, 2.0), (float(knn.min()), float(knn.max()))]:
        fc = FilterConfig(cosine_threshold=float(scores.min()), k_neighbors=2, r_min=lo, r_max=hi)
        kept = filter_pipeline(composed, evaluator, bank, fc, prompts=prompts)
        print(f"annulus [{lo:.3f}, {hi:.3f}]: kept {len(kept)} of {len(composed)}")
    fc = FilterConfig(cosine_threshold=float(np.median(scores)), k_neighbors=2, r_min=0.0, r_max=2.0)
    print(f"semantic threshold at the median score keeps {len(filter_pipeline(composed, evaluator, bank, fc, prompts=prompts))}")


if __name__ == "__main__":
    main()
