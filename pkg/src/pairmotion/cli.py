"""Command-line driver.  Every subcommand prints line-delimited JSON run reports."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import compose as C
from .config import RunConfig, load_config
from .data import generate_toy_dataset, load_manifest, load_split, write_dataset
from .denoiser import InteractionDenoiser, load_model, save_model
from .diffusion import cosine_schedule, ddim_sample
from .errors import BadArgument, PairMotionError
from .evaluator import encode_motions, encode_texts, load_evaluator, save_evaluator, train_evaluator
from .io import save_bank, save_motion
from .losses import LossWeights
from .metrics import diversity, fid, mm_dist, multimodality, r_precision
from .motion import default_skeleton, joint_count_from_width, chain_skeleton
from .normalize import Normalizer
from .text import ExternalEmbedder, StubEmbedder, encode_prompts, tokenize, embed_words
from .toy import GrammarConfig, ProceduralSource
from .training import TrainConfig, make_batch, train_denoiser

log = logging.getLogger("pairmotion")


class Reporter:
    """Writes JSON lines to stdout and, when given, appends them to a report file."""

    def __init__(self, command: str, path=None):
        self.command = command
        self.path = Path(path) if path else None
        self.start = time.perf_counter()

    def emit(self, record: dict) -> None:
        line = json.dumps({"command": self.command, **record}, sort_keys=True, default=_jsonable)
        print(line, flush=True)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def finish(self, metrics: dict, artifacts: dict | None = None) -> None:
        self.emit({"event": "done", "metrics": metrics, "artifacts": artifacts or {},
                   "duration_s": round(time.perf_counter() - self.start, 3)})


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not serializable: {type(x)}")


# ------------------------------------------------------------------ helpers

def text_backend(cfg: RunConfig):
    if cfg.text.backend == "external":
        return ExternalEmbedder(cfg.text.command, cfg.text.dim)
    return StubEmbedder(cfg.text.dim)


def skeleton_for(width: int):
    n = joint_count_from_width(width)
    return default_skeleton() if n == 22 else chain_skeleton(n)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.sampler.seed = args.seed
        cfg.evaluator_train.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    if getattr(args, "ddim_steps", None) is not None:
        cfg.sampler.ddim_steps = args.ddim_steps
    if getattr(args, "cfg_weight", None) is not None:
        cfg.sampler.guidance_weight = args.cfg_weight
    if getattr(args, "p_uncond", None) is not None:
        cfg.train.p_uncond = args.p_uncond
    if getattr(args, "scheme", None) is not None:
        cfg.model.update_scheme = args.scheme
    for flag, key in (("width", "model_width"), ("rounds", "block_pairs"), ("heads", "head_count")):
        if getattr(args, flag, None) is not None:
            setattr(cfg.model, key, getattr(args, flag))
    if getattr(args, "offline", False):
        cfg.llm.offline = True
    if getattr(args, "fixtures", None):
        cfg.llm.fixtures = args.fixtures
    # re-run dataclass validation after overrides
    cfg.model = dataclasses.replace(cfg.model)
    cfg.train = dataclasses.replace(cfg.train)
    return cfg.validate()


def _save_denoiser(path, model, normalizer: Normalizer, meta: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_model(path, model, extra_meta={"normalizer": {"mean": normalizer.mean.tolist(),
                                                       "std": normalizer.std.tolist()}, **meta})


def _load_denoiser(path):
    model, _, manifest = load_model(path)
    norm = manifest["normalizer"]
    model.eval()
    return model, Normalizer(np.asarray(norm["mean"]), np.asarray(norm["std"])), manifest


def _caption_prompts(samples, backend):
    return [encode_prompts(s.captions, backend) for s in samples]


# -------------------------------------------------------------- subcommands

def cmd_toy_data(args, cfg, rep):
    n = args.n or cfg.data.n_samples
    out = args.out or cfg.data.root
    test = args.test if args.test is not None else cfg.data.test
    heldout = args.heldout if args.heldout is not None else cfg.data.heldout
    if args.test is None and args.heldout is None and test + heldout >= n:
        test = heldout = None  # configured split sizes do not fit: fall back to n/8 each
    grammar = GrammarConfig() if args.captions is None else GrammarConfig(captions_per_sample=args.captions)
    m = generate_toy_dataset(cfg.seed, n, out, grammar, test=test, heldout=heldout)
    counts = {s: len(m.indices(s)) for s in ("train", "test", "heldout")}
    rep.finish({"n_samples": n, **{f"n_{k}": v for k, v in counts.items()}}, {"manifest": str(Path(out) / "manifest.json")})


def _train(args, cfg, rep, reaction: bool):
    manifest = load_manifest(args.data)
    samples = load_split(manifest, "train")
    counts = _provenance_counts(manifest)
    # extra datasets (e.g. filtered synthetic data) join the train split; statistics stay those of --data
    for extra in args.extra or []:
        em = load_manifest(extra)
        samples += load_split(em, "train")
        for k, v in _provenance_counts(em).items():
            counts[k] = counts.get(k, 0) + v
    normalizer = manifest.normalizer
    backend = text_backend(cfg)
    prompts = _caption_prompts(samples, backend)
    schedule = cosine_schedule(cfg.diffusion.steps, cfg.diffusion.cosine_s)
    train_cfg = cfg.train
    if args.init:
        model, _, _ = _load_denoiser(args.init)
        if reaction and not model.config.reaction:
            model.config = dataclasses.replace(model.config, reaction=True)
        train_cfg = dataclasses.replace(train_cfg, lr=args.lr or cfg.finetune_lr)
    else:
        pairs = cfg.model.block_pairs
        if reaction and getattr(args, "rounds", None) is None:
            pairs = cfg.reaction_block_pairs
        model_cfg = dataclasses.replace(cfg.model, channel_width=normalizer.width, reaction=reaction, block_pairs=pairs,
                                        max_frames=max(cfg.model.max_frames, max(s.frames for s in samples)))
        torch.manual_seed(cfg.seed)
        model = InteractionDenoiser(model_cfg)
        if args.lr:
            train_cfg = dataclasses.replace(train_cfg, lr=args.lr)
    if args.warmup is not None:
        train_cfg = dataclasses.replace(train_cfg, warmup=args.warmup)
    if args.batch_size is not None:
        train_cfg = dataclasses.replace(train_cfg, batch_size=args.batch_size)
    if args.log_every is not None:
        train_cfg = dataclasses.replace(train_cfg, log_every=args.log_every)
    # fixed probe of up to 16 training samples (first caption each) whose loss is tracked across training
    probe = samples[:16]
    eval_batch = make_batch(probe, [p[0] for p in prompts[:16]], normalizer, np.random.default_rng(cfg.seed),
                            train_cfg.max_frames, next(model.parameters()).dtype)
    history = train_denoiser(model, samples, prompts, normalizer, skeleton_for(normalizer.width), train_cfg,
                             schedule, cfg.loss, log=lambda e: rep.emit({"event": "step", **e}), eval_batch=eval_batch)
    _save_denoiser(args.out, model, normalizer, {"reaction": reaction, "train": train_cfg.to_dict(),
                                                 "provenance_counts": counts})
    final = history[-1] if history else {}
    rep.finish({"final_total": final.get("total"), "initial_total": history[0]["total"] if history else None,
                "final_eval_total": final.get("eval_total"),
                "initial_eval_total": history[0]["eval_total"] if history else None,
                "steps": train_cfg.steps, "lr": train_cfg.lr, "n_train": len(samples), "provenance_counts": counts},
               {"checkpoint": args.out})


def _provenance_counts(manifest):
    counts = {}
    for e in manifest.entries:
        if e.split == "train":
            counts[e.provenance] = counts.get(e.provenance, 0) + 1
    return counts


def cmd_train_interactor(args, cfg, rep):
    _train(args, cfg, rep, reaction=False)


def cmd_train_reaction(args, cfg, rep):
    _train(args, cfg, rep, reaction=True)


def cmd_train_evaluator(args, cfg, rep):
    manifest = load_manifest(args.data)
    samples = [s for s in (load_split(manifest, "train") + load_split(manifest, "test") + load_split(manifest, "heldout"))]
    heldout = np.arange(len(samples) - len(manifest.indices("heldout")), len(samples))
    backend = text_backend(cfg)
    prompts = _caption_prompts(samples, backend)
    ev_cfg = dataclasses.replace(cfg.evaluator, channel_width=manifest.normalizer.width)
    tcfg = cfg.evaluator_train if args.epochs is None else dataclasses.replace(cfg.evaluator_train, epochs=args.epochs)
    trained = train_evaluator(samples, prompts, ev_cfg, tcfg, heldout_indices=heldout,
                              log=lambda e: rep.emit({"event": "epoch", **e}))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_evaluator(args.out, trained.evaluator, trained.bank)
    bank_path = str(Path(args.out).with_suffix(".bank"))
    save_bank(bank_path, trained.bank)
    held = [samples[i] for i in heldout]
    texts = encode_texts([p[0] for p in (prompts[i] for i in heldout)], trained.evaluator)
    rp = r_precision(texts, trained.bank, pool_size=min(32, len(held)), rng=np.random.default_rng(cfg.seed))
    rep.finish({"final_contrastive_loss": trained.history[-1], **{f"heldout_r_precision_top{k}": v for k, v in rp.items()}},
               {"evaluator": args.out, "bank": bank_path})


def cmd_sample(args, cfg, rep):
    model, normalizer, _ = _load_denoiser(args.model)
    backend = text_backend(cfg)
    prompt = embed_words(tokenize(args.prompt), backend)
    schedule = cosine_schedule(cfg.diffusion.steps, cfg.diffusion.cosine_s)
    sample = ddim_sample(model, prompt, args.frames, cfg.sampler, schedule, normalizer)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_motion(args.out, sample)
    rep.finish({"frames": args.frames, "seed": cfg.sampler.seed, "guidance_weight": cfg.sampler.guidance_weight},
               {"motion": args.out})


def cmd_compose(args, cfg, rep):
    client = C.LLMClient(cfg.llm)
    examples = list(cfg.compose.examples)
    theme = args.theme or cfg.compose.theme
    tags = args.tags.split(",") if args.tags else list(cfg.compose.tags)
    m = args.m or cfg.compose.m
    if not examples:
        if not args.data:
            raise BadArgument("compose needs reference examples (config compose.examples or --data)")
        examples = [s.captions[0] for s in load_split(load_manifest(args.data), "train")[:3]]
    bundles = C.generate_bundles(client, theme, tags, examples, m)
    model, normalizer, _ = _load_denoiser(args.reaction)
    backend = text_backend(cfg)
    estimator = C.LengthEstimator(cfg.compose.min_frames, min(cfg.compose.max_frames, model.config.max_frames))
    if args.data:
        real = load_split(load_manifest(args.data), "train")
        estimator.fit([embed_words(tokenize(s.captions[0]), backend) for s in real], [s.frames for s in real])
    schedule = cosine_schedule(cfg.diffusion.steps, cfg.diffusion.cosine_s)
    source = ProceduralSource(skeleton_for(normalizer.width))
    frames = None if estimator.weights is not None else cfg.compose.min_frames
    out = []
    for i, b in enumerate(bundles):
        out.append(C.compose_interaction(b, source, model, cfg.sampler, schedule, backend, estimator, normalizer,
                                         frames=frames, seed=cfg.seed + i))
        rep.emit({"event": "composed", "index": i, "text": b.two_person_text, "frames": out[-1].frames})
    write_dataset(args.out, out, ["train"] * len(out))
    rep.finish({"n_bundles": len(bundles), "n_composed": len(out)}, {"dataset": str(Path(args.out) / "manifest.json")})


def cmd_filter(args, cfg, rep):
    evaluator, bank, _ = load_evaluator(args.evaluator)
    if bank is None:
        raise BadArgument("evaluator checkpoint carries no held-out bank")
    fcfg = cfg.filter_for(args.annulus)
    if args.calibrate:
        # thresholds from the real test split: disjoint from the bank, so neighbour distances are not self-distances
        real = load_split(load_manifest(args.calibrate), "test")
        real_prompts = embed_words([tokenize(s.captions[0]) for s in real], text_backend(cfg))
        cal = C.calibrate_filter(real, evaluator, real_prompts, bank, min(fcfg.k_neighbors, len(bank)))
        fcfg = dataclasses.replace(fcfg, cosine_threshold=cal.cosine_threshold, r_min=cal.r_min, r_max=cal.r_max)
    if args.threshold is not None:
        fcfg = dataclasses.replace(fcfg, cosine_threshold=args.threshold)
    if args.mode:
        fcfg = dataclasses.replace(fcfg, mode=args.mode)
    fcfg = dataclasses.replace(fcfg, k_neighbors=min(fcfg.k_neighbors, len(bank)))
    samples = load_split(load_manifest(args.input), "train")
    backend = text_backend(cfg)
    prompts = embed_words([tokenize(s.captions[0]) for s in samples], backend)
    kept = C.filter_pipeline(samples, evaluator, bank, fcfg, prompts=prompts)
    if kept:
        write_dataset(args.out, kept, ["train"] * len(kept))
    rep.finish({"n_input": len(samples), "n_kept": len(kept), "cosine_threshold": fcfg.cosine_threshold,
                "k_neighbors": fcfg.k_neighbors, "r_min": fcfg.r_min, "r_max": fcfg.r_max, "mode": fcfg.mode},
               {"dataset": str(Path(args.out) / "manifest.json") if kept else None})


def cmd_evaluate(args, cfg, rep):
    model, normalizer, _ = _load_denoiser(args.model)
    evaluator, _, _ = load_evaluator(args.evaluator)
    real = load_split(load_manifest(args.data), args.split)
    if args.limit:
        real = real[:args.limit]
    backend = text_backend(cfg)
    schedule = cosine_schedule(cfg.diffusion.steps, cfg.diffusion.cosine_s)
    prompts = [embed_words(tokenize(s.captions[0]), backend) for s in real]
    gen, groups = [], []
    for i, (s, p) in enumerate(zip(real, prompts)):
        frames = min(s.frames, model.config.max_frames)
        reps = [ddim_sample(model, p, frames, dataclasses.replace(cfg.sampler, seed=cfg.seed + 1000 * r + i),
                            schedule, normalizer) for r in range(args.repeats)]
        gen.append(reps[0])
        groups.append(encode_motions(reps, evaluator))
    real_e = encode_motions(real, evaluator)
    gen_e = np.stack([g[0] for g in groups])
    text_e = encode_texts(prompts, evaluator)
    rng = np.random.default_rng(cfg.seed)
    pool = min(32, len(real))
    rp = r_precision(text_e, gen_e, pool_size=pool, rng=rng)
    metrics = {"fid": fid(real_e, gen_e), **{f"r_precision_top{k}": rp[k] for k in (1, 2, 3)},
               "mm_dist": mm_dist(text_e, gen_e), "diversity": diversity(gen_e, None if len(gen_e) < 300 else 300, rng),
               "multimodality": multimodality(groups, None if args.repeats < 5 else 10, rng) if args.repeats > 1 else None,
               "n_samples": len(real), "pool_size": pool}
    rep.finish(metrics)


def cmd_export_embeddings(args, cfg, rep):
    evaluator, _, _ = load_evaluator(args.evaluator)
    samples = load_split(load_manifest(args.data), args.split)
    embs = encode_motions(samples, evaluator)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_bank(args.out, embs)
    rep.finish({"count": len(embs), "dim": int(embs.shape[1])}, {"bank": args.out})


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairmotion", description="Two-person text-to-motion workbench.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (default: packaged defaults)")
    common.add_argument("--seed", type=int, help="seed for every random draw in the run")
    common.add_argument("--report", help="append JSON-lines run reports to this file")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toy-data", parents=[common], help="generate the procedural toy corpus")
    s.add_argument("--n", type=int, help="number of interactions")
    s.add_argument("--out", help="dataset directory")
    s.add_argument("--test", type=int, help="samples assigned to the test split (default n/8)")
    s.add_argument("--heldout", type=int, help="samples assigned to the held-out split (default n/8)")
    s.add_argument("--captions", type=int, help="captions per sample")
    s.set_defaults(func=cmd_toy_data)

    for name, func, hlp in (("train-interactor", cmd_train_interactor, "train (or fine-tune) the interaction denoiser"),
                            ("train-reaction", cmd_train_reaction, "train the reaction generator")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--data", required=True, help="dataset directory or manifest")
        s.add_argument("--out", required=True, help="checkpoint path")
        s.add_argument("--extra", action="append", metavar="DATA",
                       help="append this dataset's train split (repeatable), e.g. filtered synthetic data")
        s.add_argument("--init", help="start from this checkpoint (fine-tuning; default lr becomes finetune_lr)")
        s.add_argument("--steps", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--warmup", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--p-uncond", type=float, help="probability of dropping the prompt")
        s.add_argument("--scheme", choices=("parallel", "alternating"))
        s.add_argument("--width", type=int, help="model width")
        s.add_argument("--rounds", type=int, help="number of block pairs")
        s.add_argument("--heads", type=int)
        s.add_argument("--log-every", type=int, help="steps between progress reports")
        s.set_defaults(func=func)

    s = sub.add_parser("train-evaluator", parents=[common], help="train the contrastive evaluator and held-out bank")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_evaluator)

    s = sub.add_parser("sample", parents=[common], help="generate an interaction from a caption")
    s.add_argument("--model", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--out", required=True, help="motion file to write")
    s.add_argument("--ddim-steps", type=int)
    s.add_argument("--cfg-weight", type=float)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("compose", parents=[common], help="LLM prompts + single-person source + reaction model")
    s.add_argument("--reaction", required=True, help="reaction generator checkpoint")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--data", help="real dataset (length estimator and reference examples)")
    s.add_argument("--theme")
    s.add_argument("--tags", help="comma-separated tags")
    s.add_argument("--m", type=int, help="descriptions to request")
    s.add_argument("--offline", action="store_true", help="replay recorded LLM responses")
    s.add_argument("--fixtures", help="LLM fixture JSON-lines file (recorded to when online)")
    s.add_argument("--ddim-steps", type=int)
    s.add_argument("--cfg-weight", type=float)
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("filter", parents=[common], help="semantic + annulus filtering of composed data")
    s.add_argument("--evaluator", required=True)
    s.add_argument("--input", required=True, help="composed dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--annulus", help="annulus preset name from the config")
    s.add_argument("--threshold", type=float, help="cosine similarity threshold")
    s.add_argument("--mode", choices=C.FILTER_MODES)
    s.add_argument("--calibrate", metavar="DATA",
                   help="derive threshold and annulus from this real dataset's test split instead of the presets")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("evaluate", parents=[common], help="FID, R-precision, MM-Dist, diversity, multimodality")
    s.add_argument("--model", required=True)
    s.add_argument("--evaluator", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "test", "heldout"))
    s.add_argument("--limit", type=int)
    s.add_argument("--repeats", type=int, default=2, help="generations per caption (multimodality)")
    s.add_argument("--ddim-steps", type=int)
    s.add_argument("--cfg-weight", type=float)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-embeddings", parents=[common], help="write evaluator motion embeddings as a bank file")
    s.add_argument("--evaluator", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="heldout", choices=("train", "test", "heldout"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    rep = Reporter(args.command, args.report)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        rep.emit({"event": "start", "seed": cfg.seed})
        args.func(args, cfg, rep)
    except (PairMotionError, OSError) as exc:
        print(f"pairmotion {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
