import http.server
import json
import threading
from pathlib import Path

import numpy as np
import pytest
import torch

from pairmotion.compose import (
    FilterConfig, LengthEstimator, LLMClient, LLMConfig, PromptBundle, build_decomposition_prompt,
    build_interaction_prompt, compose_interaction, filter_pipeline, generate_bundles, knn_annulus_filter,
    parse_llm_descriptions, semantic_filter, semantic_scores,
)
from pairmotion.denoiser import InteractionDenoiser, ModelConfig
from pairmotion.diffusion import SamplerConfig, cosine_schedule
from pairmotion.errors import BackendUnavailable, BadArgument, MalformedResponse, NotTrained, SourceUnavailable
from pairmotion.evaluator import Evaluator, EvaluatorConfig, encode_motions, encode_texts
from pairmotion.motion import Provenance
from pairmotion.text import StubEmbedder, embed_words, encode_prompts, tokenize
from pairmotion.toy import ProceduralSource, generate_toy_samples

FIXTURES = Path(__file__).parent / "fixtures"
FIG9_TEXT = ("One person leans back, arms outstretched, while the other steps forward, pressing their chest lightly "
             "against the first's, hands resting on their hips.")
FIG9_REPLY = ('{"1": {"person1": "The person leans back with arms outstretched.", '
              '"person2": "The person steps forward, chest pressed lightly, hands on hips."}}')


# ----------------------------------------------------------------- prompts

def test_interaction_prompt_matches_golden():
    got = build_interaction_prompt("greeting", ["handshake", "wave"],
                                   ["one person waves and the other person waves back.", "two people shake hands firmly."], 3)
    assert got == (FIXTURES / "interaction_prompt.golden.txt").read_text(encoding="utf-8")


def test_decomposition_prompt_matches_golden():
    assert build_decomposition_prompt(FIG9_TEXT) == (FIXTURES / "decomposition_prompt.golden.txt").read_text(encoding="utf-8")


def test_prompt_argument_errors():
    with pytest.raises(BadArgument):
        build_interaction_prompt("greeting", [], ["x"], 0)
    with pytest.raises(BadArgument):
        build_interaction_prompt("greeting", [], [], 2)
    with pytest.raises(BadArgument):
        build_interaction_prompt("  ", [], ["x"], 2)
    with pytest.raises(BadArgument):
        build_decomposition_prompt(" ")


def test_parse_figure_example_pair():
    assert parse_llm_descriptions(FIG9_REPLY, "person_pair") == (
        "The person leans back with arms outstretched.",
        "The person steps forward, chest pressed lightly, hands on hips.")


def test_parse_arrays_and_fences():
    assert parse_llm_descriptions('["a b", " c "]') == ["a b", "c"]
    assert parse_llm_descriptions('```json\n["x"]\n```') == ["x"]
    for bad in ("not json", "[]", '["a", 3]', '{"a": 1}', '[""]'):
        with pytest.raises(MalformedResponse):
            parse_llm_descriptions(bad)
    for bad in ('{"1": {"person1": "x"}}', '["x"]', '{"1": {"person1": "", "person2": "y"}}'):
        with pytest.raises(MalformedResponse):
            parse_llm_descriptions(bad, "person_pair")
    with pytest.raises(BadArgument):
        parse_llm_descriptions("[]", "tree")


def test_overlength_is_warned(caplog):
    long_text = " ".join(["word"] * 30)
    with caplog.at_level("WARNING"):
        assert parse_llm_descriptions(json.dumps([long_text])) == [long_text]
    assert "exceeds" in caplog.text


def test_prompt_bundle_validation():
    b = PromptBundle("t", ["a"], "  two people hug  ", "the person hugs", "the person hugs back")
    assert b.two_person_text == "two people hug"
    with pytest.raises(BadArgument):
        PromptBundle("t", [], "x", "", "y")


# ------------------------------------------------------------------ LLM client

def _write_fixture(path, theme, tags, examples, m, texts, pairs):
    recs = [{"prompt": build_interaction_prompt(theme, tags, examples, m), "response": json.dumps(texts), "timestamp": 0}]
    for t, (p1, p2) in zip(texts, pairs):
        recs.append({"prompt": build_decomposition_prompt(t),
                     "response": json.dumps({"1": {"person1": p1, "person2": p2}}), "timestamp": 0})
    path.write_text("".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8")


def test_offline_replay_generates_bundles(tmp_path):
    fx = tmp_path / "llm.jsonl"
    _write_fixture(fx, "greeting", ["wave"], ["ex"], 2,
                   ["one person waves, the other person waves back.", "one person bows, the other person nods."],
                   [("the person waves.", "the person waves back."), ("the person bows.", "the person nods.")])
    client = LLMClient(LLMConfig(offline=True, fixtures=str(fx)))
    bundles = generate_bundles(client, "greeting", ["wave"], ["ex"], 2)
    assert [b.person2_text for b in bundles] == ["the person waves back.", "the person nods."]
    with pytest.raises(BackendUnavailable):
        client.complete("unseen prompt")
    with pytest.raises(BackendUnavailable):
        LLMClient(LLMConfig(offline=True, fixtures=str(tmp_path / "missing.jsonl")))


def test_online_client_records_fixtures(tmp_path, monkeypatch):
    seen = []

    class Handler(http.server.BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.append((body, self.headers.get("Authorization")))
            payload = json.dumps({"choices": [{"message": {"content": '["ok"]'}}]}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = http.server.HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        monkeypatch.setenv("PAIRMOTION_LLM_ENDPOINT", f"http://127.0.0.1:{server.server_port}/v1/chat/completions")
        monkeypatch.setenv("PAIRMOTION_LLM_API_KEY", "secret")
        fx = tmp_path / "rec.jsonl"
        client = LLMClient(LLMConfig(fixtures=str(fx)))
        assert client.complete_many(["p1", "p2"]) == ['["ok"]', '["ok"]']
        recs = [json.loads(line) for line in fx.read_text().splitlines()]
        assert sorted(r["prompt"] for r in recs) == ["p1", "p2"]
        assert seen[0][0]["messages"][0]["content"] in ("p1", "p2") and seen[0][1] == "Bearer secret"
        replay = LLMClient(LLMConfig(offline=True, fixtures=str(fx)))
        assert replay.complete("p2") == '["ok"]'
    finally:
        server.shutdown()


def test_client_without_endpoint(monkeypatch):
    monkeypatch.delenv("PAIRMOTION_LLM_ENDPOINT", raising=False)
    with pytest.raises(BackendUnavailable):
        LLMClient(LLMConfig()).complete("x")


# ------------------------------------------------------------ length model

def test_length_estimator_beats_mean_baseline():
    rng = np.random.default_rng(0)
    words = ["walk", "step", "turn", "wave", "push", "run", "jump", "lean", "spin", "clap"]
    backend = StubEmbedder(16)
    texts, frames = [], []
    for _ in range(120):
        n = int(rng.integers(2, 14))
        texts.append(" ".join(rng.choice(words, n)))
        frames.append(int(20 + 6 * n + rng.normal(scale=3)))
    prompts = encode_prompts(texts, backend)
    est = LengthEstimator(min_frames=16, max_frames=128).fit(prompts[:90], frames[:90])
    pred = np.array([est.predict(p) for p in prompts[90:]])
    truth = np.array(frames[90:])
    mae = np.abs(pred - truth).mean()
    naive = np.abs(np.mean(frames[:90]) - truth).mean()
    assert mae < naive
    back = LengthEstimator.from_dict(json.loads(json.dumps(est.to_dict())))
    assert all(back.predict(p) == est.predict(p) for p in prompts[90:])
    with pytest.raises(NotTrained):
        LengthEstimator().predict(prompts[0])
    assert 16 <= est.predict(encode_prompts(["x"], backend)[0]) <= 128


# ------------------------------------------------------------- composition

@pytest.fixture(scope="module")
def reaction_model():
    torch.manual_seed(0)
    cfg = ModelConfig(block_pairs=1, model_width=8, head_count=2, text_width=16, max_frames=32, reaction=True)
    return InteractionDenoiser(cfg).double()


def _bundle(i=0):
    return PromptBundle("greeting", ["wave"], f"one person waves and the other person steps back {i}",
                        "the person raises both arms.", "the person steps backward.")


def test_compose_passes_agent1_through(reaction_model):
    source = ProceduralSource()
    sampler = SamplerConfig(ddim_steps=2, guidance_weight=1.0)
    sched = cosine_schedule(1000)
    out = compose_interaction(_bundle(), source, reaction_model, sampler, sched, StubEmbedder(16), frames=12, seed=4)
    expected = source("the person raises both arms.", 12, 4)
    assert np.array_equal(out.agents[0].positions, expected.positions)
    assert out.provenance is Provenance.SYNTHETIC_RAW
    assert out.captions == [_bundle().two_person_text] and out.metadata["person2_text"] == "the person steps backward."
    again = compose_interaction(_bundle(), source, reaction_model, sampler, sched, StubEmbedder(16), frames=12, seed=4)
    assert np.array_equal(out.to_array(), again.to_array())


def test_compose_batch_and_errors(reaction_model):
    sampler = SamplerConfig(ddim_steps=1, guidance_weight=1.0)
    sched = cosine_schedule(1000)
    outs = [compose_interaction(_bundle(i), ProceduralSource(), reaction_model, sampler, sched, StubEmbedder(16),
                                frames=8, seed=i) for i in range(10)]
    assert len(outs) == 10 and all(o.provenance is Provenance.SYNTHETIC_RAW for o in outs)
    with pytest.raises(SourceUnavailable):
        compose_interaction(_bundle(), None, reaction_model, sampler, sched, StubEmbedder(16), frames=8)

    def broken(text, frames, seed):
        raise RuntimeError("offline")

    with pytest.raises(SourceUnavailable):
        compose_interaction(_bundle(), broken, reaction_model, sampler, sched, StubEmbedder(16), frames=8)
    with pytest.raises(NotTrained):
        compose_interaction(_bundle(), ProceduralSource(), reaction_model, sampler, sched, StubEmbedder(16))


# ------------------------------------------------------------------ filters

def brute_mean_knn(gen, bank, k, lo, hi):
    keep = []
    for i, g in enumerate(gen):
        d = sorted(float(np.sqrt(sum((g[c] - b[c]) ** 2 for c in range(len(g))))) for b in bank)
        m = sum(d[:k]) / k
        if lo <= m <= hi:
            keep.append(i)
    return keep


def brute_heldout_knn(gen, bank, k, lo, hi):
    keep = set()
    for b in bank:
        d = [(float(np.linalg.norm(g - b)), i) for i, g in enumerate(gen)]
        d.sort(key=lambda x: x[0])  # stable: ties keep generation order
        for dist, i in d[:min(k, len(gen))]:
            if lo < dist < hi:
                keep.add(i)
    return sorted(keep)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@pytest.mark.parametrize("seed", range(5))
def test_knn_filters_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    gen, bank = _unit(rng.normal(size=(40, 12))), _unit(rng.normal(size=(30, 12)))
    for mode, oracle in (("mean_knn", brute_mean_knn), ("heldout_knn", brute_heldout_knn)):
        cfg = FilterConfig(k_neighbors=5, r_min=1.2, r_max=1.45, mode=mode)
        assert knn_annulus_filter(gen, bank, cfg) == oracle(gen, bank, 5, 1.2, 1.45)


def test_annulus_monotone_and_errors(rng):
    gen, bank = _unit(rng.normal(size=(50, 8))), _unit(rng.normal(size=(25, 8)))
    for mode in ("mean_knn", "heldout_knn"):
        prev = None
        for r_min in (1.4, 1.3, 1.2, 0.0):
            kept = set(knn_annulus_filter(gen, bank, FilterConfig(k_neighbors=5, r_min=r_min, r_max=1.5, mode=mode)))
            assert prev is None or prev <= kept
            prev = kept
    with pytest.raises(BadArgument):
        knn_annulus_filter(gen, bank, FilterConfig(k_neighbors=26))
    with pytest.raises(BadArgument):
        knn_annulus_filter(gen, np.zeros((0, 8)), FilterConfig())
    with pytest.raises(BadArgument):
        FilterConfig(r_min=0.6, r_max=0.35)
    assert knn_annulus_filter(np.zeros((0, 8)), bank, FilterConfig(k_neighbors=3)) == []


@pytest.fixture(scope="module")
def fake_trained_evaluator():
    torch.manual_seed(0)
    ev = Evaluator(EvaluatorConfig(width=32, heads=2, layers=1, text_width=16, embed_dim=16)).eval()
    ev.trained = True
    return ev


def test_semantic_filter_matches_predicate(fake_trained_evaluator):
    samples = generate_toy_samples(2, 16)
    prompts = [embed_words(tokenize(s.captions[0]), StubEmbedder(16)) for s in samples]
    scores = semantic_scores(samples, fake_trained_evaluator, prompts)
    m, t = encode_motions(samples, fake_trained_evaluator), encode_texts(prompts, fake_trained_evaluator)
    np.testing.assert_allclose(scores, [float(a @ b) for a, b in zip(m, t)], atol=1e-12)
    thr = float(np.median(scores))
    assert semantic_filter(samples, fake_trained_evaluator, prompts, thr) == [i for i in range(16) if scores[i] >= thr]
    untrained = Evaluator(EvaluatorConfig(width=32, heads=2, layers=1, text_width=16, embed_dim=16))
    with pytest.raises(NotTrained):
        semantic_filter(samples, untrained, prompts)


def test_pipeline_order_invariance_and_provenance(fake_trained_evaluator):
    samples = generate_toy_samples(3, 24)
    backend = StubEmbedder(16)
    prompts = [embed_words(tokenize(s.captions[0]), backend) for s in samples]
    embs = encode_motions(samples, fake_trained_evaluator)
    bank = embs[:10] + 0.01
    scores = semantic_scores(samples, fake_trained_evaluator, prompts)
    dist = np.sort(np.linalg.norm(embs[:, None] - bank[None], axis=-1), axis=1)[:, :3].mean(1)
    cfg = FilterConfig(cosine_threshold=float(np.quantile(scores, 0.3)), k_neighbors=3,
                       r_min=float(np.quantile(dist, 0.2)), r_max=float(np.quantile(dist, 0.9)))
    a = filter_pipeline(samples, fake_trained_evaluator, bank, cfg, prompts=prompts, order="semantic_first")
    b = filter_pipeline(samples, fake_trained_evaluator, bank, cfg, backend=backend, order="knn_first")
    assert [s.captions for s in a] == [s.captions for s in b] and a
    expected = [i for i in range(24) if scores[i] >= cfg.cosine_threshold and cfg.r_min <= dist[i] <= cfg.r_max]
    assert [s.captions for s in a] == [samples[i].captions for i in expected]
    assert all(s.provenance is Provenance.SYNTHETIC_FILTERED and "semantic_score" in s.metadata for s in a)
    assert all(s.provenance is Provenance.REAL for s in samples)
    with pytest.raises(BadArgument):
        filter_pipeline(samples, fake_trained_evaluator, bank, cfg, prompts=prompts, order="random")
