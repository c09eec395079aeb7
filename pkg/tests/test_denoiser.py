import math

import numpy as np
import pytest
import torch

from pairmotion.denoiser import (
    AdaLN, InteractionBlock, InteractionDenoiser, ModelConfig, WordConditioningBlock, adaln_modulate, attention,
    denoise, load_model, save_model, timestep_embedding,
)
from pairmotion.errors import BadArgument, OutOfRange, ShapeMismatch
from pairmotion.text import StubEmbedder, embed_words, tokenize

from helpers import central_fd_check


def small_model(scheme="parallel", width=16, rounds=2, channels=58, text_width=8, heads=2, seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig(block_pairs=rounds, model_width=width, head_count=heads, text_width=text_width,
                      channel_width=channels, max_frames=16, update_scheme=scheme)
    return InteractionDenoiser(cfg).double()


def random_inputs(rng, b=1, t=5, c=58, d=8, valid=4):
    x1 = torch.as_tensor(rng.normal(size=(b, t, c)))
    x2 = torch.as_tensor(rng.normal(size=(b, t, c)))
    text = torch.as_tensor(rng.normal(size=(b, 77, d)))
    mask = torch.zeros(b, 77, dtype=torch.bool)
    mask[:, :valid] = True
    steps = torch.as_tensor(rng.integers(0, 1000, size=b))
    return x1, x2, steps, text, mask


def test_config_validation():
    with pytest.raises(BadArgument):
        ModelConfig(model_width=10, head_count=3)
    with pytest.raises(BadArgument):
        ModelConfig(block_pairs=0)
    with pytest.raises(BadArgument):
        ModelConfig(update_scheme="sideways")
    assert ModelConfig().block_pairs == 12
    assert ModelConfig.from_dict(ModelConfig(model_width=64).to_dict()).model_width == 64


def test_timestep_embedding():
    a, b = timestep_embedding(0, 32), timestep_embedding(999, 32)
    assert torch.linalg.vector_norm(a - b) > 0
    assert torch.equal(timestep_embedding(7, 32), timestep_embedding(7, 32))
    all_t = timestep_embedding(torch.arange(1000), 32)
    d = torch.cdist(all_t, all_t)
    d.fill_diagonal_(1.0)
    assert float(d.min()) > 0
    with pytest.raises(OutOfRange):
        timestep_embedding(1000, 32)
    with pytest.raises(OutOfRange):
        timestep_embedding(-1, 32)


def test_adaln_zero_producer_is_plain_layer_norm(rng):
    mod = AdaLN(6, 4).double()
    torch.nn.init.zeros_(mod.producer.weight)
    torch.nn.init.zeros_(mod.producer.bias)
    x = torch.as_tensor(rng.normal(size=(3, 6)))
    out = adaln_modulate(x, torch.as_tensor(rng.normal(size=4)), mod)
    ref = (x - x.mean(-1, keepdim=True)) / torch.sqrt(x.var(-1, unbiased=False, keepdim=True) + 1e-6)
    torch.testing.assert_close(out, ref, atol=1e-12, rtol=0)


def test_adaln_constant_rows_and_t_gradient(rng):
    mod = AdaLN(6, 4).double()
    t_emb = torch.tensor(rng.normal(size=4), requires_grad=True)
    x = torch.full((2, 6), 3.0, dtype=torch.float64)
    with torch.no_grad():
        _, scale = mod.producer(torch.nn.functional.silu(t_emb)).chunk(2)
        shift, _ = mod.producer(torch.nn.functional.silu(t_emb)).chunk(2)
    # normalized constant rows are zero, so the output is the shift alone
    torch.testing.assert_close(adaln_modulate(x, t_emb, mod), shift.expand(2, 6), atol=1e-12, rtol=0)
    y = torch.as_tensor(rng.normal(size=(2, 6)))
    assert central_fd_check(lambda: adaln_modulate(y, t_emb, mod).pow(2).sum(), [t_emb]) < 1e-6
    g, = torch.autograd.grad(adaln_modulate(y, t_emb, mod).pow(2).sum(), t_emb)
    assert float(g.abs().sum()) > 0
    with pytest.raises(ShapeMismatch):
        adaln_modulate(torch.zeros(2, 5, dtype=torch.float64), t_emb, mod)


def test_single_valid_token_gets_full_weight(rng):
    q, k, v = (torch.as_tensor(rng.normal(size=(1, s, 8))) for s in (4, 6, 6))
    mask = torch.zeros(1, 6, dtype=torch.bool)
    mask[0, 2] = True
    out, w = attention(q, k, v, 2, mask, return_weights=True)
    torch.testing.assert_close(w[..., 2], torch.ones(1, 2, 4, dtype=torch.float64))
    assert float(w[..., [0, 1, 3, 4, 5]].abs().max()) == 0.0


def test_word_block_mask_soundness_and_zero_identity(rng):
    blk = WordConditioningBlock(8, 2).double()
    h = torch.as_tensor(rng.normal(size=(1, 5, 8)))
    text = torch.as_tensor(rng.normal(size=(1, 77, 8)))
    mask = torch.zeros(1, 77, dtype=torch.bool)
    mask[:, :3] = True
    temb = torch.as_tensor(rng.normal(size=(1, 8)))
    out = blk(h, text, mask, temb)
    poked = text.clone()
    poked[:, 3:] = torch.as_tensor(rng.normal(size=(1, 74, 8))) * 100
    assert torch.equal(blk(h, poked, mask, temb), out)
    torch.nn.init.zeros_(blk.attn.out.weight)
    torch.nn.init.zeros_(blk.attn.out.bias)
    assert torch.equal(blk(h, text, mask, temb), h)


def _ln(x):
    mu = sum(x) / len(x)
    var = sum((a - mu) ** 2 for a in x) / len(x)
    return [(a - mu) / math.sqrt(var + 1e-6) for a in x]


def _lin(layer, x):
    w, b = layer.weight.detach().numpy(), layer.bias.detach().numpy()
    return [sum(w[i, j] * x[j] for j in range(len(x))) + b[i] for i in range(w.shape[0])]


def _adaln(mod, x, temb):
    silu = [a / (1 + math.exp(-a)) for a in temb]
    p = _lin(mod.producer, silu)
    w = len(x)
    shift, scale = p[:w], p[w:]
    return [v * (1 + s) + sh for v, s, sh in zip(_ln(x), scale, shift)]


def _attend(mod, queries, keys):
    q = [_lin(mod.q, x) for x in queries]
    k = [_lin(mod.k, x) for x in keys]
    v = [_lin(mod.v, x) for x in keys]
    w = len(q[0])
    dh = w // mod.heads
    out = []
    for qi in q:
        row = [0.0] * w
        for hd in range(mod.heads):
            sl = range(hd * dh, (hd + 1) * dh)
            logits = [sum(qi[c] * kj[c] for c in sl) / math.sqrt(dh) for kj in k]
            m = max(logits)
            e = [math.exp(l - m) for l in logits]
            z = sum(e)
            for c in sl:
                row[c] = sum(e[j] / z * v[j][c] for j in range(len(k)))
        out.append(_lin(mod.out, row))
    return out


def test_interaction_block_scalar_oracle(rng):
    blk = InteractionBlock(4, 2, ffn_mult=2).double()
    h = rng.normal(size=(2, 4))
    partner = rng.normal(size=(2, 4))
    temb = rng.normal(size=4)
    got = blk(torch.as_tensor(h)[None], torch.as_tensor(partner)[None], torch.as_tensor(temb)[None])[0].detach().numpy()

    hs = [list(r) for r in h]
    ps = [list(r) for r in partner]
    a = [_adaln(blk.self_norm, x, temb) for x in hs]
    upd = _attend(blk.self_attn, a, a)
    hs = [[x + u for x, u in zip(r, ur)] for r, ur in zip(hs, upd)]
    qs = [_adaln(blk.cross_norm, x, temb) for x in hs]
    ks = [_adaln(blk.partner_norm, x, temb) for x in ps]
    upd = _attend(blk.cross_attn, qs, ks)
    hs = [[x + u for x, u in zip(r, ur)] for r, ur in zip(hs, upd)]
    out = []
    for r in hs:
        mid = _lin(blk.ffn_in, _adaln(blk.ffn_norm, r, temb))
        gelu = [0.5 * m * (1 + math.erf(m / math.sqrt(2))) for m in mid]
        out.append([x + u for x, u in zip(r, _lin(blk.ffn_out, gelu))])
    np.testing.assert_allclose(got, np.array(out), atol=1e-9, rtol=0)


def test_interaction_block_zero_outputs_identity(rng):
    blk = InteractionBlock(8, 2).double()
    for lin in (blk.self_attn.out, blk.cross_attn.out, blk.ffn_out):
        torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(lin.bias)
    h = torch.as_tensor(rng.normal(size=(1, 3, 8)))
    p = torch.as_tensor(rng.normal(size=(1, 3, 8)))
    assert torch.equal(blk(h, p, torch.as_tensor(rng.normal(size=(1, 8)))), h)
    with pytest.raises(ShapeMismatch):
        blk(h, p[:, :2], torch.zeros(1, 8, dtype=torch.float64))


def test_interaction_block_self_partner_definitional(rng):
    # with identical weights on both attention paths and partner == self, the two sub-steps coincide
    blk = InteractionBlock(8, 2).double()
    blk.cross_attn.load_state_dict(blk.self_attn.state_dict())
    blk.cross_norm.load_state_dict(blk.self_norm.state_dict())
    blk.partner_norm.load_state_dict(blk.self_norm.state_dict())
    h = torch.as_tensor(rng.normal(size=(1, 3, 8)))
    temb = torch.as_tensor(rng.normal(size=(1, 8)))
    a = blk.self_norm(h, temb)
    self_step = blk.self_attn(a, a)
    cross_step = blk.cross_attn(blk.cross_norm(h, temb), blk.partner_norm(h, temb))
    assert torch.equal(self_step, cross_step)


def test_weight_sharing_no_agent_parameters():
    model = small_model()
    names = [n for n, _ in model.named_parameters()]
    assert not any("agent" in n or n.endswith(("_1", "_2")) for n in names)
    assert len(model.rounds) == 2


def test_parallel_swap_equivariance(rng):
    model = small_model("parallel")
    for _ in range(5):
        x1, x2, t, text, mask = random_inputs(rng)
        a1, a2 = model(x1, x2, t, text, mask)
        b1, b2 = model(x2, x1, t, text, mask)
        assert float((a1 - b2).abs().max().detach()) < 1e-6 and float((a2 - b1).abs().max().detach()) < 1e-6


def test_alternating_order_swap_exact(rng):
    model = small_model("alternating")
    x1, x2, t, text, mask = random_inputs(rng)
    a1, a2 = model(x1, x2, t, text, mask, first_agent=0)
    b1, b2 = model(x2, x1, t, text, mask, first_agent=1)
    assert torch.equal(a1, b2) and torch.equal(a2, b1)
    # and the order matters in general
    c1, _ = model(x1, x2, t, text, mask, first_agent=1)
    assert not torch.equal(a1, c1)


def test_pseudo_inverse_round_trip(rng):
    model = small_model(width=64, rounds=2)
    with torch.no_grad():
        for p in model.rounds.parameters():
            p.zero_()
        w_in = torch.as_tensor(rng.normal(size=(64, 58)))
        model.input_proj.weight.copy_(w_in)
        model.input_proj.bias.zero_()
        model.output_proj.weight.copy_(torch.linalg.pinv(w_in))
        model.output_proj.bias.zero_()
    x1, x2, t, text, mask = random_inputs(rng)
    y1, _ = model(x1, x2, t, text, mask)
    # residual path only: out = W_out (W_in x + pe) = x + W_out pe
    pe = model.positions[:x1.shape[1]].double()
    expected = x1 + pe @ model.output_proj.weight.T
    torch.testing.assert_close(y1, expected, atol=1e-9, rtol=0)


def test_masked_text_positions_do_not_matter(rng):
    model = small_model()
    x1, x2, t, text, mask = random_inputs(rng)
    a = model(x1, x2, t, text, mask)
    poked = text.clone()
    poked[:, 4:] = 1e3
    b = model(x1, x2, t, poked, mask)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_denoise_wrapper_and_errors(rng):
    model = small_model(text_width=8)
    prompt = embed_words(tokenize("one person waves"), StubEmbedder(8))
    x1, x2 = rng.normal(size=(5, 58)), rng.normal(size=(5, 58))
    y1, y2 = denoise(model, x1, x2, 10, prompt)
    assert y1.shape == (5, 58)
    with pytest.raises(ShapeMismatch):
        denoise(model, x1, x2[:4], 10, prompt)
    with pytest.raises(ShapeMismatch):
        denoise(model, rng.normal(size=(17, 58)), rng.normal(size=(17, 58)), 10, prompt)
    with pytest.raises(OutOfRange):
        denoise(model, x1, x2, 1000, prompt)


def test_checkpoint_round_trip(tmp_path, rng):
    model = small_model().float()
    save_model(tmp_path / "m.ckpt", model, {"norm": np.arange(3)}, {"note": "x"})
    back, extras, manifest = load_model(tmp_path / "m.ckpt")
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    assert manifest["note"] == "x" and manifest["config"]["block_pairs"] == 2
    np.testing.assert_array_equal(extras["norm"], [0, 1, 2])
    save_model(tmp_path / "m2.ckpt", back, {"norm": np.arange(3)}, {"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
