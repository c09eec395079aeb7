import math
import time

import numpy as np
import pytest
import torch

from pairmotion.denoiser import InteractionDenoiser, ModelConfig
from pairmotion.diffusion import (
    Batch, SamplerConfig, _ddim_loop, cfg_combine, compute_loss, cosine_schedule, ddim_sample, ddim_timesteps, q_sample,
    reaction_sample, train_step,
)
from pairmotion.errors import BadArgument, ShapeMismatch
from pairmotion.losses import LossWeights
from pairmotion.normalize import Normalizer
from pairmotion.text import StubEmbedder, embed_words, tokenize

from helpers import central_fd_check, motion_array

C5 = 58  # channel width for a 5-joint skeleton


def closed_form(t, steps=1000, s=0.008):
    f = lambda u: math.cos((u / steps + s) / (1 + s) * math.pi / 2) ** 2
    return f(t) / f(0)


def tiny_model(scheme="parallel", reaction=False, width=8, rounds=2, text_width=8, seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig(block_pairs=rounds, model_width=width, head_count=2, text_width=text_width,
                      channel_width=C5, max_frames=16, update_scheme=scheme, reaction=reaction)
    return InteractionDenoiser(cfg).double()


def prompt(text, dim=8):
    return embed_words(tokenize(text), StubEmbedder(dim))


def test_schedule_endpoints_and_closed_form():
    sched = cosine_schedule(1000)
    assert sched.alpha_bar[0] == 1.0
    for t in (1, 10, 100, 250, 400, 500, 600, 750, 900, 999):
        assert abs(sched.alpha_bar[t] / sched.alpha_bar[0] - closed_form(t)) < 1e-12
    for steps in (1, 7, 50, 1000):
        ab = cosine_schedule(steps).alpha_bar
        assert np.all(np.diff(ab) < 0)
    assert np.all(sched.betas <= 0.999)
    with pytest.raises(BadArgument):
        cosine_schedule(0)


def test_q_sample_cases(rng):
    sched = cosine_schedule(1000)
    x0 = rng.normal(size=(3, 4))
    noise = rng.normal(size=(3, 4))
    np.testing.assert_allclose(q_sample(x0, 0, noise, sched), x0, atol=math.sqrt(1 - sched.alpha_bar[0]) * np.linalg.norm(noise) + 1e-15)
    np.testing.assert_array_equal(q_sample(x0, 300, np.zeros_like(x0), sched), math.sqrt(sched.alpha_bar[300]) * x0)
    fake = sched.__class__(4, np.array([1.0, 0.25, 0.1, 0.05, 0.0]), np.zeros(4))
    assert q_sample(np.array(2.0), 1, np.array(2.0), fake) == pytest.approx(1 + 2 * math.sqrt(0.75), abs=1e-15)
    # per-item steps broadcast over trailing axes
    xt = q_sample(torch.as_tensor(x0), torch.tensor([0, 10, 999]), torch.as_tensor(noise), sched)
    for i, t in enumerate((0, 10, 999)):
        np.testing.assert_allclose(xt[i].numpy(), q_sample(x0[i], t, noise[i], sched), atol=1e-14)
    with pytest.raises(ShapeMismatch):
        q_sample(x0, 1, noise[:2], sched)


def test_q_sample_linear_in_inputs(rng):
    sched = cosine_schedule(1000)
    a, b, na, nb = (rng.normal(size=5) for _ in range(4))
    lhs = q_sample(2 * a + 3 * b, 123, 2 * na + 3 * nb, sched)
    rhs = 2 * q_sample(a, 123, na, sched) + 3 * q_sample(b, 123, nb, sched)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_cfg_identities(rng):
    c = torch.as_tensor(rng.normal(size=(2, 3)))
    u = torch.as_tensor(rng.normal(size=(2, 3)))
    assert torch.equal(cfg_combine(c, u, 1.0), c)
    assert torch.equal(cfg_combine(u, u, 3.5), u)
    for w in (0.0, 0.5, 2.0, 7.5):
        assert torch.equal(cfg_combine(c, c, w), c)
    assert cfg_combine(np.array(1.0), np.array(0.0), 3.5) == 3.5
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    with pytest.raises(ShapeMismatch):
        cfg_combine(c, u[:1], 2.0)


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 50)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 50 and np.all(np.diff(ts) < 0)
    np.testing.assert_array_equal(ddim_timesteps(1000, 1000), np.arange(999, -1, -1))


def test_ddim_deterministic_and_seed_sensitive():
    model = tiny_model()
    sched = cosine_schedule(1000)
    norm = Normalizer.identity(C5)
    p = prompt("one person waves")
    a = ddim_sample(model, p, 6, SamplerConfig(ddim_steps=10, seed=3), sched, norm).to_array()
    b = ddim_sample(model, p, 6, SamplerConfig(ddim_steps=10, seed=3), sched, norm).to_array()
    c = ddim_sample(model, p, 6, SamplerConfig(ddim_steps=10, seed=4), sched, norm).to_array()
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    with pytest.raises(BadArgument):
        ddim_sample(model, p, 6, SamplerConfig(ddim_steps=0), sched, norm)


def test_ddim_w0_ignores_prompt():
    model = tiny_model()
    sched = cosine_schedule(1000)
    cfg = SamplerConfig(ddim_steps=8, guidance_weight=0.0, seed=1)
    a = ddim_sample(model, prompt("one person waves"), 5, cfg, sched, Normalizer.identity(C5)).to_array()
    b = ddim_sample(model, prompt("two people hug tightly"), 5, cfg, sched, Normalizer.identity(C5)).to_array()
    assert np.array_equal(a, b)


class LinearDenoiser:
    """x0_hat = c * x_t for both agents."""

    def __init__(self, c):
        self.c = c

    def __call__(self, x1, x2, t, text, mask):
        return self.c * x1, self.c * x2


def test_ddim_linear_toy_oracle():
    sched = cosine_schedule(1000)
    c = 0.7
    model = LinearDenoiser(c)
    norm = Normalizer.identity(C5)
    cfg = SamplerConfig(ddim_steps=1000, guidance_weight=1.0, eta=0.0, seed=5, clip_x0=None)
    x1, x2 = _ddim_loop(model, prompt("x"), 3, C5, cfg, sched, None)
    out = torch.stack([x1, x2]).numpy()
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(2, 1, 3, C5, generator=gen, dtype=torch.float64).numpy()[:, 0]
    ab = sched.alpha_bar
    k = 1.0
    for t in range(999, 0, -1):
        a_t, a_p = ab[t], ab[t - 1]
        k *= math.sqrt(a_p) * c + math.sqrt(1 - a_p) * (1 - math.sqrt(a_t) * c) / math.sqrt(1 - a_t)
    expected = c * k * x
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_reaction_sample_imposes_condition(small_skeleton, rng):
    model = tiny_model(reaction=True)
    sched = cosine_schedule(1000)
    arr = motion_array(small_skeleton, rng, t=6)
    norm = Normalizer.fit([arr])
    cond = arr[0, :, :15].reshape(6, 5, 3)
    cfg = SamplerConfig(ddim_steps=6, guidance_weight=0.0, seed=2)
    out = reaction_sample(model, cond, prompt("one person waves"), cfg, sched, norm)
    assert np.array_equal(out.agents[0].positions, cond)
    again = reaction_sample(model, cond, prompt("another text"), cfg, sched, norm)
    assert np.array_equal(out.agents[1].positions, again.agents[1].positions)
    noised = reaction_sample(model, cond, prompt("one person waves"), cfg, sched, norm, noise_condition=True)
    assert np.array_equal(noised.agents[0].positions, cond)
    with pytest.raises(ShapeMismatch):
        reaction_sample(model, cond[:, :4], prompt("x"), cfg, sched, norm)
    bad = cond.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ShapeMismatch):
        reaction_sample(model, bad, prompt("x"), cfg, sched, norm)


def make_toy_batch(skel, rng, b=2, t=4, text_width=8, valid=None):
    arrs = np.stack([motion_array(skel, rng, t=t) for _ in range(b)])
    norm = Normalizer.fit([arrs.reshape(-1, t, C5)])
    x0 = torch.as_tensor(norm.normalize(arrs))
    fmask = torch.ones(b, t, dtype=torch.bool)
    if valid is not None:
        fmask[:, valid:] = False
    text = torch.as_tensor(rng.normal(size=(b, 77, text_width)))
    tmask = torch.zeros(b, 77, dtype=torch.bool)
    tmask[:, :3] = True
    return Batch(x0, fmask, text, tmask), norm


def test_train_step_deterministic(small_skeleton, rng):
    model = tiny_model()
    batch, norm = make_toy_batch(small_skeleton, rng)
    sched = cosine_schedule(1000)
    a, ga = train_step(model, batch, sched, LossWeights(), torch.Generator().manual_seed(9), norm, small_skeleton)
    ga = {k: v.clone() for k, v in ga.items()}
    b, gb = train_step(model, batch, sched, LossWeights(), torch.Generator().manual_seed(9), norm, small_skeleton)
    assert a == b
    assert all(torch.equal(ga[k], gb[k]) for k in ga)
    assert set(a) == {"base", "vel", "foot", "bone", "rel_orient", "ada_interact", "total"}


class EchoModel(torch.nn.Module):
    """Predicts exactly the stored clean sample."""

    def __init__(self, x0):
        super().__init__()
        self.config = ModelConfig(block_pairs=1, model_width=8, head_count=2, channel_width=C5)
        self.x0 = x0
        self.dummy = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x1, x2, t, text, mask, frame_mask=None):
        return self.x0[:, 0] + 0 * self.dummy, self.x0[:, 1] + 0 * self.dummy


def test_train_step_zero_when_prediction_is_exact(small_skeleton, rng):
    batch, norm = make_toy_batch(small_skeleton, rng)
    model = EchoModel(batch.x0)
    losses, _ = train_step(model, batch, cosine_schedule(1000), LossWeights.only(base=1.0),
                           torch.Generator().manual_seed(0), norm, small_skeleton)
    assert losses["total"] == 0.0
    losses, _ = train_step(model, batch, cosine_schedule(1000), LossWeights(),
                           torch.Generator().manual_seed(0), norm, small_skeleton)
    assert losses["total"] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("scheme,reaction", [("parallel", False), ("alternating", False), ("parallel", True)])
def test_train_step_gradient_matches_finite_differences(small_skeleton, rng, scheme, reaction):
    model = tiny_model(scheme, reaction)
    batch, norm = make_toy_batch(small_skeleton, rng, valid=3)
    sched = cosine_schedule(1000)
    params = list(model.parameters())

    def loss():
        total, _ = compute_loss(model, batch, sched, LossWeights(), torch.Generator().manual_seed(4), norm,
                                small_skeleton, p_uncond=0.3)
        return total

    _, grads = train_step(model, batch, sched, LossWeights(), torch.Generator().manual_seed(4), norm,
                          small_skeleton, p_uncond=0.3)
    auto = torch.autograd.grad(loss(), params)
    for p, g in zip(params, auto):
        assert torch.allclose(grads[[n for n, q in model.named_parameters() if q is p][0]], g)
    t0 = time.time()
    assert central_fd_check(loss, params, n_probe=24, rng=np.random.default_rng(0)) < 1e-3
    assert time.time() - t0 < 120
