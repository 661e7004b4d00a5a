import inspect
import math

import numpy as np
import pytest

from diffwm import codec as codec_mod
from diffwm import diffusion as df
from diffwm import make_linear
from diffwm import watermark as wm
from diffwm.metrics import psnr
from diffwm.prior import sample_content
from diffwm.schedule import NoiseSchedule, ScheduleError


def rngs(n, seed=0):
    return [np.random.default_rng([seed, i]) for i in range(n)]


def test_forward_closed_t0_identity(sched, rng):
    z = rng.standard_normal(64)
    assert np.array_equal(df.forward_closed(z, sched, 0, rng), z)


@pytest.mark.parametrize("t", [10, 300, 1000])
def test_forward_projection_moments(sched, rng, t):
    N = 100_000
    p = wm.gen_carriers(5, 16, 1)[0]
    z0 = rng.standard_normal(16)
    x = df.forward_closed(np.broadcast_to(z0, (N, 16)), sched, t, rng)
    proj = x @ p
    ab = sched.alpha_bar[t]
    sd = math.sqrt(1 - ab)
    assert abs(proj.mean() - math.sqrt(ab) * (z0 @ p)) < 5 * sd / math.sqrt(N)
    assert abs(proj.var() - sd ** 2) < 5 * sd ** 2 * math.sqrt(2 / N)


def test_forward_pure_noise_limit(rng):
    s = make_linear(2000, 1e-4, 0.05)
    x = df.forward_closed(np.full((50_000, 4), 3.0), s, s.T, rng)
    assert np.all(np.abs(x.mean(0)) < 0.03)
    assert np.all(np.abs(x.var(0) - 1) < 0.03)


def test_forward_step_tiny_beta_identity(rng):
    s = NoiseSchedule.from_betas("linear", [1e-300])
    z = rng.standard_normal(8)
    assert np.allclose(df.forward_step(z, s, 1, rng), z, atol=1e-100, rtol=0)


def test_forward_step_iterated_matches_closed(rng):
    s = make_linear(50, 0.002, 0.1)
    N, d = 100_000, 4
    z0 = np.array([2.0, -1.0, 0.5, 0.0])
    x = np.broadcast_to(z0, (N, d)).copy()
    for t in range(1, s.T + 1):
        x = df.forward_step(x, s, t, rng)
    ab = s.alpha_bar[s.T]
    sd = math.sqrt(1 - ab)
    assert np.all(np.abs(x.mean(0) - math.sqrt(ab) * z0) < 5 * sd / math.sqrt(N))
    assert np.all(np.abs(x.var(0) - sd ** 2) < 5 * sd ** 2 * math.sqrt(2 / N))


def test_forward_step_determinism_and_range(sched):
    z = np.ones(8)
    a = df.forward_step(z, sched, 5, np.random.default_rng(3))
    b = df.forward_step(z, sched, 5, np.random.default_rng(3))
    assert np.array_equal(a, b)
    for t in (0, sched.T + 1):
        with pytest.raises(ScheduleError):
            df.forward_step(z, sched, t, np.random.default_rng(3))


def test_reverse_fidelity_k1(sched, prior1, rng):
    N = 2000
    _, z = sample_content(prior1, rng, N)
    x_T = df.forward_closed(z, sched, sched.T, rng)
    out = df.denoise(x_T, sched, prior1, sched.T, rng)
    mu = prior1.means[0]
    sig = prior1.sigma
    assert np.all(np.abs(out.mean(0) - mu) < 5 * sig / math.sqrt(N))
    pooled = ((out - mu) ** 2).mean()
    assert abs(pooled - sig ** 2) < 5 * sig ** 2 * math.sqrt(2 / (N * 64))


def test_reverse_step_t1_has_no_noise(sched, prior, rng):
    x = rng.standard_normal(64)
    a = df.reverse_step(x, sched, prior, 1, np.random.default_rng(1))
    b = df.reverse_step(x, sched, prior, 1, np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_reverse_step_formula(sched, prior, rng):
    x = rng.standard_normal(64)
    t = 400
    from diffwm.prior import score
    a = sched.alpha[t]
    noise = np.random.default_rng(9).standard_normal(64)
    want = (x + (1 - a) * score(prior, sched, x, t)) / math.sqrt(a) + math.sqrt(sched.posterior_variance(t)) * noise
    got = df.reverse_step(x, sched, prior, t, np.random.default_rng(9))
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_reverse_step_range(sched, prior):
    for t in (0, sched.T + 1):
        with pytest.raises(ScheduleError):
            df.reverse_step(np.zeros(64), sched, prior, t, np.random.default_rng(0))


def test_reference_pull_term(sched, prior, rng):
    x, r = rng.standard_normal(64), rng.standard_normal(64)
    t, lam = 250, 0.3
    g = df.GuidanceSpec(lam=lam, reference=r)
    ab = sched.alpha_bar[t]
    v = ab * prior.sigma ** 2 + 1 - ab
    diff = df.guided_score(x, sched, prior, t, g) - df.guided_score(x, sched, prior, t)
    assert np.allclose(diff, lam * (math.sqrt(ab) * r - x) / v, atol=1e-12)


def test_lambda_sweep_increases_psnr(sched, prior, codec, key):
    rmap = codec_mod.RenderMap.for_prior(prior, codec, key.rho)
    N = 200
    r = np.random.default_rng(5)
    _, z = sample_content(prior, r, N)
    z_w = wm.embed(z, r.integers(0, 2, size=(N, 32)), key)
    ref = codec_mod.render(codec.to_image(z_w), rmap)
    means = []
    for lam in (0.0, 0.01, 0.1, 1.0):
        g = df.GuidanceSpec(lam=lam, reference=z_w if lam > 0 else None)
        out = df.regenerate(z_w, sched, prior, sched.T, g, rngs(N, 7))
        means.append(psnr(ref, codec_mod.render(codec.to_image(out), rmap)).mean())
    assert all(b > a for a, b in zip(means, means[1:])), means


def test_regenerate_independent_of_start(sched, prior1, codec):
    N, B = 2000, 8
    k = wm.make_key(11, 64, B, 2.5 * math.sqrt(B), prior1.global_mean)
    r = np.random.default_rng(8)
    _, z = sample_content(prior1, r, N)
    bits = r.integers(0, 2, size=(N, B))
    out = df.regenerate(wm.embed(z, bits, k), sched, prior1, sched.T, df.UNGUIDED, rngs(N, 9))
    proj = (out - k.center) @ k.carriers.T
    s = 2.0 * bits - 1
    for j in range(B):
        c = np.corrcoef(proj[:, j], s[:, j])[0, 1]
        assert abs(c) < 3 / math.sqrt(N)


def test_regenerate_small_t_keeps_watermark(sched, prior, codec, key):
    N = 300
    r = np.random.default_rng(10)
    _, z = sample_content(prior, r, N)
    bits = r.integers(0, 2, size=(N, 32))
    out = df.regenerate(wm.embed(z, bits, key), sched, prior, 10, df.UNGUIDED, rngs(N, 11))
    acc = (wm.decode_bits(codec.to_image(out), key, codec) == bits).mean()
    assert acc >= 0.95


def test_regenerate_determinism_and_batch_identity(sched, prior, rng):
    z = rng.standard_normal((4, 64))
    a = df.regenerate(z, sched, prior, 200, df.UNGUIDED, rngs(4, 3))
    b = df.regenerate(z, sched, prior, 200, df.UNGUIDED, rngs(4, 3))
    assert np.array_equal(a, b)
    single = df.regenerate(z[2:3], sched, prior, 200, df.UNGUIDED, rngs(4, 3)[2:3])
    assert np.array_equal(single[0], a[2])


def test_regenerate_rejects(sched, prior):
    with pytest.raises(ValueError):
        df.regenerate(np.zeros(64), sched, prior, 10, df.GuidanceSpec(gamma=0.1, target=np.zeros(32)),
                      np.random.default_rng(0))
    with pytest.raises(ScheduleError):
        df.regenerate(np.zeros(64), sched, prior, 0, df.UNGUIDED, np.random.default_rng(0))


@pytest.mark.parametrize("kw", [
    dict(gamma=-1.0),
    dict(lam=math.inf, reference=np.zeros(4)),
    dict(gamma=0.1),
    dict(target=np.zeros(4)),
    dict(lam=0.1),
    dict(prompt_weight=1.0),
])
def test_guidance_spec_validation(kw):
    with pytest.raises(ValueError):
        df.GuidanceSpec(**kw)


def test_denoise_sees_only_noised_state():
    params = list(inspect.signature(df.denoise).parameters)
    assert params[0] == "x_t"
    assert not any("z0" in p or "clean" in p for p in params)
