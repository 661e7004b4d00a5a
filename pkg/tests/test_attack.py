import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from diffwm import attack as atk
from diffwm import watermark as wm
from diffwm.codec import Codec, RenderMap, render
from diffwm.harness import build, load_config, run_trial, run_trials
from diffwm.prior import sample_content

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def mean_of(recs, col):
    return float(np.mean([float(getattr(r, col)) for r in recs]))


@pytest.fixture(scope="module")
def default_cfg():
    return load_config(CONFIGS / "default.json")


@pytest.fixture(scope="module")
def guided_cfg():
    return load_config(CONFIGS / "guided.json")


@pytest.fixture(scope="module")
def guided_sweep(guided_cfg):
    out = {}
    for label, pt in (("all", {}), ("last10", {"guided_steps": "last:10"}), ("unguided", {"mode": "unguided"})):
        for t in (10, 25, 50):
            out[label, t] = run_trials(guided_cfg.with_overrides({**pt, "t_start": t}))
    return out


def test_unguided_full_strength_is_chance(default_cfg):
    recs = run_trials(default_cfg.with_overrides({"lam": 0.0}))
    assert len(recs) == 500
    assert abs(mean_of(recs, "bit_acc") - 0.5) <= 0.015
    assert sum(r.decode_success for r in recs) == 0


def test_unguided_weak_edit_keeps_watermark(default_cfg):
    recs = run_trials(default_cfg.with_overrides({"t_start": 100}))
    assert mean_of(recs, "bit_acc") >= 0.95


def test_trial_determinism(default_cfg):
    a = run_trial(default_cfg, 17)
    b = run_trial(default_cfg, 17)
    assert a.same_as(b)
    assert np.array_equal(a.soft, b.soft)


def test_guided_defaults_erase(guided_cfg, guided_sweep):
    recs = guided_sweep["all", 50]
    assert abs(mean_of(recs, "bit_acc") - 0.5) <= 0.02
    assert sum(r.decode_success for r in recs) == 0


def test_last_steps_only(guided_sweep):
    last, full = guided_sweep["last10", 50], guided_sweep["all", 50]
    assert mean_of(last, "bit_acc") <= 0.55
    assert mean_of(last, "psnr_db") > mean_of(full, "psnr_db")


@pytest.mark.parametrize("t", [10, 25, 50])
def test_guided_at_least_as_strong(guided_sweep, t):
    assert mean_of(guided_sweep["all", t], "bit_acc") <= mean_of(guided_sweep["unguided", t], "bit_acc") + 0.005


def test_unguided_monotone_in_strength(guided_sweep):
    accs = [guided_sweep["unguided", t] for t in (10, 25, 50)]
    for a, b in zip(accs, accs[1:]):
        ma, mb = mean_of(a, "bit_acc"), mean_of(b, "bit_acc")
        se = math.hypot(np.std([r.bit_acc for r in a], ddof=1), np.std([r.bit_acc for r in b], ddof=1)) / math.sqrt(len(a))
        assert mb <= ma + 3 * se


def test_guided_content_preserved(guided_sweep):
    assert mean_of(guided_sweep["all", 50], "content_match") >= 0.90


def _setup_batch(cfg, n=8, seed=0):
    s = build(cfg)
    r = np.random.default_rng(seed)
    _, z = sample_content(s.prior, r, n)
    bits = r.integers(0, 2, size=(n, s.key.B))
    return s, s.codec.to_image(wm.embed(z, bits, s.key)), bits


def test_gamma_zero_matches_unguided(guided_cfg):
    s, I_w, _ = _setup_batch(guided_cfg)
    cfg = replace(guided_cfg.attack, gamma=0.0)
    a = atk.attack_guided(I_w, s.key, cfg, s.attack_sched, s.prior, s.codec, np.random.default_rng(4))
    b = atk.attack_unguided(I_w, cfg, s.attack_sched, s.prior, s.codec, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_guided_needs_key(guided_cfg):
    s, I_w, _ = _setup_batch(guided_cfg, n=1)
    with pytest.raises(atk.MissingDecoderError):
        atk.attack_guided(I_w[0], None, guided_cfg.attack, s.attack_sched, s.prior, s.codec,
                          np.random.default_rng(0))


def test_unguided_seed_determinism(default_cfg):
    s, I_w, _ = _setup_batch(default_cfg, n=2)
    cfg = replace(default_cfg.attack, t_start=50)
    a = atk.attack_unguided(I_w, cfg, s.sched, s.prior, s.codec, np.random.default_rng(6))
    b = atk.attack_unguided(I_w, cfg, s.sched, s.prior, s.codec, np.random.default_rng(6))
    assert np.array_equal(a, b)


def test_guidance_update_raises_loss(codec, key):
    r = np.random.default_rng(21)
    for _ in range(100):
        x = key.center + 3 * r.standard_normal(64)
        target = r.integers(0, 2, size=32)
        before = wm.wm_loss(codec.to_image(x), target, key, codec)
        after = wm.wm_loss(codec.to_image(atk.guidance_update(x, target, key, codec, 1e-4)), target, key, codec)
        assert after >= before - 1e-12


def test_classical_identities(prior, codec, key):
    rmap = RenderMap.for_prior(prior, codec, key.rho)
    I_w = codec.to_image(prior.means[0] + np.random.default_rng(0).standard_normal(64))
    for cfg in (atk.AttackConfig(mode="noise", noise_sigma=0.0),
                atk.AttackConfig(mode="blur", blur_kernel=1),
                atk.AttackConfig(mode="crop_resize", crop_frac=0.0)):
        assert np.array_equal(atk.attack_classical(I_w, cfg, codec, np.random.default_rng(0), rmap), I_w)


def test_noise_statistics(codec):
    I = np.zeros((20000, 64))
    out = atk.attack_classical(I, atk.AttackConfig(mode="noise", noise_sigma=0.3), codec, np.random.default_rng(1))
    assert abs(out.std() - 0.3) < 0.003 and abs(out.mean()) < 0.003


def test_blur_and_crop_preserve_constant_grid(codec):
    rmap = RenderMap(-2.0, 2.0, 8)
    I = np.full(64, 0.7)
    for cfg in (atk.AttackConfig(mode="blur", blur_kernel=5),
                atk.AttackConfig(mode="blur", blur_kernel=5, blur_sigma=0.8),
                atk.AttackConfig(mode="crop_resize", crop_frac=0.1)):
        assert np.allclose(atk.attack_classical(I, cfg, codec, None, rmap), I, atol=1e-12)


def test_box_blur_matches_direct_average(codec):
    rmap = RenderMap(0.0, 1.0, 8)
    I = np.random.default_rng(3).uniform(0, 1, 64)
    out = atk.attack_classical(I, atk.AttackConfig(mode="blur", blur_kernel=3), codec, None, rmap)
    g = render(I, rmap)
    assert out.reshape(8, 8)[4, 4] == pytest.approx(g[3:6, 3:6].mean(), abs=1e-12)


def test_classical_rejects_non_square():
    c = Codec.from_seed(0, 10)
    for mode in ("blur", "crop_resize"):
        cfg = atk.AttackConfig(mode=mode, crop_frac=0.1)
        with pytest.raises(atk.AttackError):
            atk.attack_classical(np.zeros(10), cfg, c, None, None)


def test_blur_kernel_shapes():
    box = atk.blur_kernel(5)
    assert box.shape == (5, 5) and np.allclose(box, 1 / 25)
    g = atk.blur_kernel(5, 1.0)
    assert g.sum() == pytest.approx(1.0) and g[2, 2] == g.max() and np.allclose(g, g.T)


@pytest.mark.parametrize("spec,want", [
    ("all", set(range(1, 11))),
    ("last:3", {1, 2, 3}),
    ("last:30", set(range(1, 11))),
    ("frac:0.2", {1, 2}),
    ("frac:0.25", {1, 2, 3}),
    ("1,5, 20", {1, 5}),
])
def test_parse_guided_steps(spec, want):
    assert atk.parse_guided_steps(spec, 10) == want


@pytest.mark.parametrize("spec", ["last:-1", "frac:1.5", "0,1", "sometimes"])
def test_parse_guided_steps_rejects(spec):
    with pytest.raises(atk.AttackError):
        atk.parse_guided_steps(spec, 10)


@pytest.mark.parametrize("kw", [
    dict(mode="jpeg"), dict(gamma=-0.1), dict(t_start=0), dict(blur_kernel=4),
    dict(crop_frac=0.5), dict(blur_sigma=0.0), dict(noise_sigma=math.nan),
])
def test_attack_config_rejects(kw):
    with pytest.raises(atk.AttackError):
        atk.AttackConfig(**kw)


def test_t_start_beyond_schedule(sched):
    with pytest.raises(atk.AttackError):
        atk.AttackConfig(t_start=sched.T + 1).resolved_t_start(sched)
