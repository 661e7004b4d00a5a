"""Cross-module invariant suite behind the ``verify`` command.

Each check returns a measured value and the tolerance it was held to.
``faults`` injects deliberate bugs so the suite can be shown to catch them;
the only fault so far is ``"flip_grad_sign"``, which negates the watermark
loss gradient everywhere the suite uses it.
"""

from __future__ import annotations

import inspect
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import attack as atk
from .. import diffusion, infotheory as it, metrics
from .. import prior as prior_mod
from .. import watermark as wm
from ..codec import Codec, RenderMap, render
from ..schedule import make_cosine, make_linear
from .config import from_dict
from .plot import plot
from .runner import CSV_COLUMNS, run_trials
from .sweep import run_sweep

FAULTS = ("flip_grad_sign",)


@dataclass(frozen=True)
class Check:
    module: str
    name: str
    passed: bool
    measured: str
    tolerance: str
    seconds: float = 0.0

    def line(self) -> str:
        return (f"{'PASS' if self.passed else 'FAIL'} [{self.module}] {self.name}: "
                f"{self.measured} (tol {self.tolerance})")


@dataclass(frozen=True)
class Report:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [c.line() for c in self.checks]


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _fd_grad(f, x, h):
    """Central-difference gradient of a batched scalar function, per row."""
    n, d = x.shape
    eye = np.eye(d) * h
    xp = (x[:, None, :] + eye).reshape(-1, d)
    xm = (x[:, None, :] - eye).reshape(-1, d)
    return ((f(xp) - f(xm)) / (2 * h)).reshape(n, d)


class _Ctx:
    def __init__(self, faults):
        unknown = set(faults) - set(FAULTS)
        if unknown:
            raise ValueError(f"unknown fault(s) {sorted(unknown)}; known: {FAULTS}")
        self.faults = set(faults)
        self.lin = make_linear()
        self.cos = make_cosine()
        self.prior = prior_mod.make_prior()
        self.prior1 = prior_mod.make_prior(K=1)
        self.codec = Codec.from_seed(3, 64)
        self.key = wm.make_key(2, 64, 32, 2.5 * math.sqrt(32), self.prior.global_mean)

    def grad(self, image, target, key, codec):
        g = wm.wm_loss_grad(image, target, key, codec)
        return -g if "flip_grad_sign" in self.faults else g


# schedule

def check_schedule_products(c: _Ctx):
    worst = 0.0
    for s in (c.lin, c.cos):
        prod = 1.0
        for t in range(1, s.T + 1):
            prod *= 1.0 - s.beta[t]
            worst = max(worst, abs(prod - s.alpha_bar[t]) / s.alpha_bar[t])
    return worst < 1e-12, f"max rel err {worst:.2e}", "1e-12"


def check_schedule_monotone(c: _Ctx):
    ok = all(np.all(np.diff(s.alpha_bar) < 0) and np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
             for s in (c.lin, c.cos))
    return ok, "abar strictly decreasing, beta in (0,1)" if ok else "violated", "exact"


# prior

def check_prior_score_fd(c: _Ctx):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(0, c.lin.T + 1))
        _, z = prior_mod.sample_content(c.prior, rng)
        x = math.sqrt(c.lin.alpha_bar[t]) * z + rng.standard_normal(64)
        fd = _fd_grad(lambda y: prior_mod.log_marginal(c.prior, c.lin, y, t), x[None], 1e-5)[0]
        worst = max(worst, _rel(fd, prior_mod.score(c.prior, c.lin, x, t)))
    return worst < 1e-5, f"max rel err {worst:.2e}", "1e-5"


def check_prior_simplex(c: _Ctx):
    rng = np.random.default_rng(12)
    x = 20 * rng.standard_normal((500, 64))
    worst = 0.0
    for t in (0, 10, 500, 1000):
        r = prior_mod.responsibilities(c.prior, c.lin, x, t)
        worst = max(worst, float(np.abs(r.sum(-1) - 1).max()), float(-r.min()))
    return worst <= 1e-12, f"max deviation {worst:.2e}", "1e-12"


def check_reverse_fidelity(c: _Ctx):
    N = 2000
    rng = np.random.default_rng(13)
    x = rng.standard_normal((N, 64))
    z = diffusion.denoise(x, c.lin, c.prior1, c.lin.T, rng)
    mean_err = float(np.abs(z.mean(0) - c.prior1.means[0]).max())
    var_err = abs(float(z.var(0).mean()) - c.prior1.sigma ** 2)
    tol = 5 / math.sqrt(N)
    return (mean_err <= tol and var_err <= tol,
            f"max |mean err| {mean_err:.4f}, |mean var err| {var_err:.4f}", f"{tol:.4f}")


# watermark

def check_wm_roundtrip(c: _Ctx):
    rng = np.random.default_rng(14)
    bits = rng.integers(0, 2, size=(1000, 32))
    z = c.key.center + np.zeros((1000, 64))
    out = wm.decode_bits(c.codec.to_image(wm.embed(z, bits, c.key)), c.key, c.codec)
    bad = int((out != bits).any(axis=1).sum())
    return bad == 0, f"{bad}/1000 messages wrong", "0"


def check_wm_energy(c: _Ctx):
    rng = np.random.default_rng(15)
    bits = rng.integers(0, 2, size=(1000, 32))
    z = rng.standard_normal((1000, 64))
    err = float(np.abs(np.linalg.norm(wm.embed(z, bits, c.key) - z, axis=1) - c.key.rho).max())
    return err < 1e-10, f"max |norm - rho| {err:.2e}", "1e-10"


def check_wm_grad_fd(c: _Ctx):
    rng = np.random.default_rng(16)
    worst = 0.0
    for _ in range(100):
        img = c.codec.to_image(c.key.center + rng.standard_normal(64))
        target = rng.integers(0, 2, size=32)
        fd = _fd_grad(lambda y: wm.wm_loss(y, target, c.key, c.codec), img[None], 1e-5)[0]
        worst = max(worst, _rel(fd, c.grad(img, target, c.key, c.codec)))
    return worst < 1e-5, f"max rel err {worst:.2e}", "1e-5"


def check_wm_equivariance(c: _Ctx):
    rng = np.random.default_rng(17)
    z = c.key.center + rng.standard_normal((200, 64))
    v = 50 * rng.standard_normal((200, 64))
    v -= (v @ c.key.carriers.T) @ c.key.carriers
    a = wm.decode_bits(c.codec.to_image(z), c.key, c.codec)
    b = wm.decode_bits(c.codec.to_image(z + v), c.key, c.codec)
    bad = int((a != b).any(axis=1).sum())
    return bad == 0, f"{bad}/200 decodes changed", "0"


# codec

def check_codec_isometry(c: _Ctx):
    rng = np.random.default_rng(18)
    z = rng.standard_normal((200, 64))
    w = rng.standard_normal((200, 64))
    I, J = c.codec.to_image(z), c.codec.to_image(w)
    err = max(float(np.abs((I * J).sum(1) - (z * w).sum(1)).max()),
              float(np.abs(c.codec.to_latent(I) - z).max()))
    return err < 1e-10, f"max err {err:.2e}", "1e-10"


def check_render(c: _Ctx):
    rmap = RenderMap.for_prior(c.prior, c.codec, c.key.rho)
    rng = np.random.default_rng(19)
    img = 10 * rng.standard_normal(64)
    g = render(img, rmap)
    again = render(rmap.to_values(g), rmap)
    order = np.argsort(img)
    mono = bool(np.all(np.diff(g.ravel()[order]) >= 0))
    err = float(np.abs(again - g).max())
    return mono and err < 1e-12, f"monotone={mono}, re-render err {err:.1e}", "1e-12"


# diffusion

def check_forward_moments(c: _Ctx):
    N = 20000
    rng = np.random.default_rng(20)
    _, z = prior_mod.sample_content(c.prior, rng, N)
    p = c.key.carriers[0]
    vz = float((z @ p).var())
    worst = 0.0
    for t in (50, 300, 800):
        ab = c.lin.alpha_bar[t]
        x = diffusion.forward_closed(z, c.lin, t, rng)
        want = ab * vz + (1 - ab)
        worst = max(worst, abs(float((x @ p).var()) / want - 1))
    tol = 5 * math.sqrt(2 / N)
    return worst < tol, f"max rel err {worst:.4f}", f"{tol:.4f}"


def check_snr_law(c: _Ctx):
    key = wm.make_key(2, 64, 32, 1.0, c.prior.global_mean)
    rng = np.random.default_rng(21)
    worst = 0.0
    for s in (c.lin, c.cos):
        for t in (100, 500, 900):
            e = metrics.snr_empirical(key, s, c.prior, t, 100_000, rng)
            a = metrics.snr_analytic(s, t, key.rho, key.d)
            worst = max(worst, abs(e.value / a - 1))
    return worst < 0.03, f"max rel err {worst:.4f}", "0.03"


def check_dataflow(c: _Ctx):
    params = list(inspect.signature(diffusion.denoise).parameters)
    ok = params[0] == "x_t" and not any(p.startswith("z") for p in params)
    return ok, f"denoise({', '.join(params)})", "consumes x_t only"


# attack

def check_guidance_direction(c: _Ctx):
    rng = np.random.default_rng(22)
    worst = math.inf
    for _ in range(100):
        x = c.key.center + rng.standard_normal(64)
        target = rng.integers(0, 2, size=32)
        before = wm.wm_loss(c.codec.to_image(x), target, c.key, c.codec)
        x2 = atk.guidance_update(x, target, c.key, c.codec, 1e-4, grad_fn=c.grad)
        after = wm.wm_loss(c.codec.to_image(x2), target, c.key, c.codec)
        worst = min(worst, after - before)
    return worst >= -1e-12, f"min loss change {worst:.2e}", ">= -1e-12"


GUIDED_SCHEDULE = {"kind": "linear", "T": 50, "beta_start": 0.002, "beta_end": 0.4}


def _attack_sweep(t_values, trials, mode, seed=5, attack_schedule=None):
    base = from_dict({"trials": trials, "master_seed": seed, "attack": {"mode": mode},
                      "attack_schedule": attack_schedule})
    return [float(np.mean([r.bit_acc for r in run_trials(base.with_overrides({"t_start": t}))]))
            for t in t_values]


def check_guided_vs_unguided(c: _Ctx):
    ts = (1, 2, 5, 10, 25, 50)
    g = _attack_sweep(ts, 200, "guided", attack_schedule=GUIDED_SCHEDULE)
    u = _attack_sweep(ts, 200, "unguided", attack_schedule=GUIDED_SCHEDULE)
    worst = max(a - b for a, b in zip(g, u))
    return worst <= 0.005, f"max guided - unguided {worst:+.4f}", "<= 0.005"


def check_unguided_monotone(c: _Ctx):
    ts = (20, 50, 100, 300, 1000)
    trials = 200
    acc = _attack_sweep(ts, trials, "unguided")
    worst = -math.inf
    for a, b in zip(acc, acc[1:]):
        se = math.sqrt((a * (1 - a) + b * (1 - b)) / (trials * 32)) + 1e-12
        worst = max(worst, (b - a) / se)
    return worst <= 3.0, f"largest increase {worst:.2f} sigma", "3 sigma"


def check_guided_content(c: _Ctx):
    cfg = from_dict({"trials": 200, "master_seed": 6, "attack": {"mode": "guided"},
                     "attack_schedule": GUIDED_SCHEDULE})
    frac = float(np.mean([r.content_match for r in run_trials(cfg)]))
    return frac >= 0.9, f"content match {frac:.3f}", ">= 0.90"


# infotheory

def check_mi_monotone(c: _Ctx):
    a = np.linspace(0, 3, 13)
    v = np.linspace(0.2, 3, 8)
    grid = np.array([[it.mi_per_bit_analytic(it.ChannelSpec(ai, vi)) for ai in a] for vi in v])
    ok = bool(np.all(np.diff(grid, axis=1) > 0) and np.all(np.diff(grid[:, 1:], axis=0) < 0))
    return ok, "increasing in a, decreasing in v" if ok else "violated", "strict on grid"


def check_mi_state_monotone(c: _Ctx):
    worst = -math.inf
    for s in (c.lin, c.cos):
        vals = [it.mi_message_state_analytic(c.key, s, c.prior1, t).value for t in range(0, s.T + 1, 10)]
        worst = max(worst, float(np.max(np.diff(vals))))
    return worst <= 1e-9, f"largest increase {worst:.2e}", "<= 1e-9"


def check_fano(c: _Ctx):
    exact = all(it.fano_success_upper(0.0, B) == 2.0 ** -B for B in (1, 8, 32))
    vals = [it.fano_success_upper(x, 8) for x in np.linspace(0, 8, 81)]
    mono = bool(np.all(np.diff(vals) >= -1e-12))
    return exact and mono, f"P(0)=2^-B: {exact}, monotone: {mono}", "exact"


def check_quadrature_mc(c: _Ctx):
    rng = np.random.default_rng(23)
    worst = 0.0
    for a, v in ((0.5, 1.0), (1.0, 1.0), (2.0, 1.5)):
        s = rng.choice([-a, a], size=400_000)
        y = s + math.sqrt(v) * rng.standard_normal(s.size)
        # log-likelihood ratio form of I(S;Y), unbiased per sample
        mc = 1 - float(np.mean(np.logaddexp(0, -2 * s * y / v))) / math.log(2)
        worst = max(worst, abs(mc - it.mi_per_bit_analytic(it.ChannelSpec(a, v))))
    return worst < 0.005, f"max |quad - MC| {worst:.4f}", "0.005"


def check_fano_dpi_sweep(c: _Ctx):
    base = from_dict({"trials": 300, "master_seed": 8, "prior": {"K": 1},
                      "attack": {"mode": "unguided", "prompt_weight": 0.0}})
    with tempfile.TemporaryDirectory() as d:
        res = run_sweep(base, {"t_start": [20, 50, 100, 200, 1000]}, d, "v")
    pts = res.summary["points"]
    fano = all(p["fano_pass"] for p in pts)
    dpi = all(p["dpi_pass"] for p in pts)
    return fano and dpi, f"fano ok at {sum(p['fano_pass'] for p in pts)}/5, dpi ok at " \
        f"{sum(p['dpi_pass'] for p in pts)}/5", "3 stderr"


# metrics

def check_metric_symmetry(c: _Ctx):
    rng = np.random.default_rng(24)
    A, B = rng.random((20, 8, 8)), rng.random((20, 8, 8))
    err = max(float(np.abs(metrics.psnr(A, B) - metrics.psnr(B, A)).max()),
              float(np.abs(metrics.ssim(A, B) - metrics.ssim(B, A)).max()))
    return err == 0.0, f"max asymmetry {err:.1e}", "0"


def check_unattacked_decode(c: _Ctx):
    # amplitude >= 6 projection standard deviations
    key = wm.make_key(2, 64, 32, 6.0 * math.sqrt(32) * c.prior1.sigma, c.prior1.global_mean)
    rng = np.random.default_rng(25)
    _, z = prior_mod.sample_content(c.prior1, rng, 1000)
    bits = rng.integers(0, 2, size=(1000, 32))
    out = wm.decode_bits(c.codec.to_image(wm.embed(z, bits, key)), key, c.codec)
    acc = float(metrics.bit_accuracy(bits, out).mean())
    return acc == 1.0, f"bit accuracy {acc:.6f}", "1.0"


# harness

def _sweep_bytes(d: Path, name: str):
    cfg = from_dict({"trials": 20, "master_seed": 99, "attack": {"mode": "unguided"}})
    res = run_sweep(cfg, {"t_start": [50, 200], "mode": ["unguided", "guided"]}, d, name)
    svg = plot(res.csv_path, "t_start", "bit_acc", "mode", d / f"{name}.svg")
    return [p.read_bytes() for p in (res.csv_path, res.soft_path, res.summary_path, svg)]


def check_determinism(c: _Ctx):
    with tempfile.TemporaryDirectory() as d:
        a = _sweep_bytes(Path(d), "a")
        b = _sweep_bytes(Path(d), "b")
    same = [x == y for x, y in zip(a, b)]
    return all(same), f"identical outputs: {sum(same)}/{len(same)}", "byte-identical"


def check_seed_isolation(c: _Ctx):
    cfg = from_dict({"trials": 12, "master_seed": 3, "attack": {"mode": "guided", "t_start": 40}})
    fwd = run_trials(cfg, range(12))
    perm = [7, 2, 11, 0, 5, 9, 1, 4, 10, 3, 8, 6]
    rev = {r.trial_id: r for r in run_trials(cfg, perm)}
    same = sum(r.same_as(rev[r.trial_id]) for r in fwd)
    return same == 12, f"{same}/12 records unchanged", "all"


def check_csv_schema(c: _Ctx):
    want = ("trial_id,seed,mode,t_start,gamma,lambda,rho,B,d,K,bit_acc,decode_success,"
            "psnr_db,ssim,snr_emp,snr_analytic,content_match")
    got = ",".join(CSV_COLUMNS)
    return got == want, got, "fixed order"


CHECKS = (
    ("schedule", "abar matches looped product", check_schedule_products),
    ("schedule", "abar decreasing, beta in (0,1)", check_schedule_monotone),
    ("prior", "score vs finite differences", check_prior_score_fd),
    ("prior", "responsibilities on simplex", check_prior_simplex),
    ("prior", "reverse fidelity from noise (K=1)", check_reverse_fidelity),
    ("watermark", "noise-free round trip", check_wm_roundtrip),
    ("watermark", "embedding energy equals rho", check_wm_energy),
    ("watermark", "wm_loss_grad vs finite differences", check_wm_grad_fd),
    ("watermark", "decoder ignores off-carrier changes", check_wm_equivariance),
    ("codec", "isometry and round trip", check_codec_isometry),
    ("codec", "render monotone and idempotent", check_render),
    ("diffusion", "forward moment law", check_forward_moments),
    ("diffusion", "empirical SNR matches analytic (both schedules)", check_snr_law),
    ("diffusion", "regeneration reads only x_t", check_dataflow),
    ("attack", "guidance step lowers decoder confidence", check_guidance_direction),
    ("attack", "guided removes at least as much as unguided", check_guided_vs_unguided),
    ("attack", "unguided accuracy non-increasing in t_start", check_unguided_monotone),
    ("attack", "guided content preservation", check_guided_content),
    ("infotheory", "per-bit MI monotone in a and v", check_mi_monotone),
    ("infotheory", "I(M;X_t) non-increasing in t", check_mi_state_monotone),
    ("infotheory", "Fano bound endpoints and monotonicity", check_fano),
    ("infotheory", "quadrature MI vs Monte Carlo", check_quadrature_mc),
    ("infotheory", "sweep obeys Fano and DPI", check_fano_dpi_sweep),
    ("metrics", "PSNR and SSIM symmetric", check_metric_symmetry),
    ("metrics", "unattacked decode is exact at 6 sigma", check_unattacked_decode),
    ("harness", "byte-identical CSV, JSON, SVG", check_determinism),
    ("harness", "trial order does not change records", check_seed_isolation),
    ("harness", "CSV schema", check_csv_schema),
)


def verify(faults=(), only=None) -> Report:
    """Run every check (or those whose module is in ``only``)."""
    ctx = _Ctx(faults)
    out = []
    for module, name, fn in CHECKS:
        if only and module not in only:
            continue
        t0 = time.perf_counter()
        try:
            ok, measured, tol = fn(ctx)
        except Exception as e:  # a crash is a failed check, not an aborted report
            ok, measured, tol = False, f"raised {type(e).__name__}: {e}", "no exception"
        out.append(Check(module, name, bool(ok), measured, tol, time.perf_counter() - t0))
    return Report(tuple(out))
