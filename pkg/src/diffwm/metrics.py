"""Effectiveness and fidelity metrics.

Functions accept single items or batches along leading axes where that is
natural (bit arrays of shape ``(N, B)``, grids of shape ``(N, n, n)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import prior as prior_mod
from . import watermark as wm
from .codec import Codec
from .prior import ContentPrior
from .schedule import NoiseSchedule, alpha_bar, make_linear

PSNR_SENTINEL = 99.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class MetricError(ValueError):
    pass


class NoNoiseError(MetricError):
    """SNR requested at t=0 where the diffusion noise energy is zero."""


@dataclass(frozen=True)
class TrialMetrics:
    bit_acc: float
    decode_success: bool
    snr_emp: float
    snr_analytic: float
    psnr_db: float
    ssim: float
    content_match: bool

    def __post_init__(self):
        if not 0.0 <= self.bit_acc <= 1.0:
            raise MetricError(f"bit_acc out of range: {self.bit_acc}")
        if self.decode_success and self.bit_acc != 1.0:
            raise MetricError("decode_success requires bit_acc == 1")


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, wm.Message) else np.asarray(m)


def _pair(m, m_hat):
    a, b = _bits(m), _bits(m_hat)
    if a.shape != b.shape:
        raise MetricError(f"message shapes differ: {a.shape} vs {b.shape}")
    return a, b


def bit_accuracy(m, m_hat):
    """Fraction of matching bits (per row for ``(N, B)`` arrays)."""
    a, b = _pair(m, m_hat)
    out = (a == b).mean(axis=-1)
    return out if np.ndim(out) else float(out)


def decode_success(m, m_hat):
    a, b = _pair(m, m_hat)
    out = (a == b).all(axis=-1)
    return out if np.ndim(out) else bool(out)


@dataclass(frozen=True)
class SNREstimate:
    value: float
    stderr: float
    n: int


def snr_analytic(sched: NoiseSchedule, t: int, rho: float, d: int) -> float:
    ab = alpha_bar(sched, t)
    if ab >= 1.0:
        raise NoNoiseError(f"no noise at t={t} (abar=1): the SNR is unbounded")
    return ab * rho ** 2 / ((1.0 - ab) * d)


def snr_empirical(key: wm.WatermarkKey, sched: NoiseSchedule, prior: ContentPrior, t: int,
                  N: int, rng: np.random.Generator, chunk: int = 8192) -> SNREstimate:
    """Monte Carlo watermark SNR at step ``t`` from paired forward samples.

    Each sample noises the same clean latent and noise draw with and without
    the watermark.  The difference of the pair, projected on the carriers,
    is the watermark component; the control minus its clean part is the
    noise.  The estimate is a ratio of means with a delta-method stderr.
    """
    if N < 1000:
        raise MetricError(f"snr_empirical needs N >= 1000, got {N}")
    ab = alpha_bar(sched, t)
    if ab >= 1.0:
        return SNREstimate(math.inf, 0.0, N)
    sig, noi = [], []
    done = 0
    while done < N:
        n = min(chunk, N - done)
        _, z = prior_mod.sample_content(prior, rng, n)
        bits = rng.integers(0, 2, size=(n, key.B))
        eps = rng.standard_normal((n, prior.d))
        x_ctrl = math.sqrt(ab) * z + math.sqrt(1.0 - ab) * eps
        x_wm = math.sqrt(ab) * wm.embed(z, bits, key) + math.sqrt(1.0 - ab) * eps
        proj = (x_wm - x_ctrl) @ key.carriers.T
        sig.append((proj ** 2).sum(axis=1))
        noise = x_ctrl - math.sqrt(ab) * z
        noi.append((noise ** 2).sum(axis=1))
        done += n
    s, e = np.concatenate(sig), np.concatenate(noi)
    ms, me = s.mean(), e.mean()
    r = ms / me
    # delta method for a ratio of means
    cov = np.cov(s, e)
    var = (cov[0, 0] / me ** 2 - 2 * r * cov[0, 1] / me ** 2 + r ** 2 * cov[1, 1] / me ** 2) / N
    return SNREstimate(float(r), float(math.sqrt(max(var, 0.0))), N)


def snr_trial(x_t, z_clean, delta, ab: float) -> float:
    """Realised SNR of one noised state: watermark energy over noise energy."""
    if ab >= 1.0:
        return math.inf
    noise = np.asarray(x_t) - math.sqrt(ab) * (np.asarray(z_clean) + np.asarray(delta))
    e = (noise ** 2).sum(axis=-1)
    out = ab * (np.asarray(delta) ** 2).sum(axis=-1) / e
    return out if np.ndim(out) else float(out)


def _grids(A, Bg):
    a = np.asarray(A, dtype=np.float64)
    b = np.asarray(Bg, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"grid shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(A, Bgrid):
    """Peak-1 PSNR in dB; zero MSE returns ``PSNR_SENTINEL``."""
    a, b = _grids(A, Bgrid)
    mse = ((a - b) ** 2).mean(axis=(-2, -1))
    with np.errstate(divide="ignore"):
        out = np.where(mse > 0, -10.0 * np.log10(np.where(mse > 0, mse, 1.0)), PSNR_SENTINEL)
    out = np.minimum(out, PSNR_SENTINEL)
    return out if np.ndim(out) else float(out)


def ssim(A, Bgrid):
    """Mean SSIM over all valid 7x7 uniform windows (stride 1, peak 1)."""
    a, b = _grids(A, Bgrid)
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(f"grids must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[-2:]}")
    w = (SSIM_WINDOW, SSIM_WINDOW)
    wa = sliding_window_view(a, w, axis=(-2, -1))
    wb = sliding_window_view(b, w, axis=(-2, -1))
    ax = (-2, -1)
    mu_a, mu_b = wa.mean(axis=ax), wb.mean(axis=ax)
    var_a = (wa * wa).mean(axis=ax) - mu_a ** 2
    var_b = (wb * wb).mean(axis=ax) - mu_b ** 2
    cov = (wa * wb).mean(axis=ax) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    out = (num / den).mean(axis=(-2, -1))
    return out if np.ndim(out) else float(out)


def content_match(prior: ContentPrior, I_w, I_prime, codec: Codec, sched: NoiseSchedule | None = None):
    """Whether both images fall in the same most-responsible component at t=0."""
    if prior.K == 1:
        shape = np.shape(I_w)[:-1]
        return np.ones(shape, dtype=bool) if shape else True
    if sched is None:
        # responsibilities at t=0 do not depend on the schedule
        sched = make_linear(1)
    a = prior_mod.classify(prior, sched, codec.to_latent(I_w), 0)
    b = prior_mod.classify(prior, sched, codec.to_latent(I_prime), 0)
    out = np.asarray(a) == np.asarray(b)
    return out if out.ndim else bool(out)
