"""Mutual information, Fano's bound and data-processing checks (all in bits).

The per-bit channel is ``Y = S + N(0, v)`` with ``S = +-a`` equiprobable,
the distribution of one carrier projection of the noised latent:
``a = sqrt(abar_t) * rho / sqrt(B)`` and ``v = abar_t sigma^2 + 1 - abar_t``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .prior import ContentPrior
from .schedule import NoiseSchedule, alpha_bar
from .watermark import WatermarkKey

LOG2E = 1.0 / math.log(2.0)


class InfoError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    a: float
    v: float

    def __post_init__(self):
        if not (self.a >= 0 and self.v > 0):
            raise InfoError(f"channel needs a >= 0 and v > 0, got a={self.a}, v={self.v}")

    @property
    def snr(self) -> float:
        return self.a ** 2 / self.v


@dataclass(frozen=True)
class MIEstimate:
    value: float
    method: str
    stderr: float = 0.0
    n: int | None = None
    per_bit: tuple | None = None
    label: str = ""


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise InfoError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -(p * math.log2(p) + (1.0 - p) * math.log2(1.0 - p))


def _log2_1p_exp(u):
    """log2(1 + e^u) without overflow."""
    return np.logaddexp(0.0, u) * LOG2E


def mi_per_bit_analytic(ch: ChannelSpec, tol: float = 1e-8) -> float:
    """I(S; Y) for the binary-input Gaussian channel, by adaptive quadrature.

    Uses the identity H(Y) - h(N) = 1 - E[log2(1 + exp(-2 a Y / v)) | S = +a],
    which is the same quantity as the entropy difference but avoids
    subtracting two nearly equal entropies when the signal is weak.
    """
    a, v = ch.a, ch.v
    if a == 0.0:
        return 0.0
    sd = math.sqrt(v)
    lo, hi = -(a + 10.0 * sd), a + 10.0 * sd

    def integrand(y):
        dens = math.exp(-0.5 * (y - a) ** 2 / v) / (sd * math.sqrt(2.0 * math.pi))
        return dens * float(_log2_1p_exp(-2.0 * a * y / v))

    # breakpoints at both input symbols keep the Gauss-Kronrod panels aligned with the peaks
    loss, _ = integrate.quad(integrand, lo, hi, points=sorted({-a, a}), epsabs=tol, epsrel=tol,
                             limit=200)
    return float(min(1.0, max(0.0, 1.0 - loss)))


def output_entropy(ch: ChannelSpec) -> float:
    """Differential entropy (bits) of the two-Gaussian mixture output ``Y``."""
    a, v = ch.a, ch.v
    sd = math.sqrt(v)
    c = 1.0 / (2.0 * sd * math.sqrt(2.0 * math.pi))

    def integrand(y):
        p = c * (math.exp(-0.5 * (y - a) ** 2 / v) + math.exp(-0.5 * (y + a) ** 2 / v))
        return -p * math.log2(p) if p > 0 else 0.0

    lim = a + 10.0 * sd
    h, _ = integrate.quad(integrand, -lim, lim, points=sorted({-a, 0.0, a}), epsabs=1e-11,
                          epsrel=1e-11, limit=200)
    return h


def channel_at(key: WatermarkKey, sched: NoiseSchedule, prior: ContentPrior, t: int) -> ChannelSpec:
    ab = alpha_bar(sched, t)
    return ChannelSpec(a=math.sqrt(ab) * key.amplitude, v=ab * prior.sigma ** 2 + 1.0 - ab)


def mi_message_state_analytic(key: WatermarkKey, sched: NoiseSchedule, prior: ContentPrior,
                              t: int) -> MIEstimate:
    """Exact I(M; X_t) for a single-component prior (bits add across carriers)."""
    if prior.K != 1:
        raise InfoError(
            "analytic I(M; X_t) needs a single-component prior (K=1); bits are not "
            "independent under a mixture, use mi_plugin on decoded soft bits instead"
        )
    per = mi_per_bit_analytic(channel_at(key, sched, prior, t))
    return MIEstimate(value=key.B * per, method="analytic_quadrature", stderr=0.0,
                      per_bit=(per,) * key.B, label=f"I(M;X_{t})")


def _plugin_from_counts(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts / n
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log2(p[nz] / (px @ py)[nz])).sum())


def quantile_bins(soft, bins: int) -> np.ndarray:
    """Bin index of each value using empirical quantile edges.

    Tied values always share a bin (duplicate edges collapse), so a discrete
    soft output is never split arbitrarily.
    """
    soft = np.asarray(soft, dtype=np.float64)
    edges = np.unique(np.quantile(soft, np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, soft, side="left")


def mi_plugin(pairs, bins: int = 8, label: str = "") -> MIEstimate:
    """Plug-in I(bit; soft) from ``(true_bit, soft_value)`` pairs.

    ``soft_value`` may be any monotone score (probability, logit,
    projection): only its ranks enter through the quantile bins.  The
    standard error is the leave-one-out jackknife.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        raise InfoError("mi_plugin needs at least one pair")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InfoError("pairs must be a sequence of (true_bit, soft) pairs")
    if bins < 2:
        raise InfoError("need at least 2 bins")
    x = arr[:, 0].astype(int)
    y = quantile_bins(arr[:, 1], bins)
    n = len(x)
    counts = np.zeros((2, int(y.max()) + 1))
    np.add.at(counts, (x, y), 1.0)
    value = _plugin_from_counts(counts)
    stderr = 0.0
    if n > 1:
        # leave-one-out estimates take one value per occupied cell
        loo, weight = [], []
        for i, j in zip(*np.nonzero(counts)):
            c = counts.copy()
            c[i, j] -= 1
            loo.append(_plugin_from_counts(c))
            weight.append(counts[i, j])
        loo, weight = np.array(loo), np.array(weight)
        mean = (weight * loo).sum() / n
        stderr = math.sqrt((n - 1) / n * (weight * (loo - mean) ** 2).sum())
    return MIEstimate(value=max(value, 0.0), method="plugin", stderr=stderr, n=n, label=label)


def mi_plugin_message(bits, soft, bins: int = 8, label: str = "") -> MIEstimate:
    """Per-bit plug-in estimates for ``(N, B)`` arrays, summed over bits.

    The sum is exact for independent carriers and otherwise a per-bit
    summary; the standard error treats bit positions as independent.
    """
    bits = np.asarray(bits)
    soft = np.asarray(soft, dtype=np.float64)
    if bits.shape != soft.shape or bits.ndim != 2:
        raise InfoError("bits and soft must both have shape (N, B)")
    if bits.shape[0] == 0:
        raise InfoError("mi_plugin needs at least one trial")
    per = [mi_plugin(np.column_stack([bits[:, i], soft[:, i]]), bins) for i in range(bits.shape[1])]
    return MIEstimate(
        value=sum(e.value for e in per),
        method="plugin",
        stderr=math.sqrt(sum(e.stderr ** 2 for e in per)),
        n=bits.shape[0],
        per_bit=tuple(e.value for e in per),
        label=label,
    )


def _fano_lhs(pe: float, B: int) -> float:
    # log2(2^B - 1) computed stably for large B
    log_m1 = B + math.log2(-math.expm1(-B * math.log(2.0)))
    return binary_entropy(pe) + pe * log_m1


def fano_success_upper(mi_total: float, B: int) -> float:
    """Largest success probability Fano's inequality allows given I(M; Y).

    With M uniform on 2^B messages, any decoder's error P_e satisfies
    h(P_e) + P_e log2(2^B - 1) >= B - I.  The left side increases on
    [0, 1 - 2^-B], so the smallest admissible P_e is its root there.
    """
    if B < 1:
        raise InfoError("B must be >= 1")
    if not (0.0 <= mi_total <= B + 1e-9):
        raise InfoError(f"mutual information {mi_total} outside [0, {B}]")
    need = B - min(mi_total, float(B))
    if need <= 0.0:
        return 1.0
    pe_max = -math.expm1(-B * math.log(2.0))  # 1 - 2^-B
    if need >= B:
        return 2.0 ** -B
    pe = optimize.brentq(lambda p: _fano_lhs(p, B) - need, 0.0, pe_max, xtol=1e-15, rtol=1e-15,
                         maxiter=500)
    return max(1.0 - pe, 2.0 ** -B)


@dataclass(frozen=True)
class DPIPair:
    upstream: str
    downstream: str
    upstream_value: float
    downstream_value: float
    slack: float
    ok: bool


@dataclass(frozen=True)
class DPIReport:
    pairs: tuple
    passed: bool

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if p.ok else 'FAIL'} {p.downstream}={p.downstream_value:.4f} <= "
            f"{p.upstream}={p.upstream_value:.4f} + {p.slack:.4f}"
            for p in self.pairs
        ]


def dpi_report(estimates: Sequence[MIEstimate], n_sigma: float = 3.0) -> DPIReport:
    """Check every ordered pair along a Markov chain (listed upstream first)."""
    if len(estimates) < 2:
        raise InfoError("need at least two estimates along the chain")
    counts = {e.n for e in estimates if e.n is not None}
    if len(counts) > 1:
        raise InfoError(f"estimates come from different trial counts: {sorted(counts)}")
    pairs = []
    for i, up in enumerate(estimates):
        for down in estimates[i + 1:]:
            slack = n_sigma * math.hypot(up.stderr, down.stderr)
            ok = down.value <= up.value + slack
            pairs.append(DPIPair(up.label, down.label, up.value, down.value, slack, ok))
    return DPIReport(tuple(pairs), all(p.ok for p in pairs))
