"""Gaussian-mixture content prior and its exact diffusion-time marginals.

The clean latent is drawn as ``z = mu_C + sigma * n`` with the component
index ``C`` playing the role of image content.  Under the forward process
the time-t marginal stays a mixture:

    p_t(x) = sum_k pi_k N(x; sqrt(abar_t) mu_k, v_t I),
    v_t = abar_t sigma^2 + (1 - abar_t),

so the score and the component posteriors are available in closed form.
All functions accept a batch of points with shape ``(..., d)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule, alpha_bar


class PriorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ContentPrior:
    weights: np.ndarray
    means: np.ndarray
    sigma: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if w.ndim != 1 or mu.shape[0] != w.size:
            raise PriorError("need one weight per mean vector")
        if np.any(w <= 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-12):
            raise PriorError("weights must be positive and sum to 1")
        if not np.all(np.isfinite(mu)):
            raise PriorError("means must be finite")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise PriorError(f"sigma must be finite and >= 0, got {self.sigma}")
        w.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def global_mean(self) -> np.ndarray:
        return self.weights @ self.means


def make_prior(d: int = 64, K: int = 4, sigma: float = 1.0, mean_separation: float = 8.0,
               seed: int = 1) -> ContentPrior:
    """Equal-weight mixture with means at pairwise distance >= ``mean_separation * sigma``.

    Means are seeded random directions rescaled so the closest pair sits
    exactly at the requested separation.  A single component gets norm
    ``separation / sqrt(2)``, the typical norm of the multi-component case.
    """
    if d < 1 or K < 1:
        raise PriorError(f"need d >= 1 and K >= 1, got d={d}, K={K}")
    if mean_separation < 0:
        raise PriorError("mean_separation must be >= 0")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((K, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    target = mean_separation * sigma
    if K == 1:
        means = dirs * (target / math.sqrt(2.0))
    else:
        closest = min(np.linalg.norm(dirs[i] - dirs[j])
                      for i, j in itertools.combinations(range(K), 2))
        if closest == 0:
            raise PriorError("degenerate mean directions; try another seed")
        means = dirs * (target / closest)
    return ContentPrior(np.full(K, 1.0 / K), means, sigma)


def sample_content(prior: ContentPrior, rng: np.random.Generator,
                   size: int | None = None) -> tuple:
    """Draw ``(C, z_clean)``; with ``size`` returns arrays of that many draws."""
    n = 1 if size is None else size
    C = rng.choice(prior.K, size=n, p=prior.weights)
    z = prior.means[C] + prior.sigma * rng.standard_normal((n, prior.d))
    if size is None:
        return int(C[0]), z[0]
    return C, z


def marginal_variance(prior: ContentPrior, sched: NoiseSchedule, t: int) -> float:
    ab = alpha_bar(sched, t)
    return ab * prior.sigma ** 2 + (1.0 - ab)


def _check_dim(prior: ContentPrior, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (prior.d,):
        raise PriorError(f"expected trailing dimension {prior.d}, got shape {x.shape}")
    return x


def _component_logits(prior, sched, x, t):
    ab = alpha_bar(sched, t)
    v = ab * prior.sigma ** 2 + (1.0 - ab)
    m = math.sqrt(ab) * prior.means
    diff = m - x[..., None, :]
    sq = (diff * diff).sum(axis=-1)
    logits = np.log(prior.weights) - 0.5 * sq / v
    return logits, diff, v


def log_marginal(prior: ContentPrior, sched: NoiseSchedule, x, t: int):
    x = _check_dim(prior, x)
    logits, _, v = _component_logits(prior, sched, x, t)
    out = logsumexp(logits, axis=-1) - 0.5 * prior.d * math.log(2.0 * math.pi * v)
    return out if out.ndim else float(out)


def _posterior(logits: np.ndarray) -> np.ndarray:
    # normalising after exponentiation keeps the sum at 1 to rounding even for huge logits
    r = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return r / r.sum(axis=-1, keepdims=True)


def responsibilities(prior: ContentPrior, sched: NoiseSchedule, x, t: int) -> np.ndarray:
    x = _check_dim(prior, x)
    logits, _, _ = _component_logits(prior, sched, x, t)
    return _posterior(logits)


def score(prior: ContentPrior, sched: NoiseSchedule, x, t: int) -> np.ndarray:
    """Gradient of ``log_marginal`` with respect to ``x``."""
    x = _check_dim(prior, x)
    logits, diff, v = _component_logits(prior, sched, x, t)
    r = _posterior(logits)
    return (r[..., :, None] * diff).sum(axis=-2) / v


def component_score(prior: ContentPrior, sched: NoiseSchedule, x, t: int, k) -> np.ndarray:
    """Score of the time-t marginal of component ``k`` alone.

    ``k`` may be an int or one index per batch row.
    """
    x = _check_dim(prior, x)
    ab = alpha_bar(sched, t)
    v = ab * prior.sigma ** 2 + (1.0 - ab)
    return (math.sqrt(ab) * prior.means[np.asarray(k)] - x) / v


def classify(prior: ContentPrior, sched: NoiseSchedule, x, t: int = 0):
    """Most responsible component (the content label) of each point."""
    logits, _, _ = _component_logits(prior, sched, _check_dim(prior, x), t)
    out = np.argmax(logits, axis=-1)
    return out if out.ndim else int(out)

