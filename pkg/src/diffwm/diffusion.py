"""Forward noising and ancestral reverse sampling with the exact prior score.

The reverse sampler uses the posterior variance
``beta_t (1 - abar_{t-1}) / (1 - abar_t)`` and draws no noise on the final
step.  Optional conditioning terms are added to the score:

* a quadratic pull of weight ``lam`` toward the (encoded) reference,
  ``lam * (sqrt(abar_t) r - x) / v_t``;
* a content prompt: the score is interpolated toward the score of one
  mixture component with weight ``prompt_weight`` (classifier-free style).

Everything is vectorised over leading batch dimensions; pass one generator
per row to keep each row's noise stream independent of the batch.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import prior as prior_mod
from ._util import Rng, normal
from .prior import ContentPrior
from .schedule import NoiseSchedule, ScheduleError, alpha_bar


@dataclass(frozen=True, eq=False)
class GuidanceSpec:
    """Conditioning for the reverse process.

    ``reference`` is given in latent coordinates (already passed through the
    codec).  ``content`` is a component index, or one per batch row.
    ``gamma``, ``guided_steps`` and ``target`` describe the watermark-gradient
    update; that update is applied by the attack, not by :func:`reverse_step`.
    """

    gamma: float = 0.0
    lam: float = 0.0
    reference: np.ndarray | None = None
    guided_steps: frozenset = frozenset()
    target: object = None
    content: object = None
    prompt_weight: float = 0.0

    def __post_init__(self):
        for name in ("gamma", "lam", "prompt_weight"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if (self.target is not None) != (self.gamma > 0):
            raise ValueError("a target message is required exactly when gamma > 0")
        if self.lam > 0 and self.reference is None:
            raise ValueError("lam > 0 needs a reference")
        if self.prompt_weight > 0 and self.content is None:
            raise ValueError("prompt_weight > 0 needs a content label")


UNGUIDED = GuidanceSpec()


def forward_closed(z0, sched: NoiseSchedule, t: int, rng: Rng) -> np.ndarray:
    """Sample x_t ~ q(x_t | x_0 = z0) in one shot."""
    z0 = np.asarray(z0, dtype=np.float64)
    ab = alpha_bar(sched, t)
    eps = normal(rng, z0.shape)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def forward_step(x_prev, sched: NoiseSchedule, t: int, rng: Rng) -> np.ndarray:
    """One Markov step x_{t-1} -> x_t."""
    if not 1 <= t <= sched.T:
        raise ScheduleError(f"forward step {t} outside [1, {sched.T}]")
    x_prev = np.asarray(x_prev, dtype=np.float64)
    a = sched.alpha[t]
    return math.sqrt(a) * x_prev + math.sqrt(1.0 - a) * normal(rng, x_prev.shape)


def guided_score(x, sched: NoiseSchedule, prior: ContentPrior, t: int,
                 g: GuidanceSpec = UNGUIDED) -> np.ndarray:
    s = prior_mod.score(prior, sched, x, t)
    if g.prompt_weight > 0:
        s_c = prior_mod.component_score(prior, sched, x, t, g.content)
        s = s + g.prompt_weight * (s_c - s)
    if g.lam > 0:
        ab = sched.alpha_bar[t]
        v = ab * prior.sigma ** 2 + (1.0 - ab)
        s = s + g.lam * (math.sqrt(ab) * g.reference - x) / v
    return s


def reverse_step(x, sched: NoiseSchedule, prior: ContentPrior, t: int, rng: Rng,
                 g: GuidanceSpec = UNGUIDED) -> np.ndarray:
    """Ancestral step x_t -> x_{t-1}."""
    if not 1 <= t <= sched.T:
        raise ScheduleError(f"reverse step {t} outside [1, {sched.T}]")
    x = np.asarray(x, dtype=np.float64)
    a = sched.alpha[t]
    s = guided_score(x, sched, prior, t, g)
    mean = (x + (1.0 - a) * s) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + math.sqrt(sched.posterior_variance(t)) * normal(rng, x.shape)


PostStep = Callable[[np.ndarray, int], np.ndarray]


def denoise(x_t, sched: NoiseSchedule, prior: ContentPrior, t_start: int, rng: Rng,
            g: GuidanceSpec = UNGUIDED, post_step: PostStep | None = None) -> np.ndarray:
    """Run reverse steps t_start..1 from a noised state.

    ``post_step(x_prev, t)`` is called after the step t -> t-1 and may return
    an adjusted state (the attack's gradient update hooks in here).  The
    function only ever sees ``x_t``; the clean latent is not an input.
    """
    if not 1 <= t_start <= sched.T:
        raise ScheduleError(f"t_start {t_start} outside [1, {sched.T}]")
    x = np.asarray(x_t, dtype=np.float64)
    for t in range(t_start, 0, -1):
        x = reverse_step(x, sched, prior, t, rng, g)
        if post_step is not None:
            x = post_step(x, t)
    return x


def regenerate(start, sched: NoiseSchedule, prior: ContentPrior, t_start: int,
               g: GuidanceSpec, rng: Rng) -> np.ndarray:
    """Noise ``start`` to step ``t_start`` and denoise back to step 0."""
    if g.gamma > 0:
        raise ValueError("regenerate does not apply watermark guidance; use attack.attack_guided")
    if not 1 <= t_start <= sched.T:
        raise ScheduleError(f"t_start {t_start} outside [1, {sched.T}]")
    x_t = forward_closed(start, sched, t_start, rng)
    return denoise(x_t, sched, prior, t_start, rng, g)
