"""Watermark-removal attacks.

* ``unguided``: forward-noise the watermarked latent to ``t_start`` and
  regenerate (weak attacker, no decoder access).
* ``guided``: the same regeneration with a gradient step on the watermark
  loss after each reverse step (strong attacker, needs the decoder key).
* ``noise`` / ``blur`` / ``crop_resize``: classical image distortions.

The guidance step is gradient *ascent* on ``wm_loss`` (which is the negative
decoder confidence), scaled by the time-(t-1) marginal variance:

    x_{t-1} <- x_{t-1} + gamma * v_{t-1} * grad_x wm_loss(Dec(x_{t-1}))

so it lowers the decoder's confidence in the pre-attack decode ``m_hat``.
Scaling by ``v`` gives ``gamma`` the units of a score step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import prior as prior_mod
from . import watermark as wm
from ._util import Rng, normal
from .codec import Codec, RenderMap, grid_side, render
from .diffusion import GuidanceSpec, denoise, forward_closed
from .prior import ContentPrior
from .schedule import NoiseSchedule

MODES = ("unguided", "guided", "noise", "blur", "crop_resize")
DIFFUSION_MODES = ("unguided", "guided")


class AttackError(ValueError):
    pass


class MissingDecoderError(AttackError):
    """The guided attack was asked to run without the decoder key."""


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "unguided"
    t_start: int | None = None
    gamma: float = 0.1
    lam: float = 0.0
    prompt_weight: float = 1.0
    guided_steps: str = "all"
    noise_sigma: float = 0.0
    blur_kernel: int = 5
    blur_sigma: float | None = None
    crop_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise AttackError(f"unknown attack mode {self.mode!r}; expected one of {MODES}")
        for name in ("gamma", "lam", "prompt_weight", "noise_sigma"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val) and val >= 0):
                raise AttackError(f"{name} must be a finite number >= 0, got {val!r}")
        if self.t_start is not None and (not isinstance(self.t_start, int) or self.t_start < 1):
            raise AttackError(f"t_start must be a positive integer, got {self.t_start!r}")
        if not (isinstance(self.blur_kernel, int) and self.blur_kernel >= 1 and self.blur_kernel % 2 == 1):
            raise AttackError(f"blur_kernel must be a positive odd integer, got {self.blur_kernel!r}")
        if self.blur_sigma is not None and not self.blur_sigma > 0:
            raise AttackError(f"blur_sigma must be positive when set, got {self.blur_sigma!r}")
        if not 0 <= self.crop_frac < 0.5:
            raise AttackError(f"crop_frac must lie in [0, 0.5), got {self.crop_frac!r}")
        parse_guided_steps(self.guided_steps, 1000)

    def resolved_t_start(self, sched: NoiseSchedule) -> int:
        t = sched.T if self.t_start is None else self.t_start
        if t > sched.T:
            raise AttackError(f"t_start {t} exceeds schedule length {sched.T}")
        return t


def parse_guided_steps(spec: str, t_start: int) -> frozenset:
    """Steps (in 1..t_start) that receive the gradient update.

    ``"all"``; ``"last:K"`` for the final K steps; ``"frac:F"`` for the final
    fraction F of steps (rounded up); or a comma-separated list of steps.
    """
    spec = str(spec).strip()
    try:
        if spec == "all":
            return frozenset(range(1, t_start + 1))
        if spec.startswith("last:"):
            k = int(spec[5:])
            if k < 0:
                raise ValueError
            return frozenset(range(1, min(k, t_start) + 1))
        if spec.startswith("frac:"):
            f = float(spec[5:])
            if not 0 <= f <= 1:
                raise ValueError
            return frozenset(range(1, math.ceil(f * t_start) + 1))
        steps = frozenset(int(s) for s in spec.split(",") if s.strip())
    except ValueError:
        raise AttackError(f"bad guided_steps spec {spec!r}") from None
    if any(s < 1 for s in steps):
        raise AttackError(f"guided steps must be >= 1, got {spec!r}")
    return frozenset(s for s in steps if s <= t_start)


FINAL_20_PERCENT = "frac:0.2"


def _guidance(cfg: AttackConfig, prior, sched, z0, target, t_start, guided: bool) -> GuidanceSpec:
    content = prior_mod.classify(prior, sched, z0, 0) if cfg.prompt_weight > 0 else None
    use_gamma = guided and cfg.gamma > 0
    return GuidanceSpec(
        gamma=cfg.gamma if use_gamma else 0.0,
        lam=cfg.lam,
        reference=z0 if cfg.lam > 0 else None,
        guided_steps=parse_guided_steps(cfg.guided_steps, t_start) if use_gamma else frozenset(),
        target=target if use_gamma else None,
        content=content,
        prompt_weight=cfg.prompt_weight,
    )


def guidance_update(x, target, key: wm.WatermarkKey, codec: Codec, step: float,
                    grad_fn=wm.wm_loss_grad) -> np.ndarray:
    """One ascent step on ``wm_loss`` in latent space (toward lower confidence)."""
    grad = codec.to_latent(grad_fn(codec.to_image(x), target, key, codec))
    return x + step * grad


def diffusion_attack(I_w, cfg: AttackConfig, sched: NoiseSchedule, prior: ContentPrior,
                     codec: Codec, rng: Rng, key: wm.WatermarkKey | None = None):
    """Shared body of both diffusion attacks; returns ``(I', x_{t_start})``.

    Works on one image or a batch of rows.  The guided update runs only when
    ``cfg.mode == "guided"``.
    """
    guided = cfg.mode == "guided"
    if cfg.mode not in DIFFUSION_MODES:
        raise AttackError(f"mode {cfg.mode!r} is not a diffusion attack")
    if guided and key is None:
        raise MissingDecoderError("guided attack needs the watermark decoder (strong attacker)")
    t_start = cfg.resolved_t_start(sched)
    z0 = codec.to_latent(I_w)
    x_t = forward_closed(z0, sched, t_start, rng)
    target = wm.decode_bits(I_w, key, codec) if guided else None
    g = _guidance(cfg, prior, sched, z0, target, t_start, guided)

    def post_step(x, t):
        if t not in g.guided_steps:
            return x
        ab = sched.alpha_bar[t - 1]
        v = ab * prior.sigma ** 2 + (1.0 - ab)
        return guidance_update(x, g.target, key, codec, g.gamma * v)

    x0 = denoise(x_t, sched, prior, t_start, rng, g, post_step if g.gamma > 0 else None)
    return codec.to_image(x0), x_t


def attack_unguided(I_w, cfg: AttackConfig, sched: NoiseSchedule, prior: ContentPrior,
                    codec: Codec, rng: Rng) -> np.ndarray:
    if cfg.mode != "unguided":
        cfg = replace(cfg, mode="unguided")
    return diffusion_attack(I_w, cfg, sched, prior, codec, rng)[0]


def attack_guided(I_w, key: wm.WatermarkKey | None, cfg: AttackConfig, sched: NoiseSchedule,
                  prior: ContentPrior, codec: Codec, rng: Rng) -> np.ndarray:
    if cfg.mode != "guided":
        cfg = replace(cfg, mode="guided")
    return diffusion_attack(I_w, cfg, sched, prior, codec, rng, key=key)[0]


def blur_kernel(side: int, sigma: float | None = None) -> np.ndarray:
    """Normalised ``side x side`` kernel: box, or Gaussian with std ``sigma``."""
    if sigma is None:
        k = np.ones((side, side))
    else:
        r = np.arange(side) - side // 2
        w = np.exp(-0.5 * (r / sigma) ** 2)
        k = np.outer(w, w)
    return k / k.sum()


def _crop_resize_grid(grid: np.ndarray, frac: float) -> np.ndarray:
    n = grid.shape[0]
    c = frac * n
    # output pixel centres spread over the cropped window [c, n - c]
    pos = c + (np.arange(n) + 0.5) * (n - 2 * c) / n - 0.5
    rows, cols = np.meshgrid(pos, pos, indexing="ij")
    return ndimage.map_coordinates(grid, [rows, cols], order=1, mode="nearest")


def attack_classical(I_w, cfg: AttackConfig, codec: Codec, rng: Rng,
                     rmap: RenderMap | None = None) -> np.ndarray:
    I_w = np.asarray(I_w, dtype=np.float64)
    if cfg.mode == "noise":
        if cfg.noise_sigma == 0:
            return I_w.copy()
        return I_w + cfg.noise_sigma * normal(rng, I_w.shape)
    if cfg.mode not in ("blur", "crop_resize"):
        raise AttackError(f"mode {cfg.mode!r} is not a classical attack")
    if grid_side(codec.d) is None:
        raise AttackError(f"{cfg.mode} needs a square image; d={codec.d} is not a perfect square")
    if rmap is None:
        raise AttackError(f"{cfg.mode} needs a render map")
    if cfg.mode == "blur" and cfg.blur_kernel == 1:
        return I_w.copy()
    if cfg.mode == "crop_resize" and cfg.crop_frac == 0:
        return I_w.copy()

    grids = render(I_w, rmap).reshape(-1, rmap.side, rmap.side)
    out = np.empty_like(grids)
    for i, grid in enumerate(grids):
        if cfg.mode == "blur":
            out[i] = ndimage.convolve(grid, blur_kernel(cfg.blur_kernel, cfg.blur_sigma), mode="reflect")
        else:
            out[i] = _crop_resize_grid(grid, cfg.crop_frac)
    return rmap.to_values(out).reshape(I_w.shape)


def run_attack(I_w, cfg: AttackConfig, sched: NoiseSchedule, prior: ContentPrior, codec: Codec,
               rng: Rng, key: wm.WatermarkKey | None = None, rmap: RenderMap | None = None):
    """Dispatch on ``cfg.mode``; returns ``(I', x_{t_start} or None)``."""
    if cfg.mode in DIFFUSION_MODES:
        return diffusion_attack(I_w, cfg, sched, prior, codec, rng, key=key)
    return attack_classical(I_w, cfg, codec, rng, rmap), None
