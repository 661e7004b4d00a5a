"""Trial execution.

``run_trials`` processes a batch of trial ids at once; every row draws from
its own generators and all reductions are row-local, so a record does not
depend on which other trials share its batch (``run_trial`` is the batch of
one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import metrics
from .. import watermark as wm
from ..attack import DIFFUSION_MODES, run_attack
from ..codec import render
from ..prior import sample_content
from .config import ExperimentConfig, Setup, build
from .seeding import derived_seed, trial_streams

CSV_COLUMNS = (
    "trial_id", "seed", "mode", "t_start", "gamma", "lambda", "rho", "B", "d", "K",
    "bit_acc", "decode_success", "psnr_db", "ssim", "snr_emp", "snr_analytic", "content_match",
)

BATCH_ROWS = 256


@dataclass(frozen=True, eq=False)
class TrialRecord:
    trial_id: int
    seed: int
    mode: str
    t_start: int | None
    gamma: float
    lam: float
    rho: float
    B: int
    d: int
    K: int
    noise_sigma: float
    blur_kernel: int
    blur_sigma: float | None
    crop_frac: float
    bit_acc: float
    decode_success: bool
    psnr_db: float
    ssim: float
    snr_emp: float
    snr_analytic: float
    content_match: bool
    content: int
    message_hex: str
    bits: np.ndarray
    decoded: np.ndarray
    soft: np.ndarray
    state_proj: np.ndarray | None

    def csv_values(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "seed": self.seed,
            "mode": self.mode,
            "t_start": "nan" if self.t_start is None else self.t_start,
            "gamma": self.gamma,
            "lambda": self.lam,
            "rho": self.rho,
            "B": self.B,
            "d": self.d,
            "K": self.K,
            "bit_acc": self.bit_acc,
            "decode_success": int(self.decode_success),
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "snr_emp": self.snr_emp,
            "snr_analytic": self.snr_analytic,
            "content_match": int(self.content_match),
        }

    def same_as(self, other: "TrialRecord") -> bool:
        """Field-by-field equality, arrays compared exactly."""
        for f in self.__dataclass_fields__:
            a, b = getattr(self, f), getattr(other, f)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b, equal_nan=True):
                    return False
            elif isinstance(a, float) and math.isnan(a):
                if not (isinstance(b, float) and math.isnan(b)):
                    return False
            elif a != b:
                return False
        return True


def _batch(setup: Setup, trial_ids) -> list[TrialRecord]:
    cfg, acfg = setup.cfg, setup.cfg.attack
    seeds = [derived_seed(cfg.master_seed, int(i)) for i in trial_ids]
    streams = [trial_streams(s, acfg.seed) for s in seeds]

    C, z = zip(*(sample_content(setup.prior, s[0]) for s in streams))
    C, z = np.array(C), np.stack(z)
    bits = np.stack([wm.Message.random(setup.key.B, s[1]).bits for s in streams])
    delta = wm.perturbation(bits, setup.key)
    I_w = setup.codec.to_image(z + delta)

    attack_rngs = [s[2] for s in streams]
    I_att, x_t = run_attack(I_w, acfg, setup.attack_sched, setup.prior, setup.codec, attack_rngs,
                            key=setup.key, rmap=setup.rmap)

    decoded = wm.decode_bits(I_att, setup.key, setup.codec)
    soft = wm.decode_logits(I_att, setup.key, setup.codec)
    acc = metrics.bit_accuracy(bits, decoded)
    ok = metrics.decode_success(bits, decoded)
    match = np.broadcast_to(metrics.content_match(setup.prior, I_w, I_att, setup.codec), (len(seeds),))
    if setup.rmap is not None:
        g_w, g_a = render(I_w, setup.rmap), render(I_att, setup.rmap)
        ps, ss = metrics.psnr(g_w, g_a), metrics.ssim(g_w, g_a)
    else:
        ps = ss = np.full(len(seeds), math.nan)

    diffusion = acfg.mode in DIFFUSION_MODES
    if diffusion:
        t = acfg.resolved_t_start(setup.attack_sched)
        ab = float(setup.attack_sched.alpha_bar[t])
        snr_e = metrics.snr_trial(x_t, z, delta, ab)
        snr_a = metrics.snr_analytic(setup.attack_sched, t, setup.key.rho, setup.key.d)
        proj = wm.project(x_t, setup.key)
    else:
        t, snr_e, snr_a, proj = None, np.full(len(seeds), math.nan), math.nan, None

    out = []
    for r, (tid, seed) in enumerate(zip(trial_ids, seeds)):
        out.append(TrialRecord(
            trial_id=int(tid), seed=seed, mode=acfg.mode, t_start=t,
            gamma=float(acfg.gamma) if acfg.mode == "guided" else 0.0,
            lam=float(acfg.lam) if diffusion else 0.0,
            rho=setup.key.rho, B=setup.key.B, d=setup.key.d, K=setup.prior.K,
            noise_sigma=float(acfg.noise_sigma), blur_kernel=acfg.blur_kernel,
            blur_sigma=acfg.blur_sigma, crop_frac=float(acfg.crop_frac),
            bit_acc=float(acc[r]), decode_success=bool(ok[r]),
            psnr_db=float(ps[r]), ssim=float(ss[r]),
            snr_emp=float(snr_e[r]), snr_analytic=float(snr_a),
            content_match=bool(match[r]), content=int(C[r]),
            message_hex=wm.bits_to_hex(bits[r]), bits=bits[r], decoded=decoded[r], soft=soft[r],
            state_proj=None if proj is None else proj[r],
        ))
    return out


def run_trials(cfg: ExperimentConfig | Setup, trial_ids=None) -> list[TrialRecord]:
    """Records for ``trial_ids`` (default ``range(cfg.trials)``), in that order."""
    setup = cfg if isinstance(cfg, Setup) else build(cfg)
    ids = list(range(setup.cfg.trials)) if trial_ids is None else [int(i) for i in trial_ids]
    out = []
    for k in range(0, len(ids), BATCH_ROWS):
        out.extend(_batch(setup, ids[k:k + BATCH_ROWS]))
    return out


def run_trial(cfg: ExperimentConfig | Setup, trial_id: int) -> TrialRecord:
    return run_trials(cfg, [trial_id])[0]
