"""Spread-spectrum multi-bit watermark on orthonormal latent carriers.

Embedding adds ``delta_m = (rho / sqrt(B)) * sum_i s_i p_i`` with
``s_i = 2 m_i - 1``; decoding is a matched filter, the sign of
``<to_latent(I) - center, p_i>``.  The soft decoder passes the same
projections through a logistic of sharpness ``kappa``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._util import rowdot
from .codec import Codec

_MAX_REDRAWS = 16


class WatermarkError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Message:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 1 or b.size < 1:
            raise WatermarkError("a message needs at least one bit")
        if not np.all((b == 0) | (b == 1)):
            raise WatermarkError("message bits must be 0 or 1")
        b = b.astype(np.int8)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def B(self) -> int:
        return self.bits.size

    @property
    def signs(self) -> np.ndarray:
        return 2.0 * self.bits - 1.0

    def __eq__(self, other):
        return isinstance(other, Message) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def to_hex(self) -> str:
        return bits_to_hex(self.bits)

    @classmethod
    def from_hex(cls, text: str, B: int) -> "Message":
        return cls(hex_to_bits(text, B))

    @classmethod
    def random(cls, B: int, rng: np.random.Generator) -> "Message":
        return cls(rng.integers(0, 2, size=B))


def bits_to_hex(bits) -> str:
    """MSB-first hex encoding, zero-padded to ceil(B/4) digits."""
    bits = np.asarray(bits).astype(int)
    value = int("".join(map(str, bits)), 2)
    return format(value, f"0{math.ceil(bits.size / 4)}x")


def hex_to_bits(text: str, B: int) -> np.ndarray:
    value = int(text, 16)
    if value >= 1 << B:
        raise WatermarkError(f"hex payload {text!r} does not fit in {B} bits")
    return np.array([int(c) for c in format(value, f"0{B}b")], dtype=np.int8)


def gen_carriers(seed: int, d: int, B: int) -> np.ndarray:
    """``B`` orthonormal carriers in R^d as rows, deterministic per seed."""
    if not 1 <= B <= d:
        raise WatermarkError(f"need 1 <= B <= d, got B={B}, d={d}")
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_REDRAWS):
        q, r = np.linalg.qr(rng.standard_normal((d, B)))
        diag = np.abs(np.diag(r))
        if diag.min() > 1e-8 * diag.max():
            q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
            return np.ascontiguousarray(q.T)
    raise WatermarkError("could not draw linearly independent carriers")


@dataclass(frozen=True, eq=False)
class WatermarkKey:
    carriers: np.ndarray
    rho: float
    kappa: float
    center: np.ndarray

    def __post_init__(self):
        P = np.ascontiguousarray(self.carriers, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64)
        if P.ndim != 2 or c.shape != (P.shape[1],):
            raise WatermarkError("center must match the carrier dimension")
        if not np.allclose(P @ P.T, np.eye(P.shape[0]), atol=1e-10):
            raise WatermarkError("carriers are not orthonormal")
        if not (self.rho > 0 and self.kappa > 0):
            raise WatermarkError("rho and kappa must be positive")
        P.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "carriers", P)
        object.__setattr__(self, "center", c)

    @property
    def B(self) -> int:
        return self.carriers.shape[0]

    @property
    def d(self) -> int:
        return self.carriers.shape[1]

    @property
    def amplitude(self) -> float:
        """Per-bit signal amplitude ``rho / sqrt(B)``."""
        return self.rho / math.sqrt(self.B)


def default_kappa(rho: float, B: int) -> float:
    return 4.0 / (rho / math.sqrt(B))


def make_key(seed: int, d: int, B: int, rho: float, center, kappa: float | None = None) -> WatermarkKey:
    return WatermarkKey(gen_carriers(seed, d, B), rho,
                        default_kappa(rho, B) if kappa is None else kappa, center)


def _signs(m, B: int) -> np.ndarray:
    """Signs of one Message, or a ``(N, B)`` array of bits."""
    if isinstance(m, Message):
        if m.B != B:
            raise WatermarkError(f"message has {m.B} bits, key has {B}")
        return m.signs
    bits = np.asarray(m)
    if bits.shape[-1] != B:
        raise WatermarkError(f"messages have {bits.shape[-1]} bits, key has {B}")
    return 2.0 * bits - 1.0


def perturbation(m, key: WatermarkKey) -> np.ndarray:
    return key.amplitude * (_signs(m, key.B)[..., :, None] * key.carriers).sum(axis=-2)


def embed(z_clean, m, key: WatermarkKey) -> np.ndarray:
    z = np.asarray(z_clean, dtype=np.float64)
    if z.shape[-1] != key.d:
        raise WatermarkError(f"latent dimension {z.shape[-1]} != key dimension {key.d}")
    return z + perturbation(m, key)


def project(z, key: WatermarkKey) -> np.ndarray:
    """Matched-filter statistics ``<z - center, p_i>`` in latent space."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != key.d:
        raise WatermarkError(f"latent dimension {z.shape[-1]} != key dimension {key.d}")
    return rowdot(z - key.center, key.carriers)


def _latent(image, key: WatermarkKey, codec: Codec) -> np.ndarray:
    if codec.d != key.d:
        raise WatermarkError(f"codec dimension {codec.d} != key dimension {key.d}")
    return codec.to_latent(image)


def decode_bits(image, key: WatermarkKey, codec: Codec) -> np.ndarray:
    """Hard decisions as an int8 array; batches decode row-wise."""
    return (project(_latent(image, key, codec), key) > 0).astype(np.int8)


def decode_hard(image, key: WatermarkKey, codec: Codec) -> Message:
    bits = decode_bits(image, key, codec)
    if bits.ndim != 1:
        raise WatermarkError("decode_hard takes one image; use decode_bits for batches")
    return Message(bits)


def decode_logits(image, key: WatermarkKey, codec: Codec) -> np.ndarray:
    """``kappa * projection``; the log-odds that each bit is 1."""
    return key.kappa * project(_latent(image, key, codec), key)


def decode_soft(image, key: WatermarkKey, codec: Codec) -> np.ndarray:
    """Probability the decoder assigns to bit value 1, per bit."""
    return _logistic(decode_logits(image, key, codec))


def _logistic(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def wm_loss(image, target, key: WatermarkKey, codec: Codec):
    """Negative average probability of the target message's bits, in [-1, 0]."""
    q = decode_soft(image, key, codec)
    t = (_signs(target, key.B) + 1.0) / 2.0
    out = -(t * q + (1.0 - t) * (1.0 - q)).mean(axis=-1)
    return out if np.ndim(out) else float(out)


def wm_loss_grad(image, target, key: WatermarkKey, codec: Codec) -> np.ndarray:
    """Analytic image-space gradient of :func:`wm_loss`."""
    q = decode_soft(image, key, codec)
    s = _signs(target, key.B)
    w = -(key.kappa / key.B) * s * q * (1.0 - q)
    grad_latent = (w[..., :, None] * key.carriers).sum(axis=-2)
    return codec.to_image(grad_latent)
