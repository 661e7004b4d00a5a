"""Orthogonal latent <-> image codec and pixel-grid rendering.

The codec stands in for a VAE: ``to_image(z) = V z`` and
``to_latent(I) = V^T I`` with ``V`` orthogonal, so norms, inner products and
therefore watermark energy are identical in both spaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._util import rowdot


class CodecError(ValueError):
    pass


def gen_orthogonal(seed: int, d: int) -> np.ndarray:
    """Seeded Haar-distributed orthogonal ``d x d`` matrix (QR of Gaussian draws)."""
    if d < 1:
        raise CodecError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    # sign fix makes the factorisation unique
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q)


@dataclass(frozen=True, eq=False)
class Codec:
    V: np.ndarray

    def __post_init__(self):
        V = np.ascontiguousarray(self.V, dtype=np.float64)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise CodecError("codec matrix must be square")
        V.setflags(write=False)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "_VT", np.ascontiguousarray(V.T))

    @classmethod
    def from_seed(cls, seed: int, d: int) -> "Codec":
        return cls(gen_orthogonal(seed, d))

    @property
    def d(self) -> int:
        return self.V.shape[0]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != (self.d,):
            raise CodecError(f"expected trailing dimension {self.d}, got shape {x.shape}")
        return x

    def to_image(self, z) -> np.ndarray:
        return rowdot(self._check(z), self.V)

    def to_latent(self, image) -> np.ndarray:
        return rowdot(self._check(image), self._VT)


@dataclass(frozen=True)
class RenderMap:
    lo: float
    hi: float
    side: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise CodecError(f"render range needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.side < 1:
            raise CodecError("grid side must be >= 1")

    @classmethod
    def for_prior(cls, prior, codec: Codec, rho: float = 0.0,
                  margin_sigmas: float = 4.0) -> "RenderMap":
        """Range spanning every component mean in image space plus a margin of
        ``margin_sigmas`` per-pixel standard deviations (content noise and
        watermark energy spread over the pixels)."""
        side = grid_side(codec.d)
        if side is None:
            raise CodecError(f"d={codec.d} is not a perfect square; cannot render")
        pix = codec.to_image(prior.means)
        spread = math.sqrt(prior.sigma ** 2 + rho ** 2 / codec.d)
        margin = margin_sigmas * spread
        return cls(float(pix.min() - margin), float(pix.max() + margin), side)

    def to_values(self, grid) -> np.ndarray:
        """Inverse of ``render`` on unclamped pixels."""
        g = np.asarray(grid, dtype=np.float64)
        return self.lo + g.reshape(g.shape[:-2] + (-1,)) * (self.hi - self.lo)


def grid_side(d: int) -> int | None:
    n = math.isqrt(d)
    return n if n * n == d else None


def render(image, rmap: RenderMap) -> np.ndarray:
    """Map image values to an ``n x n`` grid in [0, 1] (row-major)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-1] != rmap.side ** 2:
        raise CodecError(f"image of size {image.shape[-1]} does not fill a {rmap.side}x{rmap.side} grid")
    g = np.clip((image - rmap.lo) / (rmap.hi - rmap.lo), 0.0, 1.0)
    return g.reshape(image.shape[:-1] + (rmap.side, rmap.side))
