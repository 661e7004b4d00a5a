"""Analytic testbed for diffusion-based removal of latent watermarks."""

from .schedule import NoiseSchedule, make_cosine, make_linear, make_schedule
from .prior import ContentPrior, make_prior
from .codec import Codec, RenderMap
from .watermark import Message, WatermarkKey, make_key

__version__ = "0.1.0"

__all__ = [
    "Codec",
    "ContentPrior",
    "Message",
    "NoiseSchedule",
    "RenderMap",
    "WatermarkKey",
    "make_cosine",
    "make_key",
    "make_linear",
    "make_prior",
    "make_schedule",
]
