"""Purifying unlearnable examples with a jointly conditioned diffusion sampler."""

__version__ = "0.1.0"
