"""Entropy coding: quantisation, mixture CDF tables, range coder and latent streams."""
from .gmm import build_cdf, estimate_rate, gmm_likelihood, gmm_pmf, snap_params
from .latents import ChecksumError, LatentDecodeError, code_latents_y, code_latents_z, decode_latents_y, decode_latents_z
from .quantize import quantize, round_latents
from .rangecoder import BACKEND, RangeDecodeError, RangeDecoder, RangeEncoder
