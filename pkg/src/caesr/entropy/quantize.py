from __future__ import annotations

import torch

from .gmm import SYMBOL_MAX, SYMBOL_MIN


def round_latents(x: torch.Tensor) -> torch.Tensor:
    """Nearest integer, ties away from zero, clamped to the symbol range."""
    r = torch.sign(x) * torch.floor(torch.abs(x) + 0.5)
    return torch.clamp(r, SYMBOL_MIN, SYMBOL_MAX)


def quantize(x: torch.Tensor, mode: str = "round", generator: torch.Generator | None = None,
             noise: torch.Tensor | None = None) -> torch.Tensor:
    """``round`` for coding, ``noise`` (additive U(-1/2, 1/2), no clamp) for training.

    A fixed ``noise`` tensor may be passed to make the training relaxation
    reproducible, e.g. for finite-difference checks.
    """
    if mode == "round":
        return round_latents(x)
    if mode == "noise":
        if noise is None:
            noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) - 0.5
        return x + noise
    raise ValueError(f"unknown quantizer {mode!r}")
