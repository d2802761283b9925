"""Layer primitives shared by every network, plus weight-file I/O and gradient checks.

Primitives are thin functions over ``torch`` tensors; autograd supplies the
analytic gradients and :func:`grad_check` holds them against central finite
differences.  Convolutions run through ``torch.nn.functional.conv2d`` on CPU,
which uses a fixed reduction order for a given input shape and thread count,
so encoder and decoder evaluating the same tensors get identical bits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.01
GDN_BETA_MIN = 1e-6


# --- functional primitives --------------------------------------------------

def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1) -> torch.Tensor:
    """Zero-padded cross-correlation; stride-s output is ceil(H/s) x ceil(W/s)."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.shape[-3] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[-3]} channels, kernel expects {weight.shape[1]}")
    kh, kw = weight.shape[-2:]
    return F.conv2d(x, weight, bias, stride=stride, padding=(kh // 2, kw // 2))


def gdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor,
        inverse: bool = False) -> torch.Tensor:
    """GDN: x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); IGDN multiplies instead."""
    c = x.shape[-3]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ValueError(f"GDN parameter shapes {tuple(beta.shape)}, {tuple(gamma.shape)} do not match C={c}")
    if bool((beta <= 0).any()):
        raise ValueError("GDN beta must be positive")
    norm = F.conv2d(x * x, gamma.reshape(c, c, 1, 1), beta)
    norm = torch.sqrt(norm)
    return x * norm if inverse else x / norm


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, slope)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def subpixel_upscale(x: torch.Tensor, r: int) -> torch.Tensor:
    """Pixel shuffle: out[c, r*h+i, r*w+j] = in[c*r*r + i*r + j, h, w]."""
    if x.shape[-3] % (r * r):
        raise ValueError(f"{x.shape[-3]} channels not divisible by r^2={r * r}")
    return F.pixel_shuffle(x, r)


def subpixel_downscale(x: torch.Tensor, r: int) -> torch.Tensor:
    """Index inverse of :func:`subpixel_upscale`."""
    return F.pixel_unshuffle(x, r)


def causal_mask(kernel_size: int, mask_type: str = "A") -> torch.Tensor:
    """Raster-order mask; type A also zeroes the centre tap."""
    if kernel_size % 2 == 0:
        raise ValueError("masked convolution needs an odd kernel size")
    if mask_type not in ("A", "B"):
        raise ValueError(f"mask type must be 'A' or 'B', got {mask_type!r}")
    mask = torch.ones(kernel_size, kernel_size)
    c = kernel_size // 2
    mask[c, c + (mask_type == "B"):] = 0
    mask[c + 1:, :] = 0
    return mask


def masked_conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                  mask_type: str = "A") -> torch.Tensor:
    mask = causal_mask(weight.shape[-1], mask_type).to(weight.dtype)
    return conv2d(x, weight * mask, bias)


# --- modules ----------------------------------------------------------------

def _trunc_normal_(t: torch.Tensor, fan_in: int) -> None:
    std = 1.0 / np.sqrt(fan_in)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class Conv2d(nn.Conv2d):
    """Same-padded convolution with truncated-normal (std 1/sqrt(fan_in)) init."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1):
        super().__init__(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2)
        _trunc_normal_(self.weight, in_ch * kernel_size * kernel_size)
        nn.init.zeros_(self.bias)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride[0])


class MaskedConv2d(Conv2d):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 5, mask_type: str = "A"):
        super().__init__(in_ch, out_ch, kernel_size)
        self.register_buffer("mask", causal_mask(kernel_size, mask_type), persistent=False)
        self.mask_type = mask_type

    def masked_weight(self) -> torch.Tensor:
        return self.weight * self.mask

    def forward(self, x):
        return conv2d(x, self.masked_weight(), self.bias)


class GDN(nn.Module):
    """GDN/IGDN with positivity kept by projection (see :meth:`project_`)."""

    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.ones(channels))
        self.gamma = nn.Parameter(gamma_init * torch.eye(channels))

    @torch.no_grad()
    def project_(self) -> None:
        self.beta.clamp_(min=GDN_BETA_MIN)
        self.gamma.clamp_(min=0.0)

    def forward(self, x):
        return gdn(x, self.beta, self.gamma, self.inverse)


def project_parameters_(model: nn.Module) -> None:
    """Re-impose parameter constraints after an optimiser step."""
    for m in model.modules():
        if hasattr(m, "project_") and m is not model:
            m.project_()
    if hasattr(model, "project_"):
        model.project_()


# --- weights file -----------------------------------------------------------
# Sequence of records: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
# then float32 values; all little-endian.

def save_weights(path, tensors: Mapping[str, object]) -> None:
    out = bytearray()
    for name, value in tensors.items():
        arr = np.ascontiguousarray(
            value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value,
            dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos, out = 0, {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated weights file at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    return out


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(fn: Callable[..., torch.Tensor], tensors: Sequence[torch.Tensor], *,
               name: str = "op", eps: float = 1e-4, tolerance: float = 1e-3,
               max_elements: int = 10_000, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of ``sum(fn(*tensors) * probe)`` with central differences.

    Every element of every tensor in ``tensors`` is perturbed, so their total
    size is capped at ``max_elements``.  Computation is done in float64.
    """
    tensors = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in tensors]
    total = sum(t.numel() for t in tensors)
    if total > max_elements:
        raise ValueError(f"{total} elements exceeds the grad-check limit of {max_elements}")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = torch.randn(fn(*tensors).shape, generator=gen, dtype=torch.float64)

    def scalar(*ts):
        return (fn(*ts) * probe).sum()

    scalar(*tensors).backward()
    analytic = np.concatenate([t.grad.numpy().ravel() for t in tensors])
    numeric = np.empty(total)
    k = 0
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = scalar(*tensors).item()
                flat[i] = orig - eps
                minus = scalar(*tensors).item()
                flat[i] = orig
                numeric[k] = (plus - minus) / (2 * eps)
                k += 1
    return GradCheckReport(name, relative_error(analytic, numeric), tolerance, total)
