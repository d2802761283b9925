"""Bitstream coding of the quantized latents.

``z`` is coded with a factorized per-channel Gaussian.  ``y`` is coded in
raster order over positions, all channels of a position together, with
mixture parameters that depend only on positions already coded.  Each stream
ends with a 16-bit ones'-complement checksum of its symbols.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import gmm
from .rangecoder import RangeDecodeError, RangeDecoder, RangeEncoder


class LatentDecodeError(ValueError):
    """Latent stream could not be decoded consistently."""


class ChecksumError(LatentDecodeError):
    """Decoded symbols disagree with the stream's checksum trailer."""


def checksum16(symbols) -> int:
    """Ones'-complement 16-bit sum of the symbols (two's-complement 16-bit words)."""
    words = np.asarray(symbols, dtype=np.int64).ravel() & 0xFFFF
    total = int(words.sum())
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF


def _split_trailer(data: bytes) -> tuple[bytes, int]:
    if len(data) < 2:
        raise LatentDecodeError("latent stream shorter than its checksum trailer")
    return data[:-2], struct.unpack("<H", data[-2:])[0]


def _verify(symbols, expected: int, what: str) -> None:
    got = checksum16(symbols)
    if got != expected:
        raise ChecksumError(f"{what} checksum mismatch: stream {expected:#06x}, decoded {got:#06x}")


def _check_range(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < gmm.SYMBOL_MIN or v.max() > gmm.SYMBOL_MAX):
        raise ValueError("latent values outside [-128, 127]")
    return v


# --- z: factorized prior ----------------------------------------------------

def z_tables(means, scales) -> np.ndarray:
    """Per-channel CDF tables [n, 259] for a single-component prior."""
    means = np.asarray(means, dtype=np.float64)[None, :]
    scales = np.asarray(scales, dtype=np.float64)[None, :]
    return gmm.build_cdf(np.ones_like(means), means, scales)


def code_latents_z(z_hat, means, scales) -> bytes:
    """``z_hat`` is an integer [n, h, w] grid; prior parameters are per channel."""
    z = _check_range(z_hat)
    tables = z_tables(means, scales)
    n = z.shape[0]
    rows = np.repeat(np.arange(n), z[0].size)
    enc = RangeEncoder()
    enc.encode(gmm.symbol_to_bucket(z.ravel()), tables[rows])
    return enc.finish() + struct.pack("<H", checksum16(z))


def decode_latents_z(data: bytes, shape, means, scales) -> np.ndarray:
    body, expected = _split_trailer(data)
    n = shape[0]
    tables = z_tables(means, scales)
    rows = np.repeat(np.arange(n), int(np.prod(shape[1:])))
    try:
        buckets = RangeDecoder(body).decode(tables[rows])
    except RangeDecodeError as exc:
        raise LatentDecodeError(f"z stream: {exc}") from exc
    symbols = gmm.bucket_to_symbol(buckets)
    _verify(symbols, expected, "z")
    if np.any(symbols < gmm.SYMBOL_MIN) or np.any(symbols > gmm.SYMBOL_MAX):
        raise LatentDecodeError("z stream decoded a tail bucket")
    return symbols.reshape(shape)


# --- y: context-adaptive mixture --------------------------------------------

@dataclass
class CodingTrace:
    """Per-position record of the y coding schedule (for audits and tests)."""

    params: list = field(default_factory=list)
    bytes_before: list = field(default_factory=list)


def _padded_buffer(n, h, w, pad, dtype=torch.float32) -> torch.Tensor:
    return torch.zeros(n, h + 2 * pad, w + 2 * pad, dtype=dtype)


def code_latents_y(y_hat, psi: torch.Tensor, entropy_model, trace: CodingTrace | None = None,
                   stop_after: int | None = None) -> bytes:
    """Encode integer ``y_hat`` [n, h, w] given hyper-decoder output ``psi`` [2n, h, w].

    The encoder fills its context buffer position by position exactly as the
    decoder will, so both sides evaluate identical parameters.
    ``stop_after`` truncates coding after that many positions (audit use only).
    """
    y = _check_range(y_hat)
    n, h, w = y.shape
    pad = entropy_model.context.weight.shape[-1] // 2
    buf = _padded_buffer(n, h, w, pad)
    enc = RangeEncoder()
    for t in range(h * w):
        if stop_after is not None and t >= stop_after:
            break
        i, j = divmod(t, w)
        params = entropy_model.at_position(buf, psi, i, j)
        if trace is not None:
            trace.params.append(params)
            trace.bytes_before.append(enc.bytes_written)
        cdf = gmm.build_cdf(*params)
        enc.encode(gmm.symbol_to_bucket(y[:, i, j]), cdf)
        buf[:, i + pad, j + pad] = torch.from_numpy(y[:, i, j].astype(np.float32))
    return enc.finish() + struct.pack("<H", checksum16(y))


def decode_latents_y(data: bytes, shape, psi: torch.Tensor, entropy_model) -> np.ndarray:
    body, expected = _split_trailer(data)
    n, h, w = shape
    pad = entropy_model.context.weight.shape[-1] // 2
    buf = _padded_buffer(n, h, w, pad)
    out = np.empty((n, h, w), dtype=np.int64)
    dec = RangeDecoder(body)
    for t in range(h * w):
        i, j = divmod(t, w)
        cdf = gmm.build_cdf(*entropy_model.at_position(buf, psi, i, j))
        try:
            buckets = dec.decode(cdf)
        except RangeDecodeError as exc:
            raise ChecksumError(f"y stream desynchronised at position {t}: {exc}") from exc
        symbols = gmm.bucket_to_symbol(buckets)
        if np.any(symbols < gmm.SYMBOL_MIN) or np.any(symbols > gmm.SYMBOL_MAX):
            raise ChecksumError(f"y stream desynchronised at position {t}: tail bucket decoded")
        out[:, i, j] = symbols
        buf[:, i + pad, j + pad] = torch.from_numpy(symbols.astype(np.float32))
    _verify(out, expected, "y")
    return out
