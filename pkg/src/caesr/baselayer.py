"""Base-layer codecs: a self-contained toy intra codec and an external-codec adapter.

Toy stream layout (little-endian)::

    u16 width, u16 height, u8 qp, u8 subsampling (0 = 420, 1 = 444)
    bit payload: for every plane, every 8x8 block in raster order:
        ue(number of nonzero coefficients), then per nonzero coefficient in
        zig-zag order ue(zero run before it), se(level)

The transform is an integer 8x8 DCT-II with 13-bit coefficients and the
quantizer follows the HEVC step mapping ``Qstep = 2 ** ((qp - 4) / 6)`` in
integer form, so decoding never touches floating point.
"""
from __future__ import annotations

import os
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import PlanarImage, read_yuv, write_yuv

TRANSFORM_BITS = 13
_k = np.arange(8)
_basis = np.cos(np.pi * (2 * _k[None, :] + 1) * _k[:, None] / 16) * np.sqrt(2 / 8)
_basis[0] /= np.sqrt(2)
DCT_MATRIX = np.round(_basis * (1 << TRANSFORM_BITS)).astype(np.int64)

LEVEL_SCALE = (40, 45, 51, 57, 64, 72)
QUANT_SCALE = (26214, 23302, 20560, 18396, 16384, 14564)

ZIGZAG = np.array(sorted(((i, j) for i in range(8) for j in range(8)),
                         key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0])))
ZIGZAG_FLAT = ZIGZAG[:, 0] * 8 + ZIGZAG[:, 1]


class BaseLayerError(RuntimeError):
    """Base-layer encode/decode failure."""


def qstep(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6)


def _check_qp(qp: int) -> None:
    if not 0 <= qp <= 51:
        raise ValueError(f"qp must be in [0, 51], got {qp}")


def _rshift_round(v: np.ndarray, bits: int) -> np.ndarray:
    return (v + (1 << (bits - 1))) >> bits


def forward_dct(blocks: np.ndarray) -> np.ndarray:
    """Integer DCT of [N, 8, 8] int blocks; output at unit (orthonormal) scale."""
    tmp = _rshift_round(np.einsum("ij,njk->nik", DCT_MATRIX, blocks.astype(np.int64)), TRANSFORM_BITS)
    return _rshift_round(np.einsum("nik,lk->nil", tmp, DCT_MATRIX), TRANSFORM_BITS)


def inverse_dct(coefs: np.ndarray) -> np.ndarray:
    tmp = _rshift_round(np.einsum("ji,njk->nik", DCT_MATRIX, coefs.astype(np.int64)), TRANSFORM_BITS)
    return _rshift_round(np.einsum("nik,kl->nil", tmp, DCT_MATRIX), TRANSFORM_BITS)


def quantize_coefs(coefs: np.ndarray, qp: int) -> np.ndarray:
    shift = 14 + qp // 6
    mag = (np.abs(coefs) * QUANT_SCALE[qp % 6] + (1 << (shift - 1))) >> shift
    return np.sign(coefs) * mag


def dequantize_levels(levels: np.ndarray, qp: int) -> np.ndarray:
    return _rshift_round(levels.astype(np.int64) * (LEVEL_SCALE[qp % 6] << (qp // 6)), 6)


# --- exp-Golomb bit I/O -----------------------------------------------------

class BitWriter:
    def __init__(self):
        self.bits: list[str] = []

    def ue(self, v: int) -> None:
        code = bin(v + 1)[2:]
        self.bits.append("0" * (len(code) - 1) + code)

    def se(self, v: int) -> None:
        self.ue(2 * v - 1 if v > 0 else -2 * v)

    def getvalue(self) -> bytes:
        s = "".join(self.bits)
        s += "0" * (-len(s) % 8)
        return int(s, 2).to_bytes(len(s) // 8, "big") if s else b""


class BitReader:
    def __init__(self, data: bytes):
        self.bits = "".join(f"{b:08b}" for b in data)
        self.pos = 0

    def ue(self) -> int:
        start = self.bits.find("1", self.pos)
        if start < 0:
            raise BaseLayerError("toy stream exhausted")
        zeros = start - self.pos
        end = start + zeros + 1
        if end > len(self.bits):
            raise BaseLayerError("toy stream exhausted")
        v = int(self.bits[start:end], 2) - 1
        self.pos = end
        return v

    def se(self) -> int:
        k = self.ue()
        return (k + 1) // 2 if k % 2 else -(k // 2)


# --- toy intra codec --------------------------------------------------------

def _to_blocks(plane: np.ndarray) -> tuple[np.ndarray, int, int]:
    h, w = plane.shape
    p = np.pad(plane, ((0, -h % 8), (0, -w % 8)), mode="edge").astype(np.int64)
    bh, bw = p.shape[0] // 8, p.shape[1] // 8
    return p.reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8), bh, bw


def _from_blocks(blocks: np.ndarray, bh: int, bw: int, h: int, w: int) -> np.ndarray:
    p = blocks.reshape(bh, bw, 8, 8).transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)
    return np.clip(p[:h, :w], 0, 255).astype(np.uint8)


def _plane_shapes(width: int, height: int, subsampling: str):
    if subsampling == "420":
        c = ((height + 1) // 2, (width + 1) // 2)
    else:
        c = (height, width)
    return [(height, width), c, c]


def toy_intra_encode(img: PlanarImage, qp: int) -> bytes:
    """Encode ``img`` with the toy intra codec at quantizer ``qp``."""
    _check_qp(qp)
    if img.width >= 1 << 16 or img.height >= 1 << 16:
        raise ValueError("toy codec supports dimensions below 65536")
    bw_ = BitWriter()
    for plane in img.planes:
        blocks, _, _ = _to_blocks(plane)
        levels = quantize_coefs(forward_dct(blocks), qp).reshape(-1, 64)[:, ZIGZAG_FLAT]
        for row in levels.tolist():
            nz = [(k, v) for k, v in enumerate(row) if v]
            bw_.ue(len(nz))
            prev = -1
            for k, v in nz:
                bw_.ue(k - prev - 1)
                bw_.se(v)
                prev = k
    header = struct.pack("<HHBB", img.width, img.height, qp, 0 if img.subsampling == "420" else 1)
    return header + bw_.getvalue()


def toy_intra_decode(data: bytes) -> PlanarImage:
    if len(data) < 6:
        raise BaseLayerError("toy stream shorter than its header")
    width, height, qp, ss = struct.unpack("<HHBB", data[:6])
    if qp > 51 or ss > 1:
        raise BaseLayerError("corrupt toy stream header")
    subsampling = "420" if ss == 0 else "444"
    reader = BitReader(data[6:])
    planes = []
    for h, w in _plane_shapes(width, height, subsampling):
        bh, bw = -(-h // 8), -(-w // 8)
        levels = np.zeros((bh * bw, 64), dtype=np.int64)
        for b in range(bh * bw):
            count = reader.ue()
            if count > 64:
                raise BaseLayerError("corrupt toy stream: too many coefficients")
            k = -1
            for _ in range(count):
                k += reader.ue() + 1
                if k > 63:
                    raise BaseLayerError("corrupt toy stream: run past block end")
                levels[b, ZIGZAG_FLAT[k]] = reader.se()
        coefs = dequantize_levels(levels, qp).reshape(-1, 8, 8)
        planes.append(_from_blocks(inverse_dct(coefs), bh, bw, h, w))
    return PlanarImage(width, height, subsampling, tuple(planes))


# --- external codec adapter -------------------------------------------------

PLACEHOLDERS = ("{in}", "{out}", "{recon}", "{qp}", "{w}", "{h}")
DECODE_PLACEHOLDERS = ("{in}", "{recon}", "{w}", "{h}")


@dataclass(frozen=True)
class BaseLayerConfig:
    codec: str = "toy_intra"
    qp: int = 37
    external_template: str | None = None
    external_decoder: str | None = None

    def __post_init__(self):
        _check_qp(self.qp)
        if self.codec not in ("toy_intra", "external"):
            raise ValueError(f"unknown base-layer codec {self.codec!r}")
        if self.codec == "external":
            if not (self.external_template or self.external_decoder):
                raise ValueError("external codec needs a command template")
            for template, needed in ((self.external_template, PLACEHOLDERS),
                                     (self.external_decoder, DECODE_PLACEHOLDERS)):
                missing = [p for p in needed if template and p not in template]
                if missing:
                    raise ValueError(f"external template lacks placeholders {missing}")


def _run(template: str, subs: dict) -> None:
    cmd = template
    for k, v in subs.items():
        cmd = cmd.replace("{" + k + "}", shlex.quote(str(v)))
    argv = shlex.split(cmd)
    try:
        proc = subprocess.run(argv, capture_output=True, text=True)
    except (FileNotFoundError, PermissionError) as exc:
        raise BaseLayerError(f"cannot spawn external codec ({exc}); template: {template}") from exc
    if proc.returncode != 0:
        raise BaseLayerError(f"external codec exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
                             f"; command: {cmd}")


def external_encode(img: PlanarImage, cfg: BaseLayerConfig, workdir=None) -> tuple[bytes, PlanarImage]:
    """Run the configured external encoder on raw 4:2:0 exchange files."""
    if img.subsampling != "420":
        raise ValueError("external codec exchange uses 4:2:0")
    template = cfg.external_template or os.environ.get("CAESR_EXTERNAL_CODEC")
    if not template:
        raise ValueError("no external codec template configured")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        src, bits, recon = tmp / "input.yuv", tmp / "stream.bin", tmp / "recon.yuv"
        write_yuv(img, src)
        _run(template, {"in": src, "out": bits, "recon": recon, "qp": cfg.qp,
                        "w": img.width, "h": img.height})
        for f in (bits, recon):
            if not f.exists():
                raise BaseLayerError(f"external codec did not produce {f.name}")
        expected = img.width * img.height * 3 // 2 if img.width % 2 == 0 and img.height % 2 == 0 else None
        size = recon.stat().st_size
        if expected is not None and size != expected:
            raise BaseLayerError(f"external recon has {size} bytes, expected {expected} "
                                 f"for {img.width}x{img.height}")
        return bits.read_bytes(), read_yuv(recon, img.width, img.height)


def external_decode(data: bytes, width: int, height: int, cfg: BaseLayerConfig, workdir=None) -> PlanarImage:
    template = cfg.external_decoder or os.environ.get("CAESR_EXTERNAL_DECODER")
    if not template:
        raise ValueError("no external decoder template configured")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        bits, recon = tmp / "stream.bin", tmp / "recon.yuv"
        bits.write_bytes(data)
        _run(template, {"in": bits, "recon": recon, "w": width, "h": height})
        if not recon.exists():
            raise BaseLayerError("external decoder did not produce a reconstruction")
        return read_yuv(recon, width, height)


def encode_base_layer(img: PlanarImage, cfg: BaseLayerConfig) -> tuple[bytes, PlanarImage]:
    """Return (bitstream, reconstruction) for the configured codec."""
    if cfg.codec == "toy_intra":
        data = toy_intra_encode(img, cfg.qp)
        return data, toy_intra_decode(data)
    return external_encode(img, cfg)


def decode_base_layer(data: bytes, cfg: BaseLayerConfig, width: int, height: int) -> PlanarImage:
    if cfg.codec == "toy_intra":
        img = toy_intra_decode(data)
        if (img.width, img.height) != (width, height):
            raise BaseLayerError(f"base layer is {img.width}x{img.height}, expected {width}x{height}")
        return img
    return external_decode(data, width, height, cfg)
