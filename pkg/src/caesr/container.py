"""``.caesr`` container: fixed header followed by base-layer, z and y payloads.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"CAES"
    4       1     version (1)
    5       1     mode (0 bic_only, 1 sr_only, 2 res_bic, 3 res_sr, 4 conditional)
    6       4     width before padding
    10      4     height before padding
    14      1     pad_w
    15      1     pad_h
    16      1     bl_codec (0 toy, 1 external)
    17      1     bl_qp
    18      2     model_id
    20      4+n   base-layer payload (u32 length prefix)
    ...     4+n   z payload
    ...     4+n   y payload
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"CAES"
VERSION = 1
PAD_MULTIPLE = 64
_HEADER = struct.Struct("<4sBBIIBBBBH")
HEADER_SIZE = _HEADER.size
PAYLOAD_NAMES = ("base-layer", "z", "y")
BL_CODECS = ("toy_intra", "external")


class ContainerError(ValueError):
    """Base class for container parsing/validation failures."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedStreamError(ContainerError):
    def __init__(self, message: str, payload: str | None = None):
        super().__init__(message)
        self.payload = payload


class InvalidHeaderError(ContainerError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    mode: int
    width: int
    height: int
    pad_w: int = 0
    pad_h: int = 0
    bl_codec: int = 0
    bl_qp: int = 37
    model_id: int = 0
    version: int = VERSION

    @property
    def padded_size(self) -> tuple[int, int]:
        return self.width + self.pad_w, self.height + self.pad_h

    def validate(self) -> None:
        if self.version != VERSION:
            raise UnsupportedVersionError(f"unsupported container version {self.version}")
        if not 0 <= self.mode < 5:
            raise InvalidHeaderError(f"unknown mode {self.mode}")
        if self.bl_codec not in (0, 1):
            raise InvalidHeaderError(f"unknown base-layer codec {self.bl_codec}")
        if not 0 <= self.bl_qp <= 51:
            raise InvalidHeaderError(f"base-layer qp {self.bl_qp} out of range")
        if self.width <= 0 or self.height <= 0:
            raise InvalidHeaderError("zero-sized picture")
        pw, ph = self.padded_size
        if pw % PAD_MULTIPLE or ph % PAD_MULTIPLE:
            raise InvalidHeaderError(f"padded size {pw}x{ph} is not a multiple of {PAD_MULTIPLE}")
        if not (0 <= self.pad_w < 256 and 0 <= self.pad_h < 256):
            raise InvalidHeaderError("padding does not fit in one byte")
        if not 0 <= self.model_id < 1 << 16:
            raise InvalidHeaderError("model_id out of range")

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.mode, self.width, self.height,
                            self.pad_w, self.pad_h, self.bl_codec, self.bl_qp, self.model_id)


def mux(header: StreamHeader, bl: bytes, z: bytes, y: bytes) -> bytes:
    header.validate()
    if header.mode in (0, 1) and (z or y):
        raise InvalidHeaderError("bic_only/sr_only streams carry no enhancement payloads")
    out = bytearray(header.pack())
    for name, payload in zip(PAYLOAD_NAMES, (bl, z, y)):
        if len(payload) > 0xFFFFFFFF:
            raise ContainerError(f"{name} payload of {len(payload)} bytes is too large")
        out += struct.pack("<I", len(payload)) + bytes(payload)
    return bytes(out)


def parse_header(data: bytes) -> StreamHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < 5:
        raise TruncatedStreamError("stream truncated inside the header", "header")
    if data[4] != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {data[4]}")
    if len(data) < HEADER_SIZE:
        raise TruncatedStreamError("stream truncated inside the header", "header")
    _, version, mode, w, h, pw, ph, codec, qp, model_id = _HEADER.unpack_from(data)
    header = StreamHeader(mode, w, h, pw, ph, codec, qp, model_id, version)
    header.validate()
    return header


def demux(data: bytes) -> tuple[StreamHeader, bytes, bytes, bytes]:
    data = bytes(data)
    header = parse_header(data)
    pos = HEADER_SIZE
    payloads = []
    for name in PAYLOAD_NAMES:
        if pos + 4 > len(data):
            raise TruncatedStreamError(f"stream truncated before the {name} length field", name)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise TruncatedStreamError(
                f"{name} payload declares {n} bytes but only {len(data) - pos} remain", name)
        payloads.append(data[pos:pos + n])
        pos += n
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after the y payload")
    return (header, *payloads)
