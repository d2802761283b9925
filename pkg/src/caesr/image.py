"""Planar YUV images, colour conversion, bicubic resampling and patch cropping.

All sample planes are 8-bit.  Conversions use full-range BT.601 and every
rounding step is ``floor(v + 0.5)`` so results are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

SUBSAMPLINGS = ("420", "444")


class ImageFormatError(ValueError):
    """Raised for unreadable images or unsupported sample formats."""


@dataclass(frozen=True)
class PlanarImage:
    """Y, Cb, Cr planes of an 8-bit image.

    ``subsampling`` is ``"420"`` (chroma at ceil(W/2) x ceil(H/2)) or ``"444"``.
    """

    width: int
    height: int
    subsampling: str
    planes: tuple

    def __post_init__(self):
        if self.subsampling not in SUBSAMPLINGS:
            raise ValueError(f"unknown subsampling {self.subsampling!r}")
        if len(self.planes) != 3:
            raise ValueError("expected three planes (Y, Cb, Cr)")
        planes = tuple(np.ascontiguousarray(p, dtype=np.uint8) for p in self.planes)
        object.__setattr__(self, "planes", planes)
        if planes[0].shape != (self.height, self.width):
            raise ValueError(f"luma shape {planes[0].shape} != {(self.height, self.width)}")
        cshape = self.chroma_shape
        for p in planes[1:]:
            if p.shape != cshape:
                raise ValueError(f"chroma shape {p.shape} != {cshape}")

    @property
    def chroma_shape(self) -> tuple[int, int]:
        if self.subsampling == "420":
            return (self.height + 1) // 2, (self.width + 1) // 2
        return self.height, self.width

    @property
    def y(self) -> np.ndarray:
        return self.planes[0]

    def __eq__(self, other):
        if not isinstance(other, PlanarImage):
            return NotImplemented
        return (
            (self.width, self.height, self.subsampling)
            == (other.width, other.height, other.subsampling)
            and all(np.array_equal(a, b) for a, b in zip(self.planes, other.planes))
        )

    def tobytes(self) -> bytes:
        return b"".join(p.tobytes() for p in self.planes)


def _round_clip(v: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def _box2(plane: np.ndarray) -> np.ndarray:
    """2x2 mean with edge replication for odd sizes (float result)."""
    h, w = plane.shape
    p = np.pad(plane.astype(np.float64), ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (p[0::2, 0::2] + p[0::2, 1::2] + p[1::2, 0::2] + p[1::2, 1::2])


def rgb_to_yuv420(rgb: np.ndarray) -> PlanarImage:
    """Full-range BT.601 conversion of an HxWx3 uint8 array to 4:2:0."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageFormatError(f"expected HxWx3 RGB array, got shape {rgb.shape}")
    if rgb.dtype != np.uint8:
        raise ImageFormatError(f"unsupported sample type {rgb.dtype}; only 8-bit RGB")
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    h, w = y.shape
    return PlanarImage(w, h, "420", (_round_clip(y), _round_clip(_box2(cb)), _round_clip(_box2(cr))))


def yuv_to_rgb(img: PlanarImage) -> np.ndarray:
    """Inverse full-range BT.601; 4:2:0 chroma is replicated first."""
    if img.subsampling == "420":
        img = duplicate_chroma_to_444(img)
    y, cb, cr = (p.astype(np.float64) for p in img.planes)
    cb -= 128.0
    cr -= 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([_round_clip(r), _round_clip(g), _round_clip(b)], axis=-1)


def load_image(path) -> PlanarImage:
    """Read an 8-bit RGB image file and convert it to YUV 4:2:0."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F", "RGB;16") or mode.startswith("I;"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode {mode})")
            if mode != "RGB":
                im = im.convert("RGB")
            rgb = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    return rgb_to_yuv420(rgb)


def save_image(img: PlanarImage, path) -> None:
    Image.fromarray(yuv_to_rgb(img), mode="RGB").save(path)


def read_yuv(path, width: int, height: int, subsampling: str = "420") -> PlanarImage:
    """Read a raw 8-bit planar file (Y then Cb then Cr, row-major)."""
    data = Path(path).read_bytes()
    ch, cw = ((height + 1) // 2, (width + 1) // 2) if subsampling == "420" else (height, width)
    expected = width * height + 2 * ch * cw
    if len(data) < expected:
        raise ImageFormatError(f"{path}: {len(data)} bytes, expected {expected} for {width}x{height}")
    buf = np.frombuffer(data, dtype=np.uint8, count=expected)
    y = buf[: width * height].reshape(height, width)
    cb = buf[width * height: width * height + ch * cw].reshape(ch, cw)
    cr = buf[width * height + ch * cw:].reshape(ch, cw)
    return PlanarImage(width, height, subsampling, (y, cb, cr))


def write_yuv(img: PlanarImage, path) -> None:
    Path(path).write_bytes(img.tobytes())


def duplicate_chroma_to_444(img: PlanarImage) -> PlanarImage:
    """Replicate each 4:2:0 chroma sample into its 2x2 co-located luma block."""
    if img.subsampling != "420":
        raise ValueError("image is already 4:4:4")
    h, w = img.height, img.width
    chroma = [np.repeat(np.repeat(p, 2, axis=0), 2, axis=1)[:h, :w] for p in img.planes[1:]]
    return PlanarImage(w, h, "444", (img.planes[0], *chroma))


def chroma_to_420(img: PlanarImage) -> PlanarImage:
    """Average each 2x2 chroma block (the least-squares inverse of duplication)."""
    if img.subsampling != "444":
        raise ValueError("image is already 4:2:0")
    chroma = []
    for p in img.planes[1:]:
        chroma.append(_round_clip(_box2(p)))
    return PlanarImage(img.width, img.height, "420", (img.planes[0], *chroma))


# --- bicubic resampling -----------------------------------------------------

CUBIC_A = -0.5


def cubic_kernel(x, a: float = CUBIC_A):
    """Keys cubic convolution kernel; a = -0.5 gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _taps(n_in: int, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Source indices (replicate-clamped) and weights per output sample.

    Sample grids are co-sited: output i sits at source coordinate i / factor.
    Downscaling stretches the kernel by 1/factor (anti-aliasing).
    """
    if factor == 2:
        n_out = 2 * n_in
        pos = np.arange(n_out) / 2.0
        base = np.floor(pos).astype(np.int64)
        offsets = np.arange(-1, 3)
        idx = base[:, None] + offsets[None, :]
        weights = cubic_kernel(pos[:, None] - idx)
    elif factor == 0.5:
        n_out = n_in // 2
        centre = 2 * np.arange(n_out)
        offsets = np.arange(-3, 4)
        idx = centre[:, None] + offsets[None, :]
        weights = 0.5 * cubic_kernel(offsets / 2.0)[None, :].repeat(n_out, axis=0)
    else:
        raise ValueError(f"unsupported resampling factor {factor}")
    return np.clip(idx, 0, n_in - 1), weights


def resample_plane(plane: np.ndarray, factor: float) -> np.ndarray:
    """Separable bicubic resampling of one plane; float64 result, unrounded."""
    p = np.asarray(plane, dtype=np.float64)
    idx, wts = _taps(p.shape[1], factor)
    p = np.einsum("hok,ok->ho", p[:, idx], wts)
    idx, wts = _taps(p.shape[0], factor)
    return np.einsum("okw,ok->ow", p[idx, :], wts)


def bicubic_resample(img: PlanarImage, factor: float) -> PlanarImage:
    """Resample every plane by ``factor`` (2 or 0.5) at its own resolution."""
    if factor == 0.5:
        if img.width % 2 or img.height % 2:
            raise ValueError(f"downscale needs even dimensions, got {img.width}x{img.height}")
        if img.subsampling == "420" and (img.width % 4 or img.height % 4):
            raise ValueError("4:2:0 downscale needs dimensions divisible by 4")
        w, h = img.width // 2, img.height // 2
    elif factor == 2:
        w, h = img.width * 2, img.height * 2
    else:
        raise ValueError(f"unsupported resampling factor {factor}")
    out = [_round_clip(resample_plane(p, factor)) for p in img.planes]
    if img.subsampling == "420":
        ch, cw = (h + 1) // 2, (w + 1) // 2
        out[1:] = [p[:ch, :cw] for p in out[1:]]
    return PlanarImage(w, h, img.subsampling, tuple(out))


def pad_to_multiple(img: PlanarImage, multiple: int) -> tuple[PlanarImage, int, int]:
    """Edge-replicate pad on the right/bottom so W and H divide ``multiple``."""
    pad_w = -img.width % multiple
    pad_h = -img.height % multiple
    if not pad_w and not pad_h:
        return img, 0, 0
    w, h = img.width + pad_w, img.height + pad_h
    y = np.pad(img.planes[0], ((0, pad_h), (0, pad_w)), mode="edge")
    if img.subsampling == "420":
        ch, cw = (h + 1) // 2, (w + 1) // 2
    else:
        ch, cw = h, w
    chroma = [np.pad(p, ((0, ch - p.shape[0]), (0, cw - p.shape[1])), mode="edge") for p in img.planes[1:]]
    return PlanarImage(w, h, img.subsampling, (y, *chroma)), pad_w, pad_h


def crop(img: PlanarImage, width: int, height: int, top: int = 0, left: int = 0) -> PlanarImage:
    y = img.planes[0][top:top + height, left:left + width]
    if img.subsampling == "420":
        if top % 2 or left % 2:
            raise ValueError("4:2:0 crop offsets must be even")
        ct, cl = top // 2, left // 2
        ch, cw = (height + 1) // 2, (width + 1) // 2
        chroma = [p[ct:ct + ch, cl:cl + cw] for p in img.planes[1:]]
    else:
        chroma = [p[top:top + height, left:left + width] for p in img.planes[1:]]
    return PlanarImage(width, height, img.subsampling, (y, *chroma))


def extract_patch_pair(hr: PlanarImage, lr: PlanarImage, top_left: Sequence[int],
                       size: int = 256) -> tuple[PlanarImage, PlanarImage]:
    """Crop a ``size`` patch from ``hr`` and the co-located half-size patch from ``lr``.

    ``top_left`` is ``(row, col)`` in high-resolution coordinates.
    """
    top, left = (int(v) for v in top_left)
    align = 4 if lr.subsampling == "420" else 2
    if top % align or left % align:
        raise ValueError(f"patch offset {top_left} is not aligned to {align} for {lr.subsampling} input")
    if lr.width * 2 != hr.width or lr.height * 2 != hr.height:
        raise ValueError("lr must be the half-scale counterpart of hr")
    if top < 0 or left < 0 or top + size > hr.height or left + size > hr.width:
        raise ValueError(f"patch at {top_left} of size {size} exceeds {hr.width}x{hr.height}")
    if size % 2:
        raise ValueError("patch size must be even")
    return (crop(hr, size, size, top, left),
            crop(lr, size // 2, size // 2, top // 2, left // 2))


# --- tensors ----------------------------------------------------------------

def to_tensor(img: PlanarImage) -> torch.Tensor:
    """[3, H, W] float32 tensor in [0, 1], channel order Y, Cb, Cr."""
    if img.subsampling != "444":
        raise ValueError("to_tensor needs a 4:4:4 image")
    arr = np.stack(img.planes).astype(np.float32) / np.float32(255.0)
    return torch.from_numpy(arr)


def from_tensor(t: torch.Tensor) -> PlanarImage:
    """Inverse of :func:`to_tensor`: rescale, round half up, clip to 8 bits."""
    arr = t.detach().to(torch.float64).cpu().numpy()
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] tensor, got {tuple(arr.shape)}")
    planes = _round_clip(arr * 255.0)
    return PlanarImage(arr.shape[2], arr.shape[1], "444", tuple(planes))
