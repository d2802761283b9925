"""Layered encode/decode: base layer + learned enhancement layer in one container."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .baselayer import BaseLayerConfig, decode_base_layer, encode_base_layer
from .entropy.latents import code_latents_y, code_latents_z, decode_latents_y, decode_latents_z
from .entropy.quantize import round_latents
from .image import (PlanarImage, bicubic_resample, chroma_to_420, crop, duplicate_chroma_to_444,
                    from_tensor, pad_to_multiple, to_tensor)
from .networks import CaesrModel, CodingMode, ModelConfig

MANIFEST_NAME = "manifest.json"


class ModelResolutionError(LookupError):
    """No usable weights for a stream or mode."""


# --- model manifest ---------------------------------------------------------

@dataclass
class ModelEntry:
    model_id: int
    weights: str
    mode: str
    bl_qp: int
    lmbda: float
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "weights": self.weights, "mode": self.mode,
                "bl_qp": self.bl_qp, "lambda": self.lmbda, "config": self.config}

    @classmethod
    def from_json(cls, d: dict) -> "ModelEntry":
        return cls(int(d["model_id"]), d["weights"], d["mode"], int(d["bl_qp"]),
                   float(d["lambda"]), dict(d.get("config", {})))


def read_manifest(weights_dir) -> list[ModelEntry]:
    path = Path(weights_dir) / MANIFEST_NAME
    if not path.exists():
        raise ModelResolutionError(f"no {MANIFEST_NAME} in {weights_dir}")
    data = json.loads(path.read_text())
    return [ModelEntry.from_json(d) for d in data.get("models", [])]


def write_manifest(weights_dir, entries: list[ModelEntry]) -> None:
    path = Path(weights_dir) / MANIFEST_NAME
    path.write_text(json.dumps({"models": [e.to_json() for e in entries]}, indent=2) + "\n")


def register_model(weights_dir, model: CaesrModel, bl_qp: int, lmbda: float,
                   model_id: int | None = None, name: str | None = None) -> ModelEntry:
    """Save ``model`` into ``weights_dir`` and add (or replace) its manifest entry."""
    weights_dir = Path(weights_dir)
    weights_dir.mkdir(parents=True, exist_ok=True)
    try:
        entries = read_manifest(weights_dir)
    except ModelResolutionError:
        entries = []
    if model_id is None:
        model_id = max((e.model_id for e in entries), default=0) + 1
    if not 1 <= model_id < 1 << 16:
        raise ValueError("model_id must be in [1, 65535]")
    fname = name or f"{model.mode.name}_qp{bl_qp}_id{model_id}.bin"
    model.save(weights_dir / fname)
    entry = ModelEntry(model_id, fname, model.mode.name, bl_qp, lmbda, model.config.to_dict())
    entries = [e for e in entries if e.model_id != model_id] + [entry]
    write_manifest(weights_dir, entries)
    return entry


def load_model(weights_dir, entry: ModelEntry) -> CaesrModel:
    model = CaesrModel(ModelConfig(**entry.config), entry.mode)
    model.load(Path(weights_dir) / entry.weights)
    model.eval()
    return model


def find_entry(weights_dir, model_id: int | None = None, mode=None,
               bl_qp: int | None = None) -> ModelEntry:
    entries = read_manifest(weights_dir)
    for e in entries:
        if model_id is not None:
            if e.model_id == model_id:
                return e
            continue
        if mode is not None and e.mode != CodingMode.parse(mode).name:
            continue
        if bl_qp is not None and e.bl_qp != bl_qp:
            continue
        return e
    raise ModelResolutionError(
        f"no model in {weights_dir} for id={model_id} mode={getattr(mode, 'name', mode)} qp={bl_qp}")


# --- forward pipeline -------------------------------------------------------

def upscaled_base(bl_recon: PlanarImage) -> torch.Tensor:
    """x~_c as a [1, 3, H, W] tensor: bicubic x2 then chroma duplication."""
    return to_tensor(duplicate_chroma_to_444(bicubic_resample(bl_recon, 2)))[None]


def pipeline_forward(x: PlanarImage, bl_recon: PlanarImage, mode, model: CaesrModel | None,
                     quantizer: str = "round", generator: torch.Generator | None = None):
    """Run the enhancement layer on one picture.

    Returns ``(x_hat [3, H, W], rate_bits, latents)`` where ``rate_bits`` is the
    model's entropy estimate (zero for modes without an autoencoder) and
    ``latents`` holds ``y_bar``/``z_bar`` when present.
    """
    mode = CodingMode.parse(mode)
    if model is None:
        if mode.uses_autoencoder or mode.uses_sr:
            raise ModelResolutionError(f"mode {mode.name} needs trained weights")
        model = CaesrModel(ModelConfig.reduced(), CodingMode.bic_only)
    if model.mode != mode:
        raise ModelResolutionError(f"weights are for {model.mode.name}, not {mode.name}")
    x_up = upscaled_base(bl_recon)
    xs = to_tensor(duplicate_chroma_to_444(x))[None] if x.subsampling == "420" else to_tensor(x)[None]
    with torch.no_grad():
        out = model(xs, x_up, quantizer, generator)
    x_hat = out["x_hat"][0]
    if quantizer == "round":
        x_hat = x_hat.clamp(0, 1)
    rate = float(out["y_bits"].sum() + out["z_bits"].sum())
    latents = {k: out[k][0] for k in ("y_bar", "z_bar") if k in out}
    return x_hat, rate, latents


# --- bitstream codec --------------------------------------------------------

@dataclass
class CodedPicture:
    bitstream: bytes
    x_hat: torch.Tensor        # [3, H, W] in [0, 1], padded size
    image: PlanarImage         # cropped 4:2:0 reconstruction
    header: container.StreamHeader
    bl_bytes: int
    z_bytes: int
    y_bytes: int

    @property
    def el_bytes(self) -> int:
        return self.z_bytes + self.y_bytes

    def bpp(self) -> float:
        return 8.0 * len(self.bitstream) / (self.header.width * self.header.height)


def _synthesize(model: CaesrModel | None, mode: CodingMode, x_up: torch.Tensor,
                y_hat: np.ndarray | None) -> torch.Tensor:
    """Decoder-side reconstruction; the encoder calls this too."""
    with torch.no_grad():
        if mode == CodingMode.bic_only:
            x_hat = x_up
        elif mode == CodingMode.sr_only:
            x_hat = model.reconstruct(x_up, None)
        else:
            y = torch.from_numpy(y_hat.astype(np.float32))[None]
            x_hat = model.reconstruct(x_up, model.g_s(y))
    return x_hat[0].clamp(0, 1)


def _to_output(x_hat: torch.Tensor, width: int, height: int) -> PlanarImage:
    return crop(chroma_to_420(from_tensor(x_hat)), width, height)


def _z_prior(model: CaesrModel):
    return model.z_mean.detach().double().numpy(), model.z_scale.detach().double().numpy()


def code_enhancement(model: CaesrModel, x: torch.Tensor, x_up: torch.Tensor):
    """Entropy-code the latents of one [1, 3, H, W] picture; returns (y_hat, z_bytes, y_bytes)."""
    model.eval()
    with torch.no_grad():
        y = model.g_a(model.ae_input(x, x_up))
        z_hat = round_latents(model.h_a(y))[0].numpy().astype(np.int64)
        y_hat = round_latents(y)[0].numpy().astype(np.int64)
        z_bytes = code_latents_z(z_hat, *_z_prior(model))
        psi = model.h_s(torch.from_numpy(z_hat.astype(np.float32))[None])[0]
        y_bytes = code_latents_y(y_hat, psi, model.entropy)
    return y_hat, z_bytes, y_bytes


def encode_picture(img: PlanarImage, mode, bl_cfg: BaseLayerConfig | None = None,
                   model: CaesrModel | None = None, model_id: int = 0) -> CodedPicture:
    """Encode a 4:2:0 picture into a ``.caesr`` container."""
    mode = CodingMode.parse(mode)
    bl_cfg = bl_cfg or BaseLayerConfig()
    if img.subsampling != "420":
        raise ValueError("encode_picture expects a 4:2:0 picture")
    if (mode.uses_autoencoder or mode.uses_sr) and model is None:
        raise ModelResolutionError(f"mode {mode.name} needs trained weights")
    if model is not None and model.mode != mode:
        raise ModelResolutionError(f"weights are for {model.mode.name}, not {mode.name}")
    x, pad_w, pad_h = pad_to_multiple(img, container.PAD_MULTIPLE)
    bl_bytes, x_c = encode_base_layer(bicubic_resample(x, 0.5), bl_cfg)
    x_up = upscaled_base(x_c)
    z_bytes = y_bytes = b""
    y_hat = None
    if mode.uses_autoencoder:
        xs = to_tensor(duplicate_chroma_to_444(x))[None]
        y_hat, z_bytes, y_bytes = code_enhancement(model, xs, x_up)
    x_hat = _synthesize(model, mode, x_up, y_hat)
    header = container.StreamHeader(
        mode=int(mode), width=img.width, height=img.height, pad_w=pad_w, pad_h=pad_h,
        bl_codec=container.BL_CODECS.index(bl_cfg.codec), bl_qp=bl_cfg.qp, model_id=model_id)
    stream = container.mux(header, bl_bytes, z_bytes, y_bytes)
    return CodedPicture(stream, x_hat, _to_output(x_hat, img.width, img.height), header,
                        len(bl_bytes), len(z_bytes), len(y_bytes))


@dataclass
class DecodedPicture:
    header: container.StreamHeader
    x_hat: torch.Tensor
    image: PlanarImage
    base_layer: PlanarImage


def decode_picture(data: bytes, model: CaesrModel | None = None,
                   bl_cfg: BaseLayerConfig | None = None) -> DecodedPicture:
    """Decode a container; ``model`` must match the stream's mode (None for bic_only)."""
    header, bl, zb, yb = container.demux(data)
    mode = CodingMode(header.mode)
    if (mode.uses_autoencoder or mode.uses_sr) and model is None:
        raise ModelResolutionError(f"stream mode {mode.name} needs model {header.model_id}")
    if model is not None and model.mode != mode and mode != CodingMode.bic_only:
        raise ModelResolutionError(f"model is {model.mode.name}, stream is {mode.name}")
    codec = container.BL_CODECS[header.bl_codec]
    if codec == "toy_intra":
        bl_cfg = BaseLayerConfig(codec="toy_intra", qp=header.bl_qp)
    elif bl_cfg is None or bl_cfg.codec != codec:
        raise ModelResolutionError("stream uses an external base-layer codec; configure its decoder")
    pw, ph = header.padded_size
    x_c = decode_base_layer(bl, bl_cfg, pw // 2, ph // 2)
    x_up = upscaled_base(x_c)
    y_hat = None
    if mode.uses_autoencoder:
        model.eval()
        n = model.config.latent_channels
        z_hat = decode_latents_z(zb, (n, ph // 64, pw // 64), *_z_prior(model))
        with torch.no_grad():
            psi = model.h_s(torch.from_numpy(z_hat.astype(np.float32))[None])[0]
        y_hat = decode_latents_y(yb, (n, ph // 16, pw // 16), psi, model.entropy)
    x_hat = _synthesize(model, mode, x_up, y_hat)
    return DecodedPicture(header, x_hat, _to_output(x_hat, header.width, header.height), x_c)


def decode_with_manifest(data: bytes, weights_dir, bl_cfg: BaseLayerConfig | None = None) -> DecodedPicture:
    header = container.parse_header(data)
    model = None
    if CodingMode(header.mode) != CodingMode.bic_only:
        if weights_dir is None:
            raise ModelResolutionError("stream needs a weights directory")
        model = load_model(weights_dir, find_entry(weights_dir, model_id=header.model_id))
    return decode_picture(data, model, bl_cfg)
