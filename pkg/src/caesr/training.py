"""Joint rate-distortion training of the autoencoder and SR module."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from . import layers
from .baselayer import BaseLayerConfig, encode_base_layer
from .codec import register_model, upscaled_base
from .image import (ImageFormatError, PlanarImage, bicubic_resample, crop, duplicate_chroma_to_444,
                    load_image, to_tensor)
from .networks import CaesrModel, CodingMode, ModelConfig, build_model

log = logging.getLogger(__name__)

LAMBDA_TABLE = {37: 0.004, 32: 0.008, 27: 0.016, 22: 0.032}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm"}


def lambda_for_qp(bl_qp: int, override: float | None = None) -> float:
    """Rate weight for a base-layer QP; an explicit override always wins."""
    if override is not None:
        return float(override)
    try:
        return LAMBDA_TABLE[int(bl_qp)]
    except KeyError:
        raise ValueError(f"no default lambda for base-layer qp {bl_qp}; "
                         f"known: {sorted(LAMBDA_TABLE)}") from None


@dataclass
class TrainConfig:
    bl_qp: int = 37
    lmbda: float | None = None
    epochs: int = 20
    lr: float = 1e-4
    decay_gamma: float = 0.5
    decay_epochs: int = 5
    batch_size: int = 8
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "conditional"
    dataset_roots: list = field(default_factory=list)
    patch_size: int = 256
    patches_per_image: int = 1
    model: dict = field(default_factory=lambda: ModelConfig.reduced().to_dict())
    bl_codec: str = "toy_intra"
    external_template: str | None = None
    output_dir: str = "weights"
    model_id: int | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lmbda is not None and not self.lmbda > 0:
            raise ValueError("lambda must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        CodingMode.parse(self.mode)
        self.betas = tuple(self.betas)

    @property
    def rate_weight(self) -> float:
        return lambda_for_qp(self.bl_qp, self.lmbda)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        if "lambda" in data:
            data["lmbda"] = data.pop("lambda")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lmbda")
        return d


@dataclass
class LossBreakdown:
    distortion: torch.Tensor
    rate_bpp: torch.Tensor
    total: torch.Tensor
    lmbda: float

    def values(self) -> tuple[float, float, float]:
        """(D, R, D + lambda R) as Python floats; the sum is recomputed in float64."""
        d, r = float(self.distortion.detach()), float(self.rate_bpp.detach())
        return d, r, d + self.lmbda * r


def rd_loss(x_hat: torch.Tensor, x: torch.Tensor, rate_bits, lmbda: float,
            pixel_count: int) -> LossBreakdown:
    """D = MSE on [0, 1] samples, R = bits per pixel, total = D + lambda * R."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    d = torch.mean((x_hat - x) ** 2)
    r = torch.as_tensor(rate_bits, dtype=d.dtype).sum() / pixel_count
    return LossBreakdown(d, r, d + lmbda * r, lmbda)


# --- data -------------------------------------------------------------------

@dataclass
class PairStore:
    """Full-resolution (source, upscaled base layer) tensor pairs."""

    sources: list = field(default_factory=list)
    upscaled: list = field(default_factory=list)
    names: list = field(default_factory=list)
    skipped: int = 0
    patch_size: int = 256

    def __len__(self):
        return len(self.sources)

    def crop_origins(self, index: int) -> tuple[int, int]:
        """Number of valid even offsets along (rows, cols)."""
        _, h, w = self.sources[index].shape
        return (h - self.patch_size) // 2 + 1, (w - self.patch_size) // 2 + 1

    def random_origin(self, index: int, rng: np.random.Generator) -> tuple[int, int]:
        nr, nc = self.crop_origins(index)
        return 2 * int(rng.integers(nr)), 2 * int(rng.integers(nc))

    def patch(self, index: int, origin) -> tuple[torch.Tensor, torch.Tensor]:
        top, left = origin
        s = self.patch_size
        return (self.sources[index][:, top:top + s, left:left + s],
                self.upscaled[index][:, top:top + s, left:left + s])

    def epoch_batches(self, rng: np.random.Generator, batch_size: int,
                      patches_per_image: int = 1) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        order = np.repeat(np.arange(len(self)), patches_per_image)
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            pairs = [self.patch(i, self.random_origin(i, rng)) for i in order[start:start + batch_size]]
            yield torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def make_pair(img: PlanarImage, bl_cfg: BaseLayerConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Source tensor and its upscaled base-layer reconstruction (both 4:4:4)."""
    w, h = img.width - img.width % 4, img.height - img.height % 4
    img = crop(img, w, h)
    _, recon = encode_base_layer(bicubic_resample(img, 0.5), bl_cfg)
    return to_tensor(duplicate_chroma_to_444(img)), upscaled_base(recon)[0]


def list_images(roots: Iterable) -> list[Path]:
    files = []
    for root in roots:
        root = Path(root)
        if root.is_file():
            files.append(root)
        elif root.is_dir():
            files.extend(sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES))
    return files


def prepare_dataset(roots, bl_qp: int, bl_cfg: BaseLayerConfig | None = None,
                    patch_size: int = 256) -> PairStore:
    """Convert, downscale, base-layer code and upscale every usable image under ``roots``."""
    bl_cfg = bl_cfg or BaseLayerConfig(qp=bl_qp)
    files = list_images(roots)
    if not files:
        raise FileNotFoundError(f"no images found under {list(roots)}")
    store = PairStore(patch_size=patch_size)
    for f in files:
        try:
            img = load_image(f)
        except ImageFormatError as exc:
            log.warning("skipping %s: %s", f, exc)
            store.skipped += 1
            continue
        if img.width < patch_size or img.height < patch_size:
            store.skipped += 1
            continue
        x, xt = make_pair(img, bl_cfg)
        store.sources.append(x)
        store.upscaled.append(xt)
        store.names.append(f.name)
    if store.skipped:
        log.warning("skipped %d undersized or unreadable images", store.skipped)
    if not len(store):
        raise ValueError("no usable training images (all undersized or unreadable)")
    return store


# --- optimisation -----------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Base rate, halved at the start of each of the last ``decay_epochs`` epochs."""
    first_decay = cfg.epochs - min(cfg.decay_epochs, cfg.epochs)
    return cfg.lr * cfg.decay_gamma ** max(0, epoch - first_decay + 1)


def make_optimizer(model: CaesrModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)


def train_step(model: CaesrModel, opt: torch.optim.Optimizer, x: torch.Tensor, xt: torch.Tensor,
               lmbda: float, generator: torch.Generator) -> LossBreakdown:
    model.train()
    out = model(x, xt, "noise", generator)
    loss = rd_loss(out["x_hat"], x, out["y_bits"] + out["z_bits"], lmbda,
                   x.shape[0] * x.shape[-2] * x.shape[-1])
    if not torch.isfinite(loss.total):
        raise TrainingDiverged("non-finite loss")
    opt.zero_grad()
    loss.total.backward()
    opt.step()
    layers.project_parameters_(model)
    return loss


@dataclass
class StepRecord:
    step: int
    distortion: float
    rate_bpp: float
    total: float
    lr: float


def write_log(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "D", "R_bpp", "total", "lr"])
        for r in records:
            w.writerow([r.step, repr(r.distortion), repr(r.rate_bpp), repr(r.total), repr(r.lr)])


def fit_patches(model: CaesrModel, x: torch.Tensor, xt: torch.Tensor, steps: int, lmbda: float,
                lr: float = 1e-4, batch_size: int = 2, seed: int = 0) -> list[StepRecord]:
    """Optimise on a fixed patch set, cycling through it in a seeded order."""
    cfg = TrainConfig(lr=lr, batch_size=batch_size, seed=seed, lmbda=lmbda, mode=model.mode.name)
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    records, order, pos = [], np.empty(0, dtype=np.int64), 0
    for step in range(1, steps + 1):
        if pos + batch_size > len(order):
            order, pos = rng.permutation(len(x)), 0
        idx = torch.from_numpy(order[pos:pos + batch_size])
        pos += batch_size
        loss = train_step(model, opt, x[idx], xt[idx], lmbda, gen)
        d, r, total = loss.values()
        records.append(StepRecord(step, d, r, total, lr))
    return records


def train(cfg: TrainConfig, store: PairStore | None = None) -> tuple[CaesrModel, list[StepRecord]]:
    """Full schedule: Adam, noise quantisation, late lr decay, per-epoch checkpoints."""
    mode = CodingMode.parse(cfg.mode)
    if not (mode.uses_autoencoder or mode.uses_sr):
        raise ValueError(f"mode {mode.name} has nothing to train")
    bl_cfg = BaseLayerConfig(codec=cfg.bl_codec, qp=cfg.bl_qp, external_template=cfg.external_template)
    if store is None:
        store = prepare_dataset(cfg.dataset_roots, cfg.bl_qp, bl_cfg, cfg.patch_size)
    model = build_model(ModelConfig(**cfg.model), mode, cfg.seed)
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    lmbda = cfg.rate_weight
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[StepRecord] = []
    entry = None
    step = 0
    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        for x, xt in store.epoch_batches(rng, cfg.batch_size, cfg.patches_per_image):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            step += 1
            try:
                loss = train_step(model, opt, x, xt, lmbda, gen)
            except TrainingDiverged:
                if entry is not None:
                    model.load(out_dir / entry.weights)
                raise TrainingDiverged(
                    f"loss became non-finite at step {step}; last checkpoint: "
                    f"{entry.weights if entry else 'none'}") from None
            d, r, total = loss.values()
            records.append(StepRecord(step, d, r, total, lr))
        entry = register_model(out_dir, model, cfg.bl_qp, lmbda, cfg.model_id or entry and entry.model_id)
        write_log(out_dir / f"train_log_id{entry.model_id}.csv", records)
        log.info("epoch %d/%d step %d lr %.2e loss %.5f", epoch + 1, cfg.epochs, step, lr,
                 records[-1].total if records else math.nan)
    (out_dir / f"train_config_id{entry.model_id}.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    model.eval()
    return model, records
