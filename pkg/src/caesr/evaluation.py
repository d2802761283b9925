"""Luma quality metrics, Bjontegaard delta rate and the ablation harness."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .baselayer import BaseLayerConfig, encode_base_layer
from .codec import ModelResolutionError, decode_picture, encode_picture, find_entry, load_model
from .image import PlanarImage, crop, load_image
from .networks import CodingMode
from .training import list_images

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

DEFAULT_QPS = (37, 32, 27, 22)
DEFAULT_ANCHOR_QPS = (42, 39, 36, 31)
CSV_COLUMNS = ("image", "mode", "bl_qp", "bpp", "psnr_y", "ssim_y", "el_bytes", "bl_bytes")
SUMMARY_COLUMNS = ("mode", "bd_rate_psnr", "bd_rate_ssim")


def _luma_pair(a: PlanarImage, b: PlanarImage) -> tuple[np.ndarray, np.ndarray]:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"size mismatch {a.width}x{a.height} vs {b.width}x{b.height}")
    return a.y.astype(np.float64), b.y.astype(np.float64)


def psnr_luma(a: PlanarImage, b: PlanarImage) -> float:
    ya, yb = _luma_pair(a, b)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(255.0 ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim_luma(a: PlanarImage, b: PlanarImage) -> float:
    """Single-scale SSIM on luma, Gaussian-weighted, mean over valid positions."""
    ya, yb = _luma_pair(a, b)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} samples")
    g = gaussian_window()

    def blur(v):
        return correlate1d(correlate1d(v, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    mu_a, mu_b = blur(ya), blur(yb)
    var_a = blur(ya * ya) - mu_a ** 2
    var_b = blur(yb * yb) - mu_b ** 2
    cov = blur(ya * yb) - mu_a * mu_b
    c1, c2 = (SSIM_K1 * 255) ** 2, (SSIM_K2 * 255) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    p = SSIM_WINDOW // 2
    return float(s[p:-p, p:-p].mean())


# --- RD curves and BD-rate ---------------------------------------------------

@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr_y: float
    ssim_y: float = float("nan")

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not math.isnan(self.ssim_y) and not -1 <= self.ssim_y <= 1:
            raise ValueError(f"ssim {self.ssim_y} outside [-1, 1]")

    def quality(self, metric: str) -> float:
        if metric == "psnr":
            return self.psnr_y
        if metric == "ssim":
            return self.ssim_y
        raise ValueError(f"unknown metric {metric!r}")


@dataclass
class RdCurve:
    label: str
    points: list = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        rates = [p.bpp for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"curve {self.label!r}: bpp must be strictly increasing")

    @classmethod
    def from_arrays(cls, label, bpp, psnr, ssim=None) -> "RdCurve":
        ssim = [float("nan")] * len(bpp) if ssim is None else ssim
        return cls(label, [RdPoint(float(r), float(q), float(s)) for r, q, s in zip(bpp, psnr, ssim)])


def bd_rate(anchor: RdCurve, test: RdCurve, metric: str = "psnr") -> float:
    """Average rate difference (percent) of ``test`` versus ``anchor`` at equal quality."""
    fits, ranges = [], []
    for curve in (anchor, test):
        if len(curve.points) < 4:
            raise ValueError(f"curve {curve.label!r} needs at least 4 points")
        q = np.array([p.quality(metric) for p in curve.points])
        r = np.log10([p.bpp for p in curve.points])
        if not np.all(np.isfinite(q)):
            raise ValueError(f"curve {curve.label!r} has non-finite {metric} values")
        if np.any(np.diff(q) <= 0):
            warnings.warn(f"curve {curve.label!r}: quality not monotone in rate; fitting sorted points")
        order = np.argsort(q)
        fits.append(np.polyfit(q[order], r[order], 3))
        ranges.append((q.min(), q.max()))
    lo = max(ranges[0][0], ranges[1][0])
    hi = min(ranges[0][1], ranges[1][1])
    if not hi > lo:
        raise ValueError("curves have no overlapping quality interval")
    areas = []
    for p in fits:
        ip = np.polyint(p)
        areas.append(np.polyval(ip, hi) - np.polyval(ip, lo))
    delta = (areas[1] - areas[0]) / (hi - lo)
    return 100.0 * (10.0 ** delta - 1.0)


# --- ablation harness ----------------------------------------------------------

ANCHOR_LABEL = "anchor"


@dataclass
class AblationRow:
    image: str
    mode: str
    bl_qp: int
    bpp: float
    psnr_y: float
    ssim_y: float
    el_bytes: int
    bl_bytes: int

    def as_list(self):
        return [self.image, self.mode, self.bl_qp, repr(self.bpp), repr(self.psnr_y),
                repr(self.ssim_y), self.el_bytes, self.bl_bytes]


def _prepare(img: PlanarImage) -> PlanarImage:
    # the layered path downsamples 4:2:0 by two, so dimensions must be multiples of 4
    return crop(img, img.width - img.width % 4, img.height - img.height % 4)


def resolve_models(weights_dir, modes, qps) -> dict:
    """(mode, qp) -> manifest entry for every mode that needs weights."""
    out = {}
    for mode in modes:
        mode = CodingMode.parse(mode)
        if not (mode.uses_autoencoder or mode.uses_sr):
            continue
        if weights_dir is None:
            raise ModelResolutionError(f"mode {mode.name} needs a weights directory")
        for qp in qps:
            out[mode.name, qp] = find_entry(weights_dir, mode=mode, bl_qp=qp)
    return out


def evaluate_image(path, modes, qps, anchor_qps, weights_dir, entries: dict,
                   bl_template: BaseLayerConfig, verify: bool = True) -> list[AblationRow]:
    src = _prepare(load_image(path))
    name = Path(path).name
    pixels = src.width * src.height
    rows = []
    cache = {}
    for mode in modes:
        mode = CodingMode.parse(mode)
        for qp in qps:
            model = None
            entry = entries.get((mode.name, qp))
            if entry is not None:
                key = (weights_dir, entry.model_id)
                if key not in cache:
                    cache[key] = load_model(weights_dir, entry)
                model = cache[key]
            bl_cfg = BaseLayerConfig(bl_template.codec, qp, bl_template.external_template,
                                     bl_template.external_decoder)
            coded = encode_picture(src, mode, bl_cfg, model, entry.model_id if entry else 0)
            if verify and mode.uses_autoencoder:
                dec = decode_picture(coded.bitstream, model, bl_cfg)
                if not (dec.image == coded.image):
                    raise RuntimeError(f"{name} {mode.name} qp{qp}: decoder mismatch")
            rows.append(AblationRow(name, mode.name, qp, 8 * len(coded.bitstream) / pixels,
                                    psnr_luma(src, coded.image), ssim_luma(src, coded.image),
                                    coded.el_bytes, coded.bl_bytes))
    for qp in anchor_qps:
        bl_cfg = BaseLayerConfig(bl_template.codec, qp, bl_template.external_template,
                                 bl_template.external_decoder)
        data, recon = encode_base_layer(src, bl_cfg)
        rows.append(AblationRow(name, f"{ANCHOR_LABEL}_{bl_cfg.codec}", qp, 8 * len(data) / pixels,
                                psnr_luma(src, recon), ssim_luma(src, recon), 0, len(data)))
    return rows


def _evaluate_star(args):
    return evaluate_image(*args)


def mean_curves(rows: list[AblationRow]) -> dict[str, RdCurve]:
    """Per-mode curves of corpus-mean bpp / PSNR / SSIM at each QP."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r.mode, {}).setdefault(r.bl_qp, []).append(r)
    curves = {}
    for mode, by_qp in groups.items():
        pts = []
        for qp, rs in by_qp.items():
            pts.append(RdPoint(float(np.mean([r.bpp for r in rs])), float(np.mean([r.psnr_y for r in rs])),
                               float(np.mean([r.ssim_y for r in rs]))))
        try:
            curves[mode] = RdCurve(mode, pts)
        except ValueError as exc:
            log.warning("%s", exc)
    return curves


def image_curves(rows: list[AblationRow]) -> dict[tuple[str, str], RdCurve]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.image, r.mode), []).append(RdPoint(r.bpp, r.psnr_y, r.ssim_y))
    out = {}
    for key, pts in groups.items():
        try:
            out[key] = RdCurve(f"{key[0]}:{key[1]}", pts)
        except ValueError as exc:
            log.warning("%s", exc)
    return out


def _safe_bd(anchor, test, metric) -> float:
    try:
        return bd_rate(anchor, test, metric)
    except ValueError as exc:
        log.warning("BD-rate %s vs %s (%s): %s", test.label, anchor.label, metric, exc)
        return float("nan")


def summarize(rows: list[AblationRow]) -> list[tuple[str, float, float]]:
    curves = mean_curves(rows)
    anchors = [m for m in curves if m.startswith(ANCHOR_LABEL)]
    if not anchors:
        raise ValueError("no anchor curve among the rows")
    anchor = curves[anchors[0]]
    return [(mode, _safe_bd(anchor, c, "psnr"), _safe_bd(anchor, c, "ssim")) for mode, c in curves.items()]


def write_rows(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


def read_rows(path) -> list[AblationRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [AblationRow(d["image"], d["mode"], int(d["bl_qp"]), float(d["bpp"]), float(d["psnr_y"]),
                            float(d["ssim_y"]), int(d["el_bytes"]), int(d["bl_bytes"])) for d in reader]


def write_summary(path, summary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for mode, bp, bs in summary:
            w.writerow([mode, repr(bp), repr(bs)])


def run_ablation(corpus, weights_dir=None, qps=DEFAULT_QPS, anchor_qps=DEFAULT_ANCHOR_QPS,
                 modes=tuple(m.name for m in CodingMode), bl_cfg: BaseLayerConfig | None = None,
                 jobs: int = 1, out_csv=None, summary_csv=None, verify: bool = True):
    """Evaluate every mode and QP on a corpus; returns (rows, summary)."""
    bl_cfg = bl_cfg or BaseLayerConfig()
    files = list_images([corpus])
    if not files:
        raise FileNotFoundError(f"no images in {corpus}")
    entries = resolve_models(weights_dir, modes, qps)
    tasks = [(f, modes, qps, anchor_qps, weights_dir, entries, bl_cfg, verify) for f in files]
    if jobs > 1:
        with Pool(jobs) as pool:
            results = pool.map(_evaluate_star, tasks)
    else:
        results = [_evaluate_star(t) for t in tasks]
    rows = [r for rs in results for r in rs]
    summary = summarize(rows)
    if out_csv:
        write_rows(out_csv, rows)
    if summary_csv:
        write_summary(summary_csv, summary)
    return rows, summary
