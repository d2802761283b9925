import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from caesr.codec import register_model
from caesr.evaluation import (CSV_COLUMNS, SUMMARY_COLUMNS, RdCurve, RdPoint, bd_rate, mean_curves, psnr_luma,
                              read_rows, run_ablation, ssim_luma)
from caesr.image import PlanarImage, crop, save_image
from caesr.networks import ModelConfig, build_model


def img_from_luma(y):
    h, w = y.shape
    c = np.full(((h + 1) // 2, (w + 1) // 2), 128)
    return PlanarImage(w, h, "420", (y, c, c))


def test_psnr_examples(smoke_images):
    a = smoke_images[0]
    assert psnr_luma(a, a) == 100.0
    y = a.y.astype(int)
    b = img_from_luma(np.where(y < 128, y + 16, y - 16))
    assert psnr_luma(img_from_luma(a.y), b) == pytest.approx(24.0484, abs=1e-4)
    c = smoke_images[1]
    assert psnr_luma(a, c) == psnr_luma(c, a)
    with pytest.raises(ValueError):
        psnr_luma(a, crop(a, 128, 128))


def test_ssim_examples(smoke_images):
    a = smoke_images[5]
    assert ssim_luma(a, a) == pytest.approx(1.0)
    inv = img_from_luma(255 - a.y)
    assert ssim_luma(img_from_luma(a.y), inv) < 0.3
    with pytest.raises(ValueError):
        ssim_luma(crop(a, 10, 10), crop(a, 10, 10))


def test_ssim_matches_reference(smoke_images, rng):
    for a in smoke_images[:3]:
        noisy = np.clip(a.y.astype(int) + rng.integers(-25, 26, a.y.shape), 0, 255)
        b = img_from_luma(noisy)
        ref = structural_similarity(a.y, b.y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=255)
        assert ssim_luma(img_from_luma(a.y), b) == pytest.approx(ref, abs=1e-9)


def test_ssim_constant_shift_closed_form():
    y = np.full((32, 32), 100)
    a, b = img_from_luma(y), img_from_luma(y + 10)
    c1 = (0.01 * 255) ** 2
    expect = (2 * 100 * 110 + c1) / (100 ** 2 + 110 ** 2 + c1)
    assert ssim_luma(a, b) == pytest.approx(expect, abs=1e-12)


def curve(rates, q, label="c"):
    return RdCurve.from_arrays(label, rates, q, np.array(q) / 100)


def test_bd_rate_oracles():
    r = np.array([0.1, 0.25, 0.5, 1.0])
    q = [30.0, 33.0, 36.0, 39.0]
    a = curve(r, q)
    assert bd_rate(a, curve(r, q)) == 0.0
    assert bd_rate(a, curve(r * 1.1, q)) == pytest.approx(10.0, abs=0.01)
    assert bd_rate(a, curve(r / 1.1, q)) == pytest.approx(-9.0909, abs=0.01)
    assert bd_rate(a, curve(r * 1.1, q), "ssim") == pytest.approx(10.0, abs=0.01)


@given(st.floats(0.98, 1.02), st.floats(0.0, 0.05))
def test_bd_rate_near_antisymmetric(scale, slope):
    r = np.array([0.1, 0.2, 0.4, 0.8, 1.6])
    qa = 30 + 10 * np.log2(r / 0.1) ** 0.9
    qb = qa + slope * np.arange(5)
    a, b = curve(r, qa), curve(r * scale, qb)
    assert abs(bd_rate(a, b) + bd_rate(b, a)) < 0.2


def test_bd_rate_errors():
    r = [0.1, 0.2, 0.3, 0.4]
    with pytest.raises(ValueError):
        bd_rate(curve(r[:3], [1, 2, 3]), curve(r[:3], [1, 2, 3]))
    with pytest.raises(ValueError):
        bd_rate(curve(r, [30, 31, 32, 33]), curve(r, [40, 41, 42, 43]))
    with pytest.warns(UserWarning):
        bd_rate(curve(r, [30, 32, 31, 33]), curve(r, [30, 32, 31, 33]))


def test_rd_types():
    with pytest.raises(ValueError):
        RdPoint(0.0, 30)
    with pytest.raises(ValueError):
        RdPoint(0.1, 30, 1.5)
    with pytest.raises(ValueError):
        RdCurve("x", [RdPoint(0.1, 30), RdPoint(0.1, 31)])
    c = RdCurve("x", [RdPoint(0.3, 33), RdPoint(0.1, 30)])
    assert [p.bpp for p in c.points] == [0.1, 0.3]


@pytest.fixture(scope="module")
def ablation(tmp_path_factory, smoke_images):
    root = tmp_path_factory.mktemp("abl")
    corpus = root / "corpus"
    corpus.mkdir()
    for i in (0, 2):
        save_image(crop(smoke_images[i], 128, 128, 64, 64), corpus / f"im{i}.png")
    wdir = root / "w"
    for mode in ("sr_only", "res_bic", "res_sr", "conditional"):
        for qp in (37, 32, 27, 22):
            register_model(wdir, build_model(ModelConfig.reduced(), mode, seed=qp), qp, 0.01)
    rows, summary = run_ablation(corpus, wdir, out_csv=root / "rd.csv", summary_csv=root / "bd.csv")
    return root, rows, summary


def test_ablation_outputs(ablation):
    root, rows, summary = ablation
    assert len(rows) == 2 * (5 * 4 + 4)
    header = next(csv.reader(open(root / "rd.csv")))
    assert tuple(header) == CSV_COLUMNS
    assert tuple(next(csv.reader(open(root / "bd.csv")))) == SUMMARY_COLUMNS
    assert len(read_rows(root / "rd.csv")) == len(rows)
    modes = {m for m, _, _ in summary}
    assert {"bic_only", "sr_only", "res_bic", "res_sr", "conditional", "anchor_toy_intra"} == modes
    anchor = [s for s in summary if s[0] == "anchor_toy_intra"][0]
    assert anchor[1] == 0.0


def test_ablation_bic_only_monotone(ablation):
    _, rows, _ = ablation
    for image in ("im0.png", "im2.png"):
        pts = sorted((r for r in rows if r.image == image and r.mode == "bic_only"), key=lambda r: -r.bl_qp)
        bpps = [r.bpp for r in pts]
        assert [r.bl_qp for r in pts] == [37, 32, 27, 22]
        assert all(b > a for a, b in zip(bpps, bpps[1:]))


def test_ablation_bpp_is_file_size(ablation, smoke_images):
    _, rows, _ = ablation
    for r in rows:
        if not r.mode.startswith("anchor"):
            assert r.bpp * 128 * 128 / 8 == pytest.approx(r.bl_bytes + r.el_bytes + 32)


def test_missing_weights(tmp_path, smoke_dir):
    from caesr.codec import ModelResolutionError
    with pytest.raises(ModelResolutionError):
        run_ablation(smoke_dir, None, modes=("conditional",))
