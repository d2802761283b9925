import csv
import json

import numpy as np
import pytest
import torch

from caesr.image import PlanarImage, save_image, yuv_to_rgb
from caesr.networks import CodingMode, ModelConfig, build_model
from caesr.training import (LAMBDA_TABLE, PairStore, TrainConfig, TrainingDiverged, epoch_lr, fit_patches,
                            lambda_for_qp, prepare_dataset, rd_loss, train)


def test_rd_loss_examples():
    x = torch.rand(2, 3, 8, 8)
    loss = rd_loss(x, x, torch.tensor(128.0), 0.01, 128)
    assert float(loss.total) == pytest.approx(0.01) and float(loss.distortion) == 0
    loss = rd_loss(x + 0.3, x, torch.tensor(50.0), 0.0, 128)
    assert float(loss.total) == float(loss.distortion)
    loss = rd_loss(x + 0.1, x, torch.tensor(0.0), 0.5, 128)
    assert float(loss.total) == pytest.approx(0.01, rel=1e-5)
    d, r, t = loss.values()
    assert t == d + 0.5 * r
    with pytest.raises(ValueError):
        rd_loss(x, x[:1], 0.0, 0.1, 1)


def test_lambda_table():
    assert lambda_for_qp(22) == 0.032 and lambda_for_qp(37) == 0.004
    assert lambda_for_qp(22, override=0.5) == 0.5
    with pytest.raises(ValueError):
        lambda_for_qp(25)
    assert TrainConfig(bl_qp=32, lmbda=0.1).rate_weight == 0.1
    assert TrainConfig(bl_qp=32).rate_weight == LAMBDA_TABLE[32]


def test_config_validation_and_file(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lmbda=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bl_qp": 27, "lambda": 0.02, "epochs": 3}))
    cfg = TrainConfig.from_file(p)
    assert (cfg.bl_qp, cfg.lmbda, cfg.epochs, cfg.lr, cfg.batch_size) == (27, 0.02, 3, 1e-4, 8)
    assert cfg.betas == (0.9, 0.999) and cfg.adam_eps == 1e-8
    p.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError):
        TrainConfig.from_file(p)


def test_lr_schedule():
    cfg = TrainConfig()
    lrs = [epoch_lr(cfg, e) for e in range(20)]
    assert lrs[:15] == [1e-4] * 15
    assert lrs[15:] == [1e-4 * 0.5 ** k for k in range(1, 6)]


def _write_images(root, sizes, seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(exist_ok=True)
    for i, (w, h) in enumerate(sizes):
        base = np.linspace(0, 255, w)[None, :, None] * np.ones((h, 1, 3))
        rgb = np.clip(base + rng.normal(0, 20, (h, w, 3)), 0, 255).astype(np.uint8)
        from PIL import Image
        Image.fromarray(rgb).save(root / f"img{i}.png")


def test_prepare_dataset(tmp_path):
    _write_images(tmp_path / "d", [(256, 256), (512, 512), (100, 300)])
    store = prepare_dataset([tmp_path / "d"], 37)
    assert len(store) == 2 and store.skipped == 1
    assert store.crop_origins(0) == (1, 1)
    assert not torch.equal(store.sources[0], store.upscaled[0])
    with pytest.raises(FileNotFoundError):
        prepare_dataset([tmp_path / "empty"], 37)


def test_crop_origin_uniform():
    store = PairStore([torch.zeros(3, 512, 512)], [torch.zeros(3, 512, 512)], ["a"])
    rng = np.random.default_rng(0)
    draws = np.array([store.random_origin(0, rng) for _ in range(10_000)])
    assert np.all(draws % 2 == 0) and draws.min() == 0 and draws.max() == 256
    counts = np.bincount(draws[:, 0] // 2, minlength=129)
    assert len(counts) == 129
    expected = 10_000 / 129
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 200  # 128 dof, p < 1e-2 threshold is about 164; generous bound


def _tiny_patches(smoke_dir, n=4, size=64):
    store = prepare_dataset([smoke_dir], 37, patch_size=size)
    rng = np.random.default_rng(0)
    pairs = [store.patch(i % len(store), store.random_origin(i % len(store), rng)) for i in range(n)]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def test_fit_deterministic(smoke_dir):
    x, xt = _tiny_patches(smoke_dir)
    runs = []
    for _ in range(2):
        m = build_model(ModelConfig.reduced(), "conditional", seed=0)
        runs.append([r.total for r in fit_patches(m, x, xt, 4, 0.01)])
    assert runs[0] == runs[1]
    for r in fit_patches(build_model(ModelConfig.reduced(), "res_bic", seed=0), x, xt, 2, 0.01):
        assert r.total == r.distortion + 0.01 * r.rate_bpp


def test_train_writes_outputs(tmp_path, smoke_dir):
    cfg = TrainConfig(epochs=2, batch_size=2, max_steps=3, dataset_roots=[str(smoke_dir)],
                      output_dir=str(tmp_path / "w"), patch_size=128)
    model, records = train(cfg)
    assert len(records) == 3
    out = tmp_path / "w"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["models"][0]["lambda"] == 0.004 and manifest["models"][0]["mode"] == "conditional"
    rows = list(csv.DictReader(open(out / "train_log_id1.csv")))
    assert list(rows[0]) == ["step", "D", "R_bpp", "total", "lr"]
    for row in rows:
        assert float(row["total"]) == float(row["D"]) + 0.004 * float(row["R_bpp"])
    assert float(rows[0]["lr"]) == 1e-4 * 0.5  # two-epoch run: both epochs are decay epochs


def test_divergence_guard(tmp_path, smoke_dir, monkeypatch):
    import caesr.training as tr
    real = tr.rd_loss
    calls = []

    def poisoned(x_hat, *args):
        calls.append(1)
        return real(x_hat * float("nan") if len(calls) > 1 else x_hat, *args)

    monkeypatch.setattr(tr, "rd_loss", poisoned)
    cfg = TrainConfig(epochs=2, batch_size=2, max_steps=4, patches_per_image=1, dataset_roots=[str(smoke_dir)],
                      output_dir=str(tmp_path / "w"), patch_size=64)
    store = prepare_dataset([smoke_dir], 37, patch_size=64)
    store.sources, store.upscaled, store.names = store.sources[:2], store.upscaled[:2], store.names[:2]
    with pytest.raises(TrainingDiverged, match="step 2.*id1"):
        train(cfg, store)


def test_nothing_to_train():
    with pytest.raises(ValueError):
        train(TrainConfig(mode="bic_only"))
