import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from caesr.baselayer import (DCT_MATRIX, BaseLayerConfig, BaseLayerError, BitReader, BitWriter,
                             decode_base_layer, encode_base_layer, external_encode, forward_dct,
                             inverse_dct, qstep, toy_intra_decode, toy_intra_encode)
from caesr.evaluation import psnr_luma
from caesr.image import PlanarImage, bicubic_resample


def flat(v, w=32, h=32):
    return PlanarImage(w, h, "420", (np.full((h, w), v), np.full((h // 2, w // 2), v), np.full((h // 2, w // 2), v)))


def test_qstep():
    assert qstep(22) == 8.0 and qstep(4) == 1.0


def test_dct_close_to_float():
    from scipy.fft import dctn
    rng = np.random.default_rng(0)
    b = rng.integers(-255, 256, (10, 8, 8))
    ref = dctn(b.astype(float), axes=(1, 2), norm="ortho")
    assert np.max(np.abs(forward_dct(b) - ref)) <= 1.5  # two integer rounding stages
    assert np.max(np.abs(inverse_dct(forward_dct(b)) - b)) <= 2


@pytest.mark.parametrize("qp", [0, 10, 22])
def test_flat_exact_low_qp(qp):
    img = flat(128)
    assert toy_intra_decode(toy_intra_encode(img, qp)) == img


def test_flat_blocks_dc_only():
    img = flat(200, 16, 16)
    data = toy_intra_encode(img, 30)
    # 4 luma + 1 + 1 chroma blocks: ue(1) ue(0) se(level) each
    rd = BitReader(data[6:])
    for _ in range(6):
        assert rd.ue() == 1 and rd.ue() == 0
        rd.se()


@given(st.lists(st.integers(-1000, 1000), max_size=50))
def test_expgolomb_roundtrip(values):
    w = BitWriter()
    for v in values:
        w.ue(abs(v))
        w.se(v)
    r = BitReader(w.getvalue())
    for v in values:
        assert r.ue() == abs(v) and r.se() == v


def test_mse_nonincreasing(smoke_images):
    img = bicubic_resample(smoke_images[2], 0.5)
    mses = []
    for qp in (37, 32, 27, 22):
        rec = toy_intra_decode(toy_intra_encode(img, qp))
        mses.append(np.mean((rec.y.astype(float) - img.y) ** 2))
    assert all(b <= a for a, b in zip(mses, mses[1:]))


def test_deterministic_and_odd_sizes(rng):
    y = rng.integers(0, 256, (13, 21))
    c = rng.integers(0, 256, (7, 11))
    img = PlanarImage(21, 13, "420", (y, c, c))
    a, b = toy_intra_encode(img, 30), toy_intra_encode(img, 30)
    assert a == b
    rec = toy_intra_decode(a)
    assert (rec.width, rec.height) == (21, 13) and psnr_luma(img, rec) > 20


def test_corrupt_stream():
    with pytest.raises(BaseLayerError):
        toy_intra_decode(b"\x01")
    data = toy_intra_encode(flat(90), 30)
    with pytest.raises(BaseLayerError):
        toy_intra_decode(data[:7])
    with pytest.raises(ValueError):
        toy_intra_encode(flat(90), 60)


def test_config_validation():
    with pytest.raises(ValueError):
        BaseLayerConfig(qp=52)
    with pytest.raises(ValueError):
        BaseLayerConfig(codec="bogus")
    with pytest.raises(ValueError):
        BaseLayerConfig(codec="external", external_template="enc {in} {out}")


IDENTITY = f"{sys.executable} -c \"import shutil,sys; shutil.copy(sys.argv[1], sys.argv[2]); shutil.copy(sys.argv[1], sys.argv[3]); sys.argv[4:]\" {{in}} {{out}} {{recon}} {{qp}} {{w}} {{h}}"


def test_external_identity(smoke_images):
    img = bicubic_resample(smoke_images[0], 0.5)
    cfg = BaseLayerConfig("external", 37, IDENTITY)
    data, recon = external_encode(img, cfg)
    assert recon == img and len(data) == len(img.tobytes())


def test_external_missing_binary():
    cfg = BaseLayerConfig("external", 37, "/nonexistent/encoder {in} {out} {recon} {qp} {w} {h}")
    with pytest.raises(BaseLayerError, match="nonexistent"):
        external_encode(flat(10), cfg)


def test_external_bad_recon_size():
    tpl = (f"{sys.executable} -c \"import sys; open(sys.argv[2],'wb').write(b'x'); "
           f"open(sys.argv[3],'wb').write(b'y' * 10)\" {{in}} {{out}} {{recon}} {{qp}} {{w}} {{h}}")
    with pytest.raises(BaseLayerError, match="expected"):
        external_encode(flat(10), BaseLayerConfig("external", 37, tpl))


def test_external_nonzero_exit():
    tpl = f"{sys.executable} -c \"import sys; sys.exit(3)\" {{in}} {{out}} {{recon}} {{qp}} {{w}} {{h}}"
    with pytest.raises(BaseLayerError, match="exited with 3"):
        external_encode(flat(10), BaseLayerConfig("external", 37, tpl))


def test_dispatch_toy():
    img = flat(60)
    data, rec = encode_base_layer(img, BaseLayerConfig(qp=32))
    assert decode_base_layer(data, BaseLayerConfig(qp=32), 32, 32) == rec
    with pytest.raises(BaseLayerError):
        decode_base_layer(data, BaseLayerConfig(qp=32), 64, 32)
