"""Stage losses, scene encoder/decoder, and three-stage training checks.

Loss hand values come from closed forms; every analytic gradient is checked
against central finite differences on float64 instances with no ties in the
absolute-value terms (random continuous draws keep sign() away from zero).
"""

import numpy as np
import pytest

from conftest import assert_grads_match, rel_err, tiny_config
from dream.core import FmriSample, RgbdImage, ValidationError, child_rng
from dream.data import generate_synthetic, load_dataset
from dream.rpkm import (
    PairedData,
    RgbdDecoder,
    RgbdEncoder,
    StageReport,
    _stage1_batch_loss_and_grad,
    _stage2_batch_loss_and_grad,
    decode_batch,
    decode_rgbd,
    stage1_loss,
    stage1_loss_and_grad,
    stage2_loss,
    stage2_loss_and_grad,
    total_variation,
    total_variation_and_grad,
    train_stage1,
    train_stage2,
    train_stage3,
    tv_regularizer,
)


# ---------------------------------------------------------------------------
# stage-1 loss


def test_stage1_identity_hits_lower_bound():
    r = np.array([0.3, -1.2, 0.7, 2.0])
    # perfect reconstruction: MSE 0, cosine 1 -> -(1 - beta)
    assert stage1_loss(r, r.copy(), beta=0.9) == pytest.approx(-0.1, abs=1e-15)


def test_stage1_antiparallel_closed_form():
    r = np.array([1.0, -1.0, 1.0, -1.0])  # mean square 1
    # r_hat = -r: MSE = 4 * mean(r^2), cosine = -1
    loss = stage1_loss(r, -r, beta=0.9)
    assert loss == pytest.approx(0.9 * 4.0 + 0.1, abs=1e-12)


def test_stage1_lower_bound_holds_on_random_pairs():
    rng = np.random.default_rng(0)
    beta = 0.9
    for _ in range(200):
        r = rng.standard_normal(8)
        rh = rng.standard_normal(8)
        assert stage1_loss(r, rh, beta) >= -(1.0 - beta) - 1e-12


def test_stage1_rejects_zero_vectors():
    r = np.ones(4)
    with pytest.raises(ValidationError, match="zero vector"):
        stage1_loss(r, np.zeros(4), beta=0.9)
    with pytest.raises(ValidationError, match="zero vector"):
        stage1_loss(np.zeros(4), r, beta=0.9)
    with pytest.raises(ValidationError, match="beta"):
        stage1_loss(r, r, beta=1.5)


def test_stage1_gradients_fd():
    rng = np.random.default_rng(1)
    r = rng.standard_normal(8)
    rh = rng.standard_normal(8)
    _, dr, drh = stage1_loss_and_grad(r, rh, beta=0.9)
    assert_grads_match(lambda: stage1_loss(r, rh, 0.9), [r, rh], [dr, drh])


def test_stage1_batch_matches_per_row_mean():
    rng = np.random.default_rng(2)
    r = rng.standard_normal((5, 8))
    rh = rng.standard_normal((5, 8))
    loss, drh = _stage1_batch_loss_and_grad(r, rh, beta=0.9)
    per_row = [stage1_loss_and_grad(r[i], rh[i], 0.9) for i in range(5)]
    assert loss == pytest.approx(np.mean([p[0] for p in per_row]), abs=1e-12)
    assert rel_err(drh, np.stack([p[2] for p in per_row]) / 5.0) < 1e-12


def test_stage1_batch_gradient_fd():
    rng = np.random.default_rng(3)
    r = rng.standard_normal((3, 6))
    rh = rng.standard_normal((3, 6))
    _, drh = _stage1_batch_loss_and_grad(r, rh, beta=0.9)
    assert_grads_match(lambda: _stage1_batch_loss_and_grad(r, rh, 0.9)[0], [rh], [drh])


# ---------------------------------------------------------------------------
# total variation


def test_tv_hand_value():
    x = np.array([[0.0, 1.0], [0.0, 1.0]])
    # vertical diffs are 0, horizontal diffs are 1 twice, size 4
    assert total_variation(x) == pytest.approx(0.5, abs=1e-15)


def test_tv_zero_iff_constant():
    assert total_variation(np.full((6, 7), 3.2)) == 0.0
    assert total_variation(np.full((4, 4, 3), -1.0)) == 0.0
    x = np.full((4, 4), 1.0)
    x[2, 2] = 1.001
    assert total_variation(x) > 0.0


def test_tv_positive_homogeneity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 6, 3))
    base = total_variation(x)
    for c in (2.5, -3.0, 0.25):
        assert rel_err(total_variation(c * x), abs(c) * base) < 1e-12


def test_tv_gradient_fd():
    rng = np.random.default_rng(5)
    for shape in ((5, 6), (4, 5, 3)):
        x = rng.standard_normal(shape)
        _, g = total_variation_and_grad(x)
        assert_grads_match(lambda: total_variation(x), [x], [g])


def test_tv_rejects_bad_rank():
    with pytest.raises(ValidationError, match="got shape"):
        total_variation(np.zeros(8))


def test_tv_regularizer_accepts_rgbd_image():
    rng = np.random.default_rng(6)
    rgb = rng.uniform(0, 1, (8, 8, 3))
    depth = rng.uniform(0.2, 0.9, (8, 8))
    img = RgbdImage(rgb=rgb, depth=depth)
    assert tv_regularizer(img) == total_variation(img.as_array())


# ---------------------------------------------------------------------------
# stage-2 loss


def test_stage2_constant_offset_hand_value():
    d = np.full((4, 4, 4), 0.4)
    d_hat = d + 0.1
    # L1 is 0.1 everywhere; a constant prediction has zero TV
    assert stage2_loss(d, d_hat, tv_weight=1.0) == pytest.approx(0.1, abs=1e-12)


def test_stage2_striped_hand_value():
    d = np.zeros((2, 2))
    d_hat = np.array([[0.0, 1.0], [0.0, 1.0]])
    # L1 = 0.5, TV = 0.5
    assert stage2_loss(d, d_hat, tv_weight=1.0) == pytest.approx(1.0, abs=1e-15)
    assert stage2_loss(d, d_hat, tv_weight=0.0) == pytest.approx(0.5, abs=1e-15)


def test_stage2_accepts_rgbd_images():
    rng = np.random.default_rng(7)
    a = RgbdImage(rgb=rng.uniform(0, 1, (8, 8, 3)), depth=rng.uniform(0.2, 1.0, (8, 8)))
    b = RgbdImage(rgb=rng.uniform(0, 1, (8, 8, 3)), depth=rng.uniform(0.2, 1.0, (8, 8)))
    assert stage2_loss(a, b, 1.0) == stage2_loss(a.as_array(), b.as_array(), 1.0)


def test_stage2_gradient_fd():
    rng = np.random.default_rng(8)
    d = rng.uniform(0, 1, (6, 6, 4))
    d_hat = rng.uniform(0, 1, (6, 6, 4))
    _, g = stage2_loss_and_grad(d, d_hat, tv_weight=1.0)
    assert_grads_match(lambda: stage2_loss(d, d_hat, 1.0), [d_hat], [g], coords=40,
                       rng=np.random.default_rng(9))


def test_stage2_batch_matches_per_item_mean():
    rng = np.random.default_rng(10)
    d = rng.uniform(0, 1, (4, 5, 5, 4))
    dh = rng.uniform(0, 1, (4, 5, 5, 4))
    loss, g = _stage2_batch_loss_and_grad(d, dh, tv_weight=1.0)
    per = [stage2_loss_and_grad(d[i], dh[i], 1.0) for i in range(4)]
    assert rel_err(loss, np.mean([p[0] for p in per])) < 1e-12
    assert rel_err(g, np.stack([p[1] for p in per]) / 4.0) < 1e-12


def test_stage2_rejects_mismatch():
    with pytest.raises(ValidationError, match="shape mismatch"):
        stage2_loss(np.zeros((4, 4, 4)), np.zeros((4, 5, 4)), 1.0)
    with pytest.raises(ValidationError, match="tv_weight"):
        stage2_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), -0.5)


# ---------------------------------------------------------------------------
# models


def test_rgbd_encoder_shapes_and_size_contract():
    enc = RgbdEncoder(16, 32, child_rng(0, "enc"))
    x = np.random.default_rng(11).uniform(0, 1, (3, 16, 16, 4)).astype(np.float32)
    assert enc.forward(x).shape == (3, 32)
    with pytest.raises(ValidationError, match="divisible by 16"):
        RgbdEncoder(24, 32, child_rng(0, "enc"))
    with pytest.raises(ValidationError, match="expected"):
        enc.forward(x[:, :8])


def test_rgbd_decoder_shapes_and_ranges():
    dec = RgbdDecoder(16, 32, child_rng(0, "dec"))
    r = np.random.default_rng(12).standard_normal((3, 32)).astype(np.float32)
    y = dec.forward(r)
    assert y.shape == (3, 16, 16, 4)
    assert (y[..., :3] >= 0).all() and (y[..., :3] <= 1).all()
    assert (y[..., 3] > 0).all() and (y[..., 3] <= 1).all()
    with pytest.raises(ValidationError, match="expected"):
        dec.forward(r[:, :16])


def test_decoder_output_bias_formula():
    dec = RgbdDecoder(16, 32, child_rng(1, "dec"))
    means = np.array([0.5, 0.4, 0.3, 0.8])
    dec.init_output_bias(means)
    f = 1e-3
    s = means.copy()
    s[3] = (means[3] - f) / (1.0 - f)
    logits = np.log(s / (1.0 - s))
    logits[3] /= 3.0
    assert np.allclose(dec._out_conv.b, logits.astype(np.float32), atol=0)
    with pytest.raises(ValidationError, match="4 channel means"):
        dec.init_output_bias(np.ones(3))
    with pytest.raises(ValidationError, match="squashed range"):
        dec.init_output_bias(np.array([0.5, 0.5, 0.5, 0.0]))


def test_encoder_checkpoint_roundtrip_preserves_frozen_flag(tmp_path):
    enc = RgbdEncoder(16, 32, child_rng(2, "enc"))
    x = np.random.default_rng(13).uniform(0, 1, (2, 16, 16, 4)).astype(np.float32)
    path = tmp_path / "enc.ckpt"
    enc.save(path, config_hash="h", history=[0.5])
    loaded, header = RgbdEncoder.load(path)
    assert loaded.frozen is False
    assert np.array_equal(enc.forward(x), loaded.forward(x))

    enc.freeze()
    enc.save(path, config_hash="h", history=[0.5])
    refrozen, header = RgbdEncoder.load(path)
    assert refrozen.frozen is True
    assert header["frozen"] is True


def test_decoder_checkpoint_roundtrip(tmp_path):
    dec = RgbdDecoder(16, 32, child_rng(3, "dec"))
    dec.voxel_norm.fit(np.random.default_rng(14).normal(2.0, 3.0, (20, 32)))
    r = np.random.default_rng(15).standard_normal((2, 32)).astype(np.float32)
    path = tmp_path / "dec.ckpt"
    dec.save(path, config_hash="h", history=[1.0, 0.5])
    loaded, header = RgbdDecoder.load(path)
    assert header["loss_history"] == [1.0, 0.5]
    # fitted standardizer buffers live in params() and survive the round-trip
    assert np.array_equal(dec.forward(r), loaded.forward(r))


def test_model_checkpoints_reject_wrong_kind(tmp_path):
    enc = RgbdEncoder(16, 32, child_rng(4, "enc"))
    path = tmp_path / "enc.ckpt"
    enc.save(path, config_hash="h", history=[])
    with pytest.raises(ValidationError, match="rpkm-decoder"):
        RgbdDecoder.load(path)


def test_paired_data_validation():
    with pytest.raises(ValidationError, match="rgbd"):
        PairedData(rgbd=np.zeros((2, 8, 8, 3)), fmri=np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        PairedData(rgbd=np.zeros((2, 8, 8, 4)), fmri=np.zeros((3, 4)))
    assert len(PairedData(rgbd=np.zeros((2, 8, 8, 4)), fmri=np.zeros((2, 4)))) == 2


# ---------------------------------------------------------------------------
# training stages on synthetic data


@pytest.fixture(scope="module")
def linmap_sets(tmp_path_factory):
    cfg = tiny_config(train_items=500, test_items=100)
    root = tmp_path_factory.mktemp("rpkm-data")
    generate_synthetic(cfg, cfg.seed, root)
    _, train = load_dataset(root, "train")
    _, test = load_dataset(root, "test")
    return cfg, train, test


def _pairs(split):
    return PairedData(rgbd=split.rgbd, fmri=split.fmri)


def test_train_stage1_recovers_linear_readout(linmap_sets):
    # voxels are a fixed linear map of the scene plus sigma = 0.01 noise, so
    # a trained encoder should correlate strongly with held-out responses
    cfg, train, test = linmap_sets
    enc, report = train_stage1(_pairs(train), cfg)
    assert report.final_loss < report.initial_loss
    pred = enc.forward(test.rgbd.astype(np.float32))
    corrs = [np.corrcoef(pred[i], test.fmri[i])[0, 1] for i in range(pred.shape[0])]
    assert float(np.mean(corrs)) > 0.8


def test_train_stage1_deterministic_and_zero_lr(linmap_sets):
    cfg, train, _ = linmap_sets
    small = cfg.replace(train_items=24, stage1_epochs=2)
    pairs = _pairs(train)
    sub = PairedData(rgbd=pairs.rgbd[:24], fmri=pairs.fmri[:24])
    _, r1 = train_stage1(sub, small)
    _, r2 = train_stage1(sub, small)
    assert r1.loss_history == r2.loss_history

    frozen_cfg = small.replace(stage1_learning_rate=0.0)
    enc, _ = train_stage1(sub, frozen_cfg)
    fresh = RgbdEncoder.build(frozen_cfg)
    for p, q in zip(enc.net.params(), fresh.net.params()):
        assert np.array_equal(p, q)


def test_train_stage1_rejects_empty():
    with pytest.raises(ValidationError, match="at least one"):
        train_stage1(PairedData(rgbd=np.zeros((0, 16, 16, 4)), fmri=np.zeros((0, 64))),
                     tiny_config())


def test_train_stage2_beats_mean_image_baseline(linmap_sets):
    cfg, train, test = linmap_sets
    cfg2 = cfg.replace(train_items=200, stage2_epochs=8)
    pairs = PairedData(rgbd=train.rgbd[:200], fmri=train.fmri[:200])
    enc = RgbdEncoder.build(cfg2)  # width check only; untrained is fine
    dec, report = train_stage2(pairs, enc, cfg2)
    assert report.final_loss < report.initial_loss
    assert report.stage == 2

    mean_rgbd = pairs.rgbd.mean(axis=0).astype(np.float64)
    recon = decode_batch(dec, test.fmri)
    model = np.mean([stage2_loss(test.rgbd[i].astype(np.float64), recon[i].astype(np.float64),
                                 cfg2.tv_weight) for i in range(len(test.ids))])
    baseline = np.mean([stage2_loss(test.rgbd[i].astype(np.float64), mean_rgbd,
                                    cfg2.tv_weight) for i in range(len(test.ids))])
    assert model < baseline


def test_train_stage2_fits_normalizer_and_bias(linmap_sets):
    cfg, train, _ = linmap_sets
    cfg2 = cfg.replace(train_items=32, stage2_epochs=1, stage2_learning_rate=0.0)
    pairs = PairedData(rgbd=train.rgbd[:32], fmri=train.fmri[:32])
    dec, _ = train_stage2(pairs, RgbdEncoder.build(cfg2), cfg2)
    assert np.allclose(dec.voxel_norm.mu, pairs.fmri.mean(axis=0), atol=1e-5)
    means = pairs.rgbd.mean(axis=(0, 1, 2)).astype(np.float64)
    f = 1e-3
    s = means.copy()
    s[3] = (means[3] - f) / (1.0 - f)
    logits = np.log(s / (1.0 - s))
    logits[3] /= 3.0
    assert np.allclose(dec._out_conv.b, logits.astype(np.float32), atol=1e-7)


def test_train_stage2_rejects_width_mismatch(linmap_sets):
    cfg, train, _ = linmap_sets
    pairs = PairedData(rgbd=train.rgbd[:8], fmri=train.fmri[:8])
    wrong = RgbdEncoder(cfg.image_size, cfg.voxel_dim + 8, child_rng(0, "w"))
    with pytest.raises(ValidationError, match="width"):
        train_stage2(pairs, wrong, cfg)


def test_train_stage3_requires_frozen_encoder(linmap_sets):
    cfg, train, _ = linmap_sets
    enc = RgbdEncoder.build(cfg)
    dec = RgbdDecoder.build(cfg)
    with pytest.raises(ValidationError, match="frozen"):
        train_stage3(train.rgbd[:8], enc, dec, cfg)


def test_train_stage3_leaves_encoder_bits_and_improves(linmap_sets):
    cfg, train, _ = linmap_sets
    cfg3 = cfg.replace(stage3_epochs=2)
    pairs = PairedData(rgbd=train.rgbd[:64], fmri=train.fmri[:64])
    enc, _ = train_stage1(pairs, cfg3)
    dec, _ = train_stage2(pairs, enc, cfg3)
    enc.freeze()
    before = [p.copy() for p in enc.net.params()]
    # same paired scenes, no fresh data: the cycle loss must still go down
    dec, report = train_stage3(pairs.rgbd, enc, dec, cfg3)
    assert report.final_loss < report.initial_loss
    assert report.stage == 3 and report.encoder_frozen is True
    for p, q in zip(enc.net.params(), before):
        assert np.array_equal(p, q)


def test_train_stage3_validates_scenes(linmap_sets):
    cfg, train, _ = linmap_sets
    enc = RgbdEncoder.build(cfg)
    enc.freeze()
    dec = RgbdDecoder.build(cfg)
    with pytest.raises(ValidationError, match="M, H, W, 4"):
        train_stage3(train.rgbd[0], enc, dec, cfg)
    with pytest.raises(ValidationError, match="at least one"):
        train_stage3(train.rgbd[:0], enc, dec, cfg)


def test_stage_report_serialization():
    report = StageReport(2, 3, 1.0, 0.5, False, (1.0, 0.7, 0.5))
    d = report.to_dict()
    assert d["stage"] == 2 and d["loss_history"] == [1.0, 0.7, 0.5]


# ---------------------------------------------------------------------------
# inference


def test_decode_rgbd_contract(linmap_sets):
    cfg, train, _ = linmap_sets
    dec = RgbdDecoder.build(cfg)
    dec.voxel_norm.fit(train.fmri)
    img = decode_rgbd(dec, np.asarray(train.fmri[0], dtype=np.float64))
    assert isinstance(img, RgbdImage)
    assert img.size == (cfg.image_size, cfg.image_size)

    sample = FmriSample(subject_id="synthetic", stimulus_id=train.ids[0],
                        voxels=np.asarray(train.fmri[0], dtype=np.float64))
    img2 = decode_rgbd(dec, sample)
    assert np.array_equal(img.as_array(), img2.as_array())

    with pytest.raises(ValidationError, match="width"):
        decode_rgbd(dec, np.zeros(cfg.voxel_dim + 1))
    with pytest.raises(ValidationError, match="flat voxel vector"):
        decode_rgbd(dec, train.fmri[:2])


def test_decode_batch_matches_single(linmap_sets):
    cfg, train, _ = linmap_sets
    dec = RgbdDecoder.build(cfg)
    dec.voxel_norm.fit(train.fmri)
    batch = decode_batch(dec, train.fmri[:3])
    for i in range(3):
        single = decode_rgbd(dec, np.asarray(train.fmri[i], dtype=np.float64))
        assert np.allclose(batch[i], single.as_array(), atol=1e-6)
