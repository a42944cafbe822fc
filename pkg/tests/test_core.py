"""Contracts in dream.core: RNG streams, hashing, data types, RunConfig."""

import numpy as np
import pytest

from dream.core import (
    DepthMap,
    FmriSample,
    RgbdImage,
    RunConfig,
    SemanticEmbedding,
    SpatialPalette,
    ValidationError,
    child_rng,
    require,
    seeded_rng,
    stable_hash,
)


# ---------------------------------------------------------------------------
# randomness


def test_seeded_rng_is_deterministic():
    a = seeded_rng(7).standard_normal(16)
    b = seeded_rng(7).standard_normal(16)
    assert np.array_equal(a, b)


def test_seeded_rng_differs_across_seeds():
    a = seeded_rng(7).standard_normal(16)
    b = seeded_rng(8).standard_normal(16)
    assert not np.array_equal(a, b)


def test_seeded_rng_rejects_bad_seeds():
    with pytest.raises(ValidationError):
        seeded_rng(-1)
    with pytest.raises(ValidationError):
        seeded_rng("42")


def test_child_rng_same_label_same_stream():
    a = child_rng(3, "encoder-init").standard_normal(32)
    b = child_rng(3, "encoder-init").standard_normal(32)
    assert np.array_equal(a, b)


def test_child_rng_labels_are_independent():
    a = child_rng(3, "encoder-init").standard_normal(32)
    b = child_rng(3, "data-shuffle").standard_normal(32)
    c = child_rng(4, "encoder-init").standard_normal(32)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_rng_draws_do_not_shift_other_labels():
    # consuming extra draws from one labelled stream must not move another
    r1 = child_rng(3, "a")
    r1.standard_normal(1000)
    fresh = child_rng(3, "b").standard_normal(8)
    assert np.array_equal(fresh, child_rng(3, "b").standard_normal(8))


def test_stable_hash_ignores_key_order_and_sees_values():
    h1 = stable_hash({"a": 1, "b": 2})
    h2 = stable_hash({"b": 2, "a": 1})
    h3 = stable_hash({"a": 1, "b": 3})
    assert h1 == h2
    assert h1 != h3
    assert len(h1) == 64 and all(c in "0123456789abcdef" for c in h1)


def test_require_raises_validation_error():
    require(True, "fine")
    with pytest.raises(ValidationError, match="boom"):
        require(False, "boom")


# ---------------------------------------------------------------------------
# data contracts


def test_fmri_sample_roundtrip_fields():
    s = FmriSample(subject_id="sub01", stimulus_id="stim1",
                   voxels=np.ones(12), trial_count=3)
    assert s.voxel_dim == 12
    assert s.trial_count == 3


@pytest.mark.parametrize("kw", [
    dict(subject_id="", stimulus_id="s", voxels=np.ones(4)),
    dict(subject_id="a", stimulus_id="", voxels=np.ones(4)),
    dict(subject_id="a", stimulus_id="s", voxels=np.ones((2, 2))),
    dict(subject_id="a", stimulus_id="s", voxels=np.array([1.0, np.nan])),
    dict(subject_id="a", stimulus_id="s", voxels=np.ones(4), trial_count=0),
    dict(subject_id="a", stimulus_id="s", voxels=np.zeros(0)),
])
def test_fmri_sample_rejects_bad_inputs(kw):
    with pytest.raises(ValidationError):
        FmriSample(**kw)


def test_depth_map_contract():
    d = DepthMap(values=np.full((8, 8), 0.5))
    assert d.size == (8, 8)
    with pytest.raises(ValidationError):
        DepthMap(values=np.full((7, 8), 0.5))      # below minimum size
    with pytest.raises(ValidationError):
        DepthMap(values=np.zeros((8, 8)))          # depth must be > 0
    with pytest.raises(ValidationError):
        DepthMap(values=np.full((8, 8), 1.5))      # above 1


def test_rgbd_image_contract_and_stacking():
    rgb = np.random.default_rng(0).uniform(0, 1, (8, 10, 3))
    depth = np.random.default_rng(1).uniform(0.1, 1.0, (8, 10))
    img = RgbdImage(rgb=rgb, depth=depth)
    assert img.size == (8, 10)
    arr = img.as_array()
    assert arr.shape == (8, 10, 4)
    back = RgbdImage.from_array(arr)
    assert np.array_equal(back.rgb, rgb)
    assert np.array_equal(back.depth, depth)
    assert back.depth_map().size == (8, 10)


def test_rgbd_image_rejects_mismatched_depth():
    rgb = np.full((8, 8, 3), 0.5)
    with pytest.raises(ValidationError):
        RgbdImage(rgb=rgb, depth=np.full((8, 9), 0.5))
    with pytest.raises(ValidationError):
        RgbdImage(rgb=rgb * 3.0, depth=np.full((8, 8), 0.5))  # rgb out of range


def test_semantic_embedding_requires_unit_rows():
    t = np.eye(3, 5)
    e = SemanticEmbedding(tokens=t)
    assert e.shape == (3, 5)
    with pytest.raises(ValidationError):
        SemanticEmbedding(tokens=2.0 * t)


def test_semantic_embedding_tolerates_float32_roundtrip():
    rng = np.random.default_rng(5)
    t = rng.standard_normal((4, 16))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    # a float32 file or wire hop perturbs norms by ~1e-7, well inside the tolerance
    SemanticEmbedding(tokens=t.astype(np.float32).astype(np.float64))


def test_spatial_palette_enforces_cell_constancy():
    img = np.zeros((8, 8, 3))
    img[:4, :4] = 0.3
    img[:4, 4:] = 0.6
    img[4:, :4] = 0.9
    p = SpatialPalette(image=img, block=4)
    assert p.size == (8, 8)
    img2 = img.copy()
    img2[0, 0, 0] = 0.31
    with pytest.raises(ValidationError, match="not constant"):
        SpatialPalette(image=img2, block=4)


def test_spatial_palette_truncated_edge_cells():
    # block 4 on a 10x10 image: edge cells are 4x2 / 2x4 / 2x2; constancy is
    # checked on the actual extents
    img = np.zeros((10, 10, 3))
    for i in range(0, 10, 4):
        for j in range(0, 10, 4):
            img[i:i + 4, j:j + 4] = (i + j) / 20.0
    SpatialPalette(image=img, block=4)


# ---------------------------------------------------------------------------
# run configuration


def test_runconfig_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.alpha == 0.3
    assert cfg.tau == 0.07
    assert cfg.seed == 42


def test_runconfig_roundtrip_and_hash():
    cfg = RunConfig(alpha=0.5, image_size=32, voxel_dim=128, seed=9)
    clone = RunConfig.from_dict(cfg.to_dict())
    assert clone == cfg
    assert clone.hash() == cfg.hash()
    assert clone.hash() != RunConfig().hash()


def test_runconfig_rejects_unknown_keys():
    payload = RunConfig().to_dict()
    payload["learning_rat"] = 0.1
    with pytest.raises(ValidationError, match="learning_rat"):
        RunConfig.from_dict(payload)


def test_runconfig_zero_learning_rate_is_legal():
    cfg = RunConfig(learning_rate=0.0, stage1_learning_rate=0.0,
                    stage2_learning_rate=0.0, stage3_learning_rate=0.0)
    assert cfg.learning_rate == 0.0


@pytest.mark.parametrize("kw", [
    dict(alpha=-0.1),
    dict(beta=1.5),
    dict(tau=0.0),
    dict(tv_weight=-1.0),
    dict(omega_c=-0.5),
    dict(image_size=7),
    dict(image_size=0),
    dict(epochs=0),
    dict(learning_rate=-0.01),
    dict(num_shapes=4),
    dict(num_colors=9),
    dict(num_shapes=3, num_colors=8, embed_dim=16),  # 24 classes > 16 dims
    dict(seed=-1),
    dict(batch_size="32"),
])
def test_runconfig_rejects_bad_values(kw):
    with pytest.raises(ValidationError):
        RunConfig(**kw)


def test_runconfig_replace_revalidates():
    cfg = RunConfig()
    assert cfg.replace(alpha=0.0).alpha == 0.0
    with pytest.raises(ValidationError):
        cfg.replace(tau=-1.0)
