import numpy as np
import pytest

from polysnap import autodiff as ad
from polysnap import features
from polysnap.autodiff import Tensor
from polysnap.features import FeatureConfig
from polysnap.model import Model, ModelConfig
from polysnap.deformer import DeformerConfig


SMALL = FeatureConfig(crop_size=64, stem_width=8, stage_widths=(8, 12, 16),
                      fpn_width=8, lateral_width=4)


def small_model(seed=0, dtype=np.float32, **kwargs):
    cfg = ModelConfig(features=SMALL,
                      deformer=DeformerConfig(layers=2, d_model=16, d_k=16, ffn_width=24))
    return Model.init(cfg, seed=seed, dtype=dtype, **kwargs)


def test_pyramid_strides():
    m = small_model()
    crop = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 64, 64)).astype(np.float32))
    pyr = features.encode(m.params, SMALL, crop)
    assert [lvl.shape for lvl in pyr] == [(8, 16, 16), (8, 8, 8), (8, 4, 4)]


def test_zero_init_output_layers_give_zero_pyramid():
    m = small_model(zero_feature_output=True)
    crop = Tensor(np.zeros((3, 64, 64), dtype=np.float32))
    pyr = features.encode(m.params, SMALL, crop)
    for lvl in pyr:
        np.testing.assert_array_equal(lvl.data, np.zeros_like(lvl.data))


def test_parameter_count_matches_formula():
    rng = np.random.default_rng(1)
    params = features.init_feature_params(SMALL, rng)
    assert sum(p.data.size for p in params.values()) == features.feature_param_count(SMALL)


def test_wrong_crop_shape_raises():
    m = small_model()
    with pytest.raises(ad.ShapeError):
        features.encode(m.params, SMALL, Tensor(np.zeros((3, 32, 32), np.float32)))


def test_fused_channels_and_size():
    m = small_model()
    crop = Tensor(np.random.default_rng(2).uniform(0, 1, (3, 64, 64)).astype(np.float32))
    fmap = features.fuse(m.params, SMALL, features.encode(m.params, SMALL, crop))
    assert fmap.shape == (3 * 4 + 2, 64, 64)
    assert SMALL.fused_channels == 14


def test_fuse_output_size_independent_of_depth():
    cfg2 = FeatureConfig(crop_size=64, stem_width=8, stage_widths=(8, 12),
                         fpn_width=8, lateral_width=4)
    rng = np.random.default_rng(3)
    params = features.init_feature_params(cfg2, rng)
    crop = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    fmap = features.fuse(params, cfg2, features.encode(params, cfg2, crop))
    assert fmap.shape == (2 * 4 + 2, 64, 64)


def test_coordconv_ramp_endpoints():
    ch = features.coord_channels(64, 64)
    # top-left pixel center maps to (-1 + 1/W, -1 + 1/H)
    assert ch[0, 0, 0] == pytest.approx(-1 + 1 / 64)
    assert ch[1, 0, 0] == pytest.approx(-1 + 1 / 64)
    assert ch[0, 0, -1] == pytest.approx(1 - 1 / 64)
    assert ch[1, -1, 0] == pytest.approx(1 - 1 / 64)
    # parameter-free and input-independent by construction
    assert features.coord_channels(64, 64) is ch


def test_constant_pyramid_gives_constant_fused_features():
    m = small_model()
    levels = [Tensor(np.full((8, 16, 16), 0.7, np.float32)),
              Tensor(np.full((8, 8, 8), 0.7, np.float32)),
              Tensor(np.full((8, 4, 4), 0.7, np.float32))]
    fmap = features.fuse(m.params, SMALL, levels).data
    for c in range(12):  # feature channels are spatially constant
        assert np.ptp(fmap[c]) < 1e-5
    assert np.ptp(fmap[12]) > 1.5  # coordinate ramps are not


def test_vertex_sample_at_pixel_center_and_midpoint():
    rng = np.random.default_rng(4)
    fmap = Tensor(rng.normal(size=(5, 8, 8)).astype(np.float64))
    at_center = features.sample_vertex_embeddings(fmap, Tensor(np.array([[2.5, 3.5]])))
    np.testing.assert_array_equal(at_center.data[0], fmap.data[:, 3, 2])
    mid = features.sample_vertex_embeddings(fmap, Tensor(np.array([[3.0, 3.5]])))
    np.testing.assert_allclose(mid.data[0], 0.5 * (fmap.data[:, 3, 2] + fmap.data[:, 3, 3]),
                               rtol=1e-12)


def test_coordconv_columns_recover_vertex_coordinates():
    m = small_model()
    rng = np.random.default_rng(5)
    crop = Tensor(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    fmap = features.fuse(m.params, SMALL, features.encode(m.params, SMALL, crop))
    verts = rng.uniform(4, 60, size=(12, 2))
    emb = features.sample_vertex_embeddings(fmap, Tensor(verts.astype(np.float32))).data
    np.testing.assert_allclose(emb[:, -2], 2 * verts[:, 0] / 64 - 1, atol=1e-5)
    np.testing.assert_allclose(emb[:, -1], 2 * verts[:, 1] / 64 - 1, atol=1e-5)


def test_gradients_reach_crop_pixels_and_vertex_coordinates():
    m = small_model(seed=7)
    rng = np.random.default_rng(6)
    crop = ad.parameter(rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
    verts = ad.parameter(rng.uniform(8, 56, size=(6, 2)).astype(np.float32))
    fmap = features.fuse(m.params, SMALL, features.encode(m.params, SMALL, crop))
    emb = features.sample_vertex_embeddings(fmap, verts)
    loss = ad.tsum(ad.mul(emb, emb))
    ad.backward(loss, params=[crop, verts])
    assert np.abs(crop.grad).max() > 0
    assert np.abs(verts.grad).max() > 0
