import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevpr.bev import VolumeSpec, build_vanilla_bev
from bevpr.deform import (
    BevQueryGrid,
    DeformableWeights,
    build_deformable_bev,
    decode_weights,
    deformable_attend,
    degenerate_weights,
    encode_weights,
    load_weights,
    random_weights,
    save_weights,
)
from bevpr.errors import ConfigurationError, DataError
from bevpr.geometry import FeatureMap, bilinear_sample, surround_rig

SPEC = VolumeSpec(-6.0, 6.0, -6.0, 6.0, 0.5, (0.0, 1.0, 2.0))


def two_key_weights():
    return DeformableWeights(
        value_weights=np.ones((1, 1, 1)),
        output_weights=np.ones((1, 1, 1)),
        attn_weight=np.zeros((2, 1)),
        attn_bias=np.log([0.3, 0.7]),
        offset_weight=np.zeros((4, 1)),
        offset_bias=np.array([-1.0, 0.0, 1.0, 0.0]),
    )


def test_hand_two_key_mix():
    f = FeatureMap(np.array([[10.0, 15.0, 20.0]]))
    out = deformable_attend([0.0], (1.0, 0.0), f, two_key_weights())
    assert out.shape == (1,)
    assert out[0] == pytest.approx(0.3 * 10 + 0.7 * 20, abs=1e-5)


def test_degenerate_equals_bilinear():
    rng = np.random.default_rng(0)
    f = FeatureMap(rng.normal(size=(6, 8, 3)))
    w = degenerate_weights(3)
    for u, v in rng.uniform([0, 0], [7, 5], size=(25, 2)):
        np.testing.assert_allclose(deformable_attend(np.zeros(3), (u, v), f, w), bilinear_sample(f, u, v),
                                   atol=1e-12)


def test_constant_map_gives_wo_wv_c():
    rng = np.random.default_rng(4)
    w = random_weights(4, c_in=3, n_head=2, n_key=3, c_v=5, c_out=2)
    c = np.array([0.5, -1.0, 2.0])
    f = FeatureMap(np.broadcast_to(c, (7, 9, 3)).copy())
    expect = sum(w.output_weights[h] @ w.value_weights[h] @ c for h in range(2))
    for _ in range(5):
        out = deformable_attend(rng.normal(size=3), rng.uniform([0, 0], [8, 6]), f, w)
        np.testing.assert_allclose(out, expect, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_attention_rows_are_distributions(seed):
    w = random_weights(seed, c_in=4, n_head=3, n_key=5)
    q = np.random.default_rng(seed).normal(size=(10, 4)) * 5
    A = w.attention(q)
    assert A.shape == (10, 3, 5)
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-12)


def test_offsets_are_clamped():
    w = random_weights(1, c_in=2, n_head=2, n_key=2, rho_max=3.0, offset_scale=50.0)
    off = w.offsets(np.random.default_rng(0).normal(size=(20, 2)))
    assert np.linalg.norm(off, axis=-1).max() <= 3.0 + 1e-9
    small = random_weights(1, c_in=2, rho_max=1e6, offset_scale=0.01)
    q = np.ones((1, 2))
    raw = (q @ small.offset_weight.T + small.offset_bias).reshape(small.offsets(q).shape)
    np.testing.assert_allclose(small.offsets(q), raw)


def test_reference_point_must_be_inside():
    f = FeatureMap(np.zeros((3, 3, 1)))
    with pytest.raises(ValueError):
        deformable_attend([0.0], (3.5, 0.0), f, degenerate_weights(1))
    with pytest.raises(ConfigurationError):
        deformable_attend([0.0], (0.0, 0.0), FeatureMap(np.zeros((3, 3, 2))), degenerate_weights(1))


def _rig_and_feats(C, seed):
    rig = surround_rig(n_views=4, width=48, height=32, focal=20.0, pitch_deg=20.0)
    rng = np.random.default_rng(seed)
    return rig, [FeatureMap(rng.normal(size=(16, 24, C)), 0.5) for _ in rig.views]


def test_degenerate_bev_reduces_to_vanilla():
    rig, feats = _rig_and_feats(3, 0)
    w = degenerate_weights(3, SPEC.shape)
    grid = BevQueryGrid(SPEC, w.queries)
    per_h = build_deformable_bev(rig, feats, grid, w, per_height=True)
    van = build_vanilla_bev(rig, feats, SPEC)
    np.testing.assert_allclose(per_h.data, van.data, atol=1e-6)
    np.testing.assert_array_equal(per_h.coverage, van.coverage)
    summed = build_deformable_bev(rig, feats, grid, w)
    np.testing.assert_allclose(summed.data, van.data.sum(axis=2), atol=1e-6)


def test_deformable_bev_is_deterministic_and_shaped():
    rig, feats = _rig_and_feats(3, 1)
    w = random_weights(7, c_in=3, c_out=2, grid_shape=SPEC.shape)
    grid = BevQueryGrid(SPEC, w.queries)
    a = build_deformable_bev(rig, feats, grid, w)
    b = build_deformable_bev(rig, feats, grid, random_weights(7, c_in=3, c_out=2, grid_shape=SPEC.shape))
    assert a.data.shape == SPEC.shape + (2,)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.data[a.coverage.sum(axis=2) == 0], 0.0)


def test_deformable_bev_channel_checks():
    rig, feats = _rig_and_feats(3, 1)
    w = random_weights(0, c_in=2, grid_shape=SPEC.shape)
    with pytest.raises(ConfigurationError):
        build_deformable_bev(rig, feats, BevQueryGrid(SPEC, w.queries), w)
    with pytest.raises(ConfigurationError):
        BevQueryGrid(SPEC, np.zeros((3, 3, 2)))


def test_weight_file_round_trip(tmp_path):
    w = random_weights(3, c_in=3, n_head=2, n_key=4, c_v=5, c_out=2, grid_shape=(4, 5), rho_max=6.5)
    p = tmp_path / "w.bevw"
    save_weights(p, w)
    back = load_weights(p)
    for name in ("value_weights", "output_weights", "attn_weight", "attn_bias", "offset_weight",
                 "offset_bias", "queries"):
        np.testing.assert_array_equal(getattr(back, name), getattr(w, name))
    assert back.rho_max == w.rho_max
    assert encode_weights(back) == p.read_bytes()
    nq = random_weights(3, c_in=2)
    assert decode_weights(encode_weights(nq)).queries is None


def test_weight_file_errors():
    buf = encode_weights(random_weights(0, c_in=2))
    with pytest.raises(DataError):
        decode_weights(b"XXXX" + buf[4:])
    with pytest.raises(DataError):
        decode_weights(buf[:-4])
    with pytest.raises(DataError):
        decode_weights(buf + b"\0\0\0\0")
    bad = bytearray(buf)
    bad[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(DataError):
        decode_weights(bytes(bad))


def test_weight_shape_validation():
    with pytest.raises(ConfigurationError):
        DeformableWeights(np.ones((1, 1, 1)), np.ones((2, 1, 1)), np.zeros((1, 1)), np.zeros(1),
                          np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ConfigurationError):
        DeformableWeights(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1)), np.zeros(1),
                          np.zeros((2, 1)), np.zeros(2), rho_max=0.0)
