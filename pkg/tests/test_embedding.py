import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panoptiq import diffmath as dm
from panoptiq.embedding import (EmbedConfig, embed_scene, fuse_features, init_embed_params, positional_coordinates,
                                positional_embed, scale_coordinates)
from panoptiq.pointcloud import SceneSpec, generate_scene
from panoptiq.voxelizer import VoxelConfig, cart_to_cyl, voxelize

D = 5


def identity_params(dim=D):
    eye = np.zeros((3, dim))
    eye[:3, :3] = np.eye(3)
    p = {}
    for b in ("cart", "polar"):
        p[f"embed.{b}.w"] = eye.copy()
        p[f"embed.{b}.b"] = np.zeros(dim)
        p[f"embed.{b}.gamma"] = np.ones(dim)
        p[f"embed.{b}.beta"] = np.zeros(dim)
    return p


def embed(params, cart, cyl, mode, normalize=True, prescale=True, vcfg=VoxelConfig(), lift=False):
    tape = dm.Tape()
    P = {k: tape.param(k, v) for k, v in params.items()}
    out = positional_embed(tape, P, np.atleast_2d(cart), np.atleast_2d(cyl), vcfg,
                           EmbedConfig(mode=mode, normalize=normalize, prescale=prescale, theta_lift=lift))
    return None if out is None else out.value


def test_identity_weight_hand_values():
    cart = np.array([3.0, 4.0, 1.0])
    cyl = np.array(cart_to_cyl(3.0, 4.0, 1.0))
    p = identity_params()
    cpe = embed(p, cart, cyl, "cartesian", normalize=False, prescale=False)
    ppe = embed(p, cart, cyl, "polar", normalize=False, prescale=False)
    mpe = embed(p, cart, cyl, "mixed", normalize=False, prescale=False)
    np.testing.assert_allclose(cpe[0], [3, 4, 1, 0, 0])
    np.testing.assert_allclose(ppe[0], [5, 0.9272952180016122, 1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(mpe[0], [8, 4.9272952180016122, 2, 0, 0], atol=1e-15)


@pytest.mark.parametrize("mode", ["cartesian", "polar", "mixed"])
def test_zero_weights_give_zero_embedding(mode):
    p = {k: np.zeros_like(v) for k, v in identity_params().items()}
    out = embed(p, [[1.0, 2.0, 0.0]], [cart_to_cyl(1.0, 2.0, 0.0)], mode, normalize=False)
    assert np.all(out == 0)


def test_cartesian_equals_mixed_with_zero_polar():
    rng = np.random.default_rng(0)
    p = init_embed_params(D, EmbedConfig(), rng)
    scene = voxelize(generate_scene(SceneSpec(seed=1)))
    cart, cyl = positional_coordinates(scene)
    zero_polar = dict(p)
    for k in ("w", "b", "beta"):
        zero_polar[f"embed.polar.{k}"] = np.zeros_like(p[f"embed.polar.{k}"])
    a = embed(zero_polar, cart, cyl, "mixed", normalize=False)
    b = embed(p, cart, cyl, "cartesian", normalize=False)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.booleans())
def test_mixed_is_exact_sum(seed, normalize):
    rng = np.random.default_rng(seed)
    p = init_embed_params(D, EmbedConfig(), rng)
    for k in p:
        p[k] = p[k] + rng.normal(0, 0.3, p[k].shape)
    cart = np.stack([rng.uniform(-30, 30, 6), rng.uniform(-30, 30, 6), rng.uniform(-4, 2, 6)], axis=1)
    cyl = np.stack(cart_to_cyl(cart[:, 0], cart[:, 1], cart[:, 2]), axis=1)
    m = embed(p, cart, cyl, "mixed", normalize)
    c = embed(p, cart, cyl, "cartesian", normalize)
    q = embed(p, cart, cyl, "polar", normalize)
    assert np.array_equal(m, c + q)


def test_none_mode_returns_nothing():
    assert embed(identity_params(), [[1.0, 0, 0]], [[1.0, 0, 0]], "none") is None


def test_permutation_equivariance_and_identical_rows():
    rng = np.random.default_rng(2)
    p = init_embed_params(D, EmbedConfig(), rng)
    cart = np.array([[1.0, 2.0, 0.0], [5.0, -3.0, 1.0], [1.0, 2.0, 0.0]])
    cyl = np.stack(cart_to_cyl(cart[:, 0], cart[:, 1], cart[:, 2]), axis=1)
    out = embed(p, cart, cyl, "mixed")
    np.testing.assert_array_equal(out[0], out[2])
    perm = [2, 0, 1]
    np.testing.assert_array_equal(embed(p, cart[perm], cyl[perm], "mixed"), out[perm])


def test_prescaling_maps_ranges_to_unit_interval():
    vcfg = VoxelConfig()
    cart = np.array([[50.0, 0.0, -4.0], [0.0, -50.0, 2.0]])
    cyl = np.array([[50.0, math.pi, -4.0], [0.0, -math.pi, 2.0]])
    c, q = scale_coordinates(cart, cyl, vcfg, EmbedConfig())
    np.testing.assert_allclose(c, [[1, 0, -1], [0, -1, 1]])
    np.testing.assert_allclose(q, [[1, 1, -1], [-1, -1, 1]])


def test_out_of_range_coordinates_rejected():
    with pytest.raises(ValueError):
        scale_coordinates(np.array([[0.0, 0.0, 0.0]]), np.array([[60.0, 0.0, 0.0]]), VoxelConfig(), EmbedConfig())


def test_scene_embedding_clamps_far_points():
    from panoptiq.pointcloud import PointCloud

    c = PointCloud([[70.0, 0.0, 5.0, 0.3]], [2], [0])
    scene = voxelize(c)
    tape = dm.Tape()
    p = init_embed_params(D, EmbedConfig(), np.random.default_rng(0))
    out = embed_scene(tape, {k: tape.param(k, v) for k, v in p.items()}, scene, EmbedConfig())
    assert out.shape == (1, D) and np.all(np.isfinite(out.value))


def test_theta_lift_width():
    p = init_embed_params(D, EmbedConfig(theta_lift=True), np.random.default_rng(0))
    assert p["embed.polar.w"].shape == (4, D)
    out = embed(p, [[1.0, 1.0, 0.0]], [cart_to_cyl(1.0, 1.0, 0.0)], "polar", lift=True)
    assert out.shape == (1, D)


def test_branch_weight_gradients():
    rng = np.random.default_rng(4)
    cart = np.stack([rng.uniform(-30, 30, 4), rng.uniform(-30, 30, 4), rng.uniform(-4, 2, 4)], axis=1)
    cyl = np.stack(cart_to_cyl(cart[:, 0], cart[:, 1], cart[:, 2]), axis=1)
    w = rng.normal(size=(4, D))
    p = init_embed_params(D, EmbedConfig(), rng)

    def graph(v):
        out = positional_embed(v["embed.cart.w"].tape, v, cart, cyl, VoxelConfig(), EmbedConfig())
        return dm.sum(out * v["w"].tape.const(w))

    assert dm.grad_check(graph, {**p, "w": w}) < 1e-6


def test_fuse_features():
    rng = np.random.default_rng(3)
    F, E = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    tape = dm.Tape()
    f, e, z = tape.input("F", F), tape.input("E", E), tape.input("Z", np.zeros((4, 3)))
    np.testing.assert_array_equal(fuse_features(f, e).value, F + E)
    np.testing.assert_array_equal(fuse_features(z, e).value, E)
    np.testing.assert_array_equal(fuse_features(f, None).value, F)
    with pytest.raises(dm.ShapeError):
        fuse_features(f, tape.input("bad", np.zeros((4, 2))))


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        EmbedConfig(mode="spherical")
