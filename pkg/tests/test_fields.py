import numpy as np
import pytest

from hyperreg import fields
from oracles import euler_integrate

INTERIOR = (slice(8, -8), slice(8, -8))  # 8 px margin keeps border effects out


def smooth_field(seed, shape=(64, 64), max_norm=2.0):
    return fields.random_smooth_svf(shape, np.random.default_rng(seed), max_norm=max_norm)


# ---------------------------------------------------------------------------
# integrate_svf


def test_zero_velocity_integrates_to_exact_identity():
    u = fields.integrate_svf(np.zeros((32, 32, 2)))
    assert np.all(u == 0.0)


def test_constant_velocity_is_translation_on_interior():
    v = np.zeros((64, 64, 2))
    v[..., 0] = 1.0
    u = fields.integrate_svf(v, steps=5)
    np.testing.assert_allclose(u[INTERIOR][..., 0], 1.0, atol=1e-3)
    np.testing.assert_allclose(u[INTERIOR][..., 1], 0.0, atol=1e-3)


def test_scaling_and_squaring_matches_dense_euler():
    v = smooth_field(3)
    u_ss = fields.integrate_svf(v, steps=5)
    u_euler = euler_integrate(v, 1024)
    err = np.abs(u_ss - u_euler)[INTERIOR].max()
    assert err < 0.05


def test_error_vs_euler_decreases_with_steps():
    v = smooth_field(4)
    u_euler = euler_integrate(v, 1024)
    errs = [np.abs(fields.integrate_svf(v, steps=k) - u_euler)[INTERIOR].max()
            for k in range(1, 8)]
    assert all(a > b for a, b in zip(errs, errs[1:])), errs


def test_inverse_consistency():
    v = smooth_field(5)
    fwd = fields.integrate_svf(v)
    bwd = fields.integrate_svf(-v)
    round_trip = fields.compose(fwd, bwd)
    assert np.abs(round_trip)[INTERIOR].max() < 0.1


def test_rejects_non_finite_velocity():
    v = np.zeros((16, 16, 2))
    v[3, 3, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        fields.integrate_svf(v)


def test_integrated_fields_stay_diffeomorphic():
    for seed in range(20):
        u = fields.integrate_svf(smooth_field(seed))
        assert fields.jacobian_det(u).min() > 0.0


# ---------------------------------------------------------------------------
# compose


def test_compose_identity_identity():
    ident = np.zeros((32, 32, 2))
    np.testing.assert_array_equal(fields.compose(ident, ident), ident)


def test_compose_of_translations_adds_on_interior():
    a = np.zeros((64, 64, 2))
    a[..., 0] = 1.0
    b = np.zeros((64, 64, 2))
    b[..., 1] = 1.0
    comp = fields.compose(a, b)
    np.testing.assert_allclose(comp[INTERIOR][..., 0], 1.0, atol=1e-9)
    np.testing.assert_allclose(comp[INTERIOR][..., 1], 1.0, atol=1e-9)


def test_compose_with_identity_is_exact():
    u = smooth_field(6)
    ident = np.zeros_like(u)
    np.testing.assert_array_equal(fields.compose(u, ident), u)


def test_compose_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        fields.compose(np.zeros((8, 8, 2)), np.zeros((16, 16, 2)))


# ---------------------------------------------------------------------------
# warp


def test_warp_identity_bit_exact():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32))
    out = fields.warp(img, np.zeros((32, 32, 2)))
    assert np.array_equal(out, img)


def test_warp_integer_translation_shifts_indices():
    rng = np.random.default_rng(1)
    img = rng.random((64, 64))
    u = np.zeros((64, 64, 2))
    u[..., 0] = 2.0  # sample two rows down: out[i, j] = img[i + 2, j]
    out = fields.warp(img, u)
    np.testing.assert_allclose(out[INTERIOR], img[10:-6, 8:-8], atol=1e-12)


def test_warp_constant_image_is_constant():
    u = smooth_field(7, shape=(32, 32))
    out = fields.warp(np.full((32, 32), 0.7), u)
    np.testing.assert_allclose(out, 0.7, atol=1e-12)


def test_warp_is_linear_in_image():
    rng = np.random.default_rng(2)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    u = smooth_field(8, shape=(32, 32))
    lhs = fields.warp(3.0 * a - 2.0 * b, u)
    rhs = 3.0 * fields.warp(a, u) - 2.0 * fields.warp(b, u)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_warp_values_stay_in_input_range():
    rng = np.random.default_rng(3)
    img = rng.random((32, 32))
    out = fields.warp(img, smooth_field(9, shape=(32, 32)))
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


# ---------------------------------------------------------------------------
# label warps


def test_warp_labels_identity_unchanged():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 5, (32, 32))
    oh = fields.one_hot(labels, 5)
    out = fields.warp_labels(oh, np.zeros((32, 32, 2)))
    np.testing.assert_array_equal(out, oh)
    np.testing.assert_array_equal(fields.warp_labels_nearest(labels, np.zeros((32, 32, 2))), labels)


def test_warp_labels_translation_shifts():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, (64, 64))
    u = np.zeros((64, 64, 2))
    u[..., 1] = 3.0
    hard = fields.warp_labels_nearest(labels, u)
    np.testing.assert_array_equal(hard[:, 8:-8][INTERIOR[0]], labels[8:-8, 11:-5])


def test_soft_label_sums_stay_convex():
    rng = np.random.default_rng(6)
    oh = fields.one_hot(rng.integers(0, 6, (32, 32)), 6)
    out = fields.warp_labels(oh, smooth_field(10, shape=(32, 32)))
    sums = out.sum(axis=-1)
    assert out.min() >= -1e-12 and out.max() <= 1.0 + 1e-6
    assert sums.max() <= 1.0 + 1e-6


# ---------------------------------------------------------------------------
# jacobian


def test_jacobian_identity():
    u = np.zeros((32, 32, 2))
    det = fields.jacobian_det(u)
    np.testing.assert_allclose(det, 1.0, atol=1e-12)
    assert fields.jacobian_sd(u) == 0.0


def test_jacobian_uniform_scaling():
    grid = fields.identity_grid(32, 32)
    u = 0.1 * grid  # phi(p) = 1.1 p
    det = fields.jacobian_det(u)
    np.testing.assert_allclose(det, 1.21, atol=1e-9)
    assert fields.jacobian_sd(u) < 1e-9


# ---------------------------------------------------------------------------
# node builders agree with the array path


def test_graph_integration_matches_array_path():
    from hyperreg.diffcore import GraphBuilder

    v = smooth_field(11)
    b = GraphBuilder(dtype=np.float64)
    vn = b.input("v", v.shape)
    un = fields.integrate_svf_node(b, vn, steps=5)
    b.output("u", un)
    b.output("warped", fields.warp_node(b, b.const(np.random.default_rng(0).random((64, 64, 1))), un))
    run = b.build().run({"v": v})
    np.testing.assert_allclose(run.value("u"), fields.integrate_svf(v, 5), atol=1e-12)
