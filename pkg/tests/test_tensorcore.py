"""Kernel-level checks: closed forms, permutation properties, finite differences."""

import numpy as np
import pytest

from pvtraj import tensorcore as tc


def rng_for(name):
    return np.random.default_rng(abs(hash(name)) % (2 ** 31))


# ---------------------------------------------------------------------------
# linear


def test_linear_zero_weights_annihilate():
    x = tc.variable(np.random.default_rng(0).standard_normal((4, 3)))
    w = tc.variable(np.zeros((3, 5)))
    b = tc.variable(np.zeros(5))
    y = tc.linear(x, w, b)
    assert np.all(y.value == 0.0)


def test_linear_identity():
    rng = rng_for("lin-id")
    xv = rng.standard_normal((6, 4))
    y = tc.linear(tc.variable(xv), tc.variable(np.eye(4)), tc.variable(np.zeros(4)))
    np.testing.assert_array_equal(y.value, xv)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(tc.ShapeError) as exc:
        tc.linear(tc.variable(np.zeros((2, 3))), tc.variable(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_linear_finite_difference():
    rng = rng_for("lin-fd")
    err = tc.finite_diff_check(
        tc.linear,
        [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)],
    )
    assert err < 1e-6


# ---------------------------------------------------------------------------
# elementwise


def test_relu_definition():
    y = tc.relu(tc.variable([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y.value, [0.0, 0.0, 2.0])


def test_tanh_odd():
    assert tc.tanh(tc.variable([0.0])).value[0] == 0.0


@pytest.mark.parametrize("kernel", [tc.relu, tc.tanh, tc.sigmoid, tc.exp])
def test_elementwise_finite_difference(kernel):
    rng = rng_for(f"elem-{kernel.__name__}")
    for trial in range(100):
        x = rng.standard_normal(7)
        x = x + np.sign(x) * 1e-3  # keep relu probes away from the kink
        err = tc.finite_diff_check(kernel, [x], seed=trial)
        assert err < 1e-6, f"{kernel.__name__} trial {trial}: {err}"


def test_relu_gradient_zero_at_zero():
    x = tc.variable(np.zeros(3))
    y = tc.relu(x)
    tc.backward(tc.weighted_total(y, np.ones(3)))
    np.testing.assert_array_equal(x.grad, np.zeros(3))


# ---------------------------------------------------------------------------
# set max pool


def test_set_max_pool_single_row():
    x = tc.variable([[1.0, -2.0, 3.0], [9.0, 9.0, 9.0]])
    y = tc.set_max_pool(x, [True, False])
    np.testing.assert_array_equal(y.value, [1.0, -2.0, 3.0])


def test_set_max_pool_definition():
    y = tc.set_max_pool(tc.variable([[1.0, 5.0], [3.0, 2.0]]), [True, True])
    np.testing.assert_array_equal(y.value, [3.0, 5.0])


def test_set_max_pool_all_masked_errors():
    with pytest.raises(tc.EmptySetError):
        tc.set_max_pool(tc.variable(np.ones((2, 2))), [False, False])


def test_set_max_pool_permutation_invariant_and_gradient():
    rng = rng_for("pool-perm")
    for trial in range(20):
        x = rng.standard_normal((5, 4))
        perm = rng.permutation(5)
        a = tc.set_max_pool(tc.variable(x), np.ones(5, bool))
        b = tc.set_max_pool(tc.variable(x[perm]), np.ones(5, bool))
        np.testing.assert_array_equal(a.value, b.value)
        err = tc.finite_diff_check(
            lambda n: tc.set_max_pool(n, np.ones(5, bool)), [x], seed=trial)
        assert err < 1e-5


def test_set_max_pool_tie_routes_to_lowest_row():
    x = tc.variable([[1.0, 2.0], [1.0, 2.0]])
    y = tc.set_max_pool(x, [True, True])
    tc.backward(tc.weighted_total(y, np.ones(2)))
    np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0]])


# ---------------------------------------------------------------------------
# lstm cell


def _lstm_params(d_in, d_h, rng=None):
    if rng is None:
        return (np.zeros((d_in, 4 * d_h)), np.zeros((d_h, 4 * d_h)), np.zeros(4 * d_h))
    return (rng.standard_normal((d_in, 4 * d_h)) * 0.4,
            rng.standard_normal((d_h, 4 * d_h)) * 0.4,
            rng.standard_normal(4 * d_h) * 0.4)


def test_lstm_cell_zero_params_closed_form():
    rng = rng_for("lstm-zero")
    c0 = rng.standard_normal((3, 4))
    wx, wh, b = _lstm_params(2, 4)
    h2, c2 = tc.lstm_cell(tc.variable(rng.standard_normal((3, 2))),
                          tc.variable(rng.standard_normal((3, 4))),
                          tc.variable(c0),
                          tc.variable(wx), tc.variable(wh), tc.variable(b))
    np.testing.assert_allclose(c2.value, c0 / 2.0, rtol=1e-15)
    np.testing.assert_allclose(h2.value, np.tanh(c0 / 2.0) / 2.0, rtol=1e-15)


def test_lstm_cell_zero_everything_fixed_point():
    wx, wh, b = _lstm_params(2, 3)
    h2, c2 = tc.lstm_cell(tc.variable(np.zeros(2)), tc.variable(np.zeros(3)),
                          tc.variable(np.zeros(3)),
                          tc.variable(wx), tc.variable(wh), tc.variable(b))
    np.testing.assert_array_equal(h2.value, np.zeros(3))


def test_lstm_cell_finite_difference_all_inputs():
    rng = rng_for("lstm-fd")
    for trial in range(5):
        x = rng.standard_normal((2, 3))
        h = rng.standard_normal((2, 4))
        c = rng.standard_normal((2, 4))
        wx, wh, b = _lstm_params(3, 4, rng)
        err = tc.finite_diff_check(tc.lstm_cell, [x, h, c, wx, wh, b], seed=trial)
        assert err < 1e-5, f"trial {trial}: {err}"


# ---------------------------------------------------------------------------
# temporal conv


def test_temporal_conv_identity_k1():
    rng = rng_for("conv-id")
    x = rng.standard_normal((3, 6))
    y = tc.temporal_conv(tc.variable(x), tc.variable(np.eye(3)[:, :, None]))
    np.testing.assert_allclose(y.value, x, rtol=1e-15)


def test_temporal_conv_padding_arithmetic():
    c = 1.7
    x = tc.variable(np.full((1, 5), c))
    y = tc.temporal_conv(x, tc.variable(np.ones((1, 1, 3))))
    np.testing.assert_allclose(y.value[0], [2 * c, 3 * c, 3 * c, 3 * c, 2 * c], rtol=1e-15)


def test_temporal_conv_even_kernel_rejected():
    with pytest.raises(ValueError):
        tc.temporal_conv(tc.variable(np.zeros((2, 4))), tc.variable(np.zeros((2, 2, 4))))


def test_temporal_conv_finite_difference():
    rng = rng_for("conv-fd")
    for trial, (ci, co, t, k) in enumerate([(2, 3, 5, 3), (4, 2, 7, 5), (1, 1, 3, 1)]):
        x = rng.standard_normal((ci, t))
        kern = rng.standard_normal((co, ci, k))
        bias = rng.standard_normal(co)
        err = tc.finite_diff_check(tc.temporal_conv, [x, kern, bias], seed=trial)
        assert err < 1e-5


def test_temporal_conv_batched_matches_loop():
    rng = rng_for("conv-batch")
    x = rng.standard_normal((4, 3, 8))
    kern = rng.standard_normal((5, 3, 3))
    y = tc.temporal_conv(tc.variable(x), tc.variable(kern))
    for i in range(4):
        yi = tc.temporal_conv(tc.variable(x[i]), tc.variable(kern))
        np.testing.assert_array_equal(y.value[i], yi.value)


# ---------------------------------------------------------------------------
# concat / weighted_sum / softmax


def test_weighted_sum_one_hot_selects_row():
    rng = rng_for("wsum")
    v = rng.standard_normal((4, 3))
    w = np.zeros(4)
    w[2] = 1.0
    y = tc.weighted_sum(tc.variable(v), tc.variable(w))
    np.testing.assert_allclose(y.value, v[2], rtol=1e-15)


def test_softmax_constant_uniform():
    y = tc.softmax(tc.variable(np.full(5, 3.3)))
    np.testing.assert_allclose(y.value, np.full(5, 0.2), rtol=1e-15)


def test_softmax_masked_rows():
    y = tc.softmax(tc.variable(np.zeros((2, 3))), mask=[[True, True, False], [False] * 3])
    np.testing.assert_allclose(y.value[0], [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(y.value[1], np.zeros(3))


@pytest.mark.parametrize("case", ["concat", "weighted_sum", "softmax"])
def test_aggregation_finite_difference(case):
    rng = rng_for(f"agg-{case}")
    for trial in range(10):
        if case == "concat":
            fn = lambda a, b: tc.concat([a, b], axis=1)
            args = [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]
        elif case == "weighted_sum":
            fn = tc.weighted_sum
            args = [rng.standard_normal((4, 3)), rng.standard_normal(4)]
        else:
            fn = tc.softmax
            args = [rng.standard_normal(5)]
        err = tc.finite_diff_check(fn, args, seed=trial)
        assert err < 1e-5


def test_grouped_weighted_sum_matches_loop():
    rng = rng_for("gwsum")
    w = rng.standard_normal((4, 2, 3))
    v = rng.standard_normal((4, 3, 5))
    y = tc.grouped_weighted_sum(tc.variable(w), tc.variable(v))
    for t in range(4):
        np.testing.assert_allclose(y.value[t], w[t] @ v[t], rtol=1e-12)
    err = tc.finite_diff_check(tc.grouped_weighted_sum, [w, v])
    assert err < 1e-5


def test_pair_product_finite_difference():
    rng = rng_for("pairprod")
    a = rng.standard_normal((3, 2, 4))
    m = rng.standard_normal((2, 4))
    err = tc.finite_diff_check(tc.pair_product, [a, m])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# gaussian head and NLL


def test_gaussian_head_ranges():
    rng = rng_for("head")
    raw = rng.standard_normal((6, 5)) * 3
    y = tc.gaussian_head(tc.variable(raw))
    assert np.all(y.value[:, 2:4] > 0)
    assert np.all(np.abs(y.value[:, 4]) < 1)
    np.testing.assert_array_equal(y.value[:, :2], raw[:, :2])


def test_gaussian_head_finite_difference():
    rng = rng_for("head-fd")
    for trial in range(20):
        err = tc.finite_diff_check(tc.gaussian_head, [rng.standard_normal((2, 3, 5))], seed=trial)
        assert err < 1e-5


def _random_valid_params(rng, shape):
    p = rng.standard_normal(shape + (5,))
    p[..., 2:4] = np.exp(p[..., 2:4] * 0.3)       # sigma > 0
    p[..., 4] = np.tanh(p[..., 4] * 0.5)          # |rho| < 1
    return p


def test_bivariate_nll_closed_form_at_mean():
    params = np.array([[0.7, -0.3, 1.0, 1.0, 0.0]])
    target = np.array([[0.7, -0.3]])
    y = tc.bivariate_nll(tc.variable(params), target)
    assert y.value == pytest.approx(np.log(2 * np.pi), abs=1e-14)


def test_bivariate_nll_monotone_toward_truth():
    target = np.array([[1.0, 2.0]])
    near = np.array([[1.1, 2.1, 0.7, 0.7, 0.2]])
    far = np.array([[2.0, 3.0, 0.7, 0.7, 0.2]])
    n_near = tc.bivariate_nll(tc.variable(near), target).value
    n_far = tc.bivariate_nll(tc.variable(far), target).value
    assert n_near < n_far


def test_bivariate_nll_matches_scipy_density():
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = rng_for("nll-scipy")
    for _ in range(1000):
        p = _random_valid_params(rng, ())
        t = rng.standard_normal(2)
        mu = p[:2]
        sx, sy, rho = p[2], p[3], p[4]
        cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
        ref = -scipy_stats.multivariate_normal(mean=mu, cov=cov).logpdf(t)
        got = tc.bivariate_nll(tc.variable(p[None]), t[None]).value
        assert abs(got - ref) < 1e-10


def test_bivariate_nll_finite_difference():
    rng = rng_for("nll-fd")
    for trial in range(20):
        p = _random_valid_params(rng, (3, 2))
        t = rng.standard_normal((3, 2, 2))
        mask = rng.random((3, 2)) < 0.8
        if not mask.any():
            mask[0, 0] = True
        err = tc.finite_diff_check(
            lambda n: tc.bivariate_nll(n, t, mask), [p], seed=trial)
        assert err < 1e-5, f"trial {trial}: {err}"


def test_bivariate_nll_masked_mean():
    rng = rng_for("nll-mask")
    p = _random_valid_params(rng, (4,))
    t = rng.standard_normal((4, 2))
    mask = np.array([True, False, True, False])
    full = [tc.bivariate_nll(tc.variable(p[i:i + 1]), t[i:i + 1]).value for i in range(4)]
    got = tc.bivariate_nll(tc.variable(p), t, mask).value
    assert got == pytest.approx((full[0] + full[2]) / 2, rel=1e-12)


# ---------------------------------------------------------------------------
# harness self-tests


def test_finite_diff_detects_planted_fault():
    def corrupted(x):
        y = np.tanh(x.value)

        def bwd(g):
            tc._acc(x, g * (1.0 - y * y) * 1.01)

        return tc.Node(y, (x,), bwd)

    err = tc.finite_diff_check(corrupted, [np.array([0.3, -0.8])])
    assert 3e-3 < err < 3e-2


def test_backward_accumulates_across_calls():
    w = tc.Parameter("w", np.array([2.0]))
    for _ in range(2):
        y = tc.mul(w, w)
        tc.backward(y, seed=0.5)
    np.testing.assert_allclose(w.grad, [4.0])  # two half-weighted dy/dw = 4 each


def test_checkpoint_roundtrip(tmp_path):
    rng = rng_for("ckpt")
    arrays = {"a.w": rng.standard_normal((3, 4)), "b.b": rng.standard_normal(5),
              "c.s": np.array(2.5)}
    tc.save_checkpoint(arrays, tmp_path / "model", cfg_hash="deadbeef")
    loaded, h = tc.load_checkpoint(tmp_path / "model")
    assert h == "deadbeef"
    assert set(loaded) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
