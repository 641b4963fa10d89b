import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndgraph import diffcore as dc
from ndgraph import gradcheck as gc


def scalar(x):
    return dc.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestAnalyticValues:
    def test_sigmoid_at_zero(self):
        x = scalar([0.0])
        y = dc.reduce_sum(dc.sigmoid(x))
        dc.backward(y)
        assert float(y.data) == pytest.approx(0.5)
        assert float(x.grad[0]) == pytest.approx(0.25)

    def test_softmax_rows_sum_to_one(self, rng):
        a = dc.Tensor(rng.standard_normal((6, 9)) * 5)
        s = dc.softmax_rows(a)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)

    def test_sum_gradient_is_ones(self, rng):
        p = scalar(rng.standard_normal((3, 4)))
        dc.backward(dc.reduce_sum(p))
        np.testing.assert_array_equal(p.grad, np.ones((3, 4)))

    def test_half_sum_of_squares_gradient_is_input(self, rng):
        v = rng.standard_normal(11)
        p = scalar(v)
        dc.backward(dc.reduce_sum(dc.square(p)) * 0.5)
        np.testing.assert_allclose(p.grad, v, rtol=1e-12)

    def test_softplus_of_zero_is_log_two(self):
        x = scalar([0.0])
        assert float(dc.softplus(x).data[0]) == pytest.approx(np.log(2.0))

    def test_abs_and_relu_subgradient_zero_at_kink(self):
        x = scalar([0.0])
        dc.backward(dc.reduce_sum(dc.absval(x)))
        assert x.grad[0] == 0.0
        dc.backward(dc.reduce_sum(dc.max0(x)))
        assert x.grad[0] == 0.0


class TestGraphMechanics:
    def test_backward_requires_scalar(self, rng):
        p = scalar(rng.standard_normal(3))
        with pytest.raises(dc.ShapeError):
            dc.backward(dc.square(p))

    def test_backward_rerun_is_bitwise_identical(self, rng):
        p = scalar(rng.standard_normal((4, 4)))
        q = scalar(rng.standard_normal((4, 4)))
        loss = dc.reduce_sum(dc.square(p @ q) * dc.sigmoid(p))
        dc.backward(loss)
        g1p, g1q = p.grad.copy(), q.grad.copy()
        dc.backward(loss)
        np.testing.assert_array_equal(p.grad, g1p)
        np.testing.assert_array_equal(q.grad, g1q)

    def test_diamond_reuse_accumulates(self):
        p = scalar([3.0])
        y = p * p  # dy/dp = 2p via two paths
        dc.backward(dc.reduce_sum(y))
        assert float(p.grad[0]) == pytest.approx(6.0)

    def test_gradients_map_covers_requested_leaves(self, rng):
        used = scalar(rng.standard_normal(3))
        unused = scalar(rng.standard_normal(2))
        grads = dc.gradients(dc.reduce_sum(used), {"u": used, "n": unused})
        assert set(grads) == {"u", "n"}
        np.testing.assert_array_equal(grads["n"], np.zeros(2))

    def test_value_graph_rerun(self, rng):
        p = scalar(rng.standard_normal(5))
        graph = dc.ValueGraph(dc.reduce_sum(dc.square(p)), {"p": p})
        g1 = graph.backward()["p"].copy()
        g2 = graph.backward()["p"]
        np.testing.assert_array_equal(g1, g2)

    def test_shape_mismatch_names_primitive(self):
        a = dc.Tensor(np.zeros((2, 3)))
        b = dc.Tensor(np.zeros((3, 4, 5)))
        with pytest.raises(dc.ShapeError, match="matmul"):
            dc.matmul(a, b)
        with pytest.raises(dc.ShapeError, match="conv3d"):
            dc.conv3d(dc.Tensor(np.zeros((1, 2, 4, 4, 4))),
                      dc.Tensor(np.zeros((1, 3, 3, 3, 3))))


class TestFiniteDifferences:
    """Each primitive against the central-difference oracle, several seeds."""

    @pytest.mark.parametrize("name,fn", gc.PRIMITIVE_CHECKS, ids=[n for n, _ in gc.PRIMITIVE_CHECKS])
    def test_primitive_matches_fd(self, name, fn):
        worst = max(fn(seed) for seed in range(5))
        assert worst < 1e-4, f"{name}: max relative error {worst:.3e}"

    def test_conv3d_5cube_below_1e4(self):
        # 5^3 input with stride/padding drawn per seed.
        worst = max(gc.check_conv3d(s) for s in range(10))
        assert worst < 1e-4


class TestAdam:
    def test_zero_gradient_is_identity(self, rng):
        p = {"w": scalar(rng.standard_normal(4))}
        before = p["w"].data.copy()
        state = dc.AdamState(lr=0.1)
        for _ in range(5):
            dc.adam_step(p, {"w": np.zeros(4)}, state)
        np.testing.assert_array_equal(p["w"].data, before)
        assert state.t == 5

    def test_first_step_magnitude_near_lr(self, rng):
        g = rng.uniform(0.5, 2.0, 6) * rng.choice([-1.0, 1.0], 6)
        p = {"w": scalar(np.zeros(6))}
        state = dc.AdamState(lr=0.05)
        dc.adam_step(p, {"w": g}, state)
        # Bias-corrected first step is lr * g / (|g| + eps) elementwise.
        np.testing.assert_allclose(np.abs(p["w"].data), 0.05, rtol=1e-6)

    def test_quadratic_bowl_converges(self):
        p = {"x": scalar([1.0])}
        state = dc.AdamState(lr=0.1)
        for _ in range(500):
            dc.adam_step(p, {"x": 2.0 * p["x"].data}, state)
        assert abs(float(p["x"].data[0])) < 1e-3

    def test_nonfinite_gradient_names_parameter(self):
        p = {"bad": scalar([1.0])}
        state = dc.AdamState(lr=0.1)
        with pytest.raises(dc.NonFiniteError, match="bad"):
            dc.adam_step(p, {"bad": np.array([np.nan])}, state)

    def test_moment_invariants(self, rng):
        p = {"w": scalar(rng.standard_normal(3))}
        state = dc.AdamState(lr=0.01)
        for i in range(10):
            dc.adam_step(p, {"w": rng.standard_normal(3)}, state)
            assert state.t == i + 1
            assert np.all(state.v["w"] >= 0)

    def test_clip_gradient_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, norm = dc.clip_gradient_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(sum(float(np.sum(g ** 2)) for g in clipped.values()))
        assert total == pytest.approx(1.0)
        grads = {"a": np.array([0.3])}
        same, norm = dc.clip_gradient_norm(grads, 1.0)
        assert norm == pytest.approx(0.3)
        np.testing.assert_array_equal(same["a"], [0.3])


class TestPrecisionModes:
    def test_set_precision_controls_new_tensors(self):
        dc.set_precision(32)
        try:
            assert dc.Tensor([1, 2]).data.dtype == np.float32
        finally:
            dc.set_precision(64)
        assert dc.Tensor([1, 2]).data.dtype == np.float64

    def test_rejects_other_precisions(self):
        with pytest.raises(ValueError):
            dc.set_precision(16)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_property_softmax_rows_normalized(seed):
    rng = np.random.default_rng(seed)
    a = dc.Tensor(rng.standard_normal((3, 5)) * rng.uniform(0.1, 20))
    rows = dc.softmax_rows(a).data
    assert np.all(rows >= 0) and np.all(rows <= 1)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_property_unbroadcast_matches_fd(seed):
    # Broadcast add of (3,1) with (1,4), reduced; checks gradient shape logic.
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 1))
    b = rng.standard_normal((1, 4))
    err = gc.check_gradient(
        lambda t: dc.reduce_sum(dc.square(t["a"] + t["b"])), {"a": a, "b": b})
    assert err < 1e-6
