import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import natgrad as ng
from natgrad.checks import OUTPUT_MODELS, fd_gradient, fd_output_jvp, random_tiny_net
from natgrad.core import DimensionError, make_rng
from natgrad.model import Batch, Layer, Mlp, forward, init_mlp, load_mlp, save_mlp


def perturbed_tiny_net(seed, kind="sigmoid_bernoulli", n=6):
    return random_tiny_net(make_rng(seed, 900), kind, n=n)


class TestInit:
    def test_deterministic_in_seed(self):
        a = init_mlp([2, 3, 2], ["tanh", "sigmoid"], seed=7)
        b = init_mlp([2, 3, 2], ["tanh", "sigmoid"], seed=7)
        assert np.array_equal(a.flatten(), b.flatten())

    def test_param_count(self):
        m = init_mlp([2, 3, 2], ["tanh", "sigmoid"], seed=7)
        assert m.param_count == 2 * 3 + 3 + 3 * 2 + 2 == 17

    def test_biases_zero(self):
        m = init_mlp([4, 5, 3], ["sigmoid", "softmax"], seed=1)
        for layer in m.layers:
            assert np.all(layer.bias == 0.0)

    def test_weight_range(self):
        m = init_mlp([4, 5], ["sigmoid"], seed=3)
        s = np.sqrt(6.0 / (4 + 5))
        assert np.all(np.abs(m.layers[0].weight) <= s)

    def test_dims_acts_mismatch(self):
        with pytest.raises(DimensionError):
            init_mlp([2, 3, 2], ["tanh"], seed=0)

    def test_softmax_only_final(self):
        with pytest.raises(ValueError):
            init_mlp([2, 3, 2], ["softmax", "sigmoid"], seed=0)


class TestForward:
    def test_zero_weights_sigmoid_gives_half(self):
        m = init_mlp([3, 4], ["sigmoid"], seed=0)
        m = m.with_params(np.zeros(m.param_count))
        y = forward(m, make_rng(0).standard_normal((5, 3))).outputs
        assert np.allclose(y, 0.5)

    def test_zero_weights_softmax_uniform(self):
        m = init_mlp([3, 4], ["softmax"], seed=0)
        m = m.with_params(np.zeros(m.param_count))
        y = forward(m, make_rng(0).standard_normal((5, 3))).outputs
        assert np.allclose(y, 0.25)

    def test_one_layer_linear_hand_case(self):
        m = Mlp([Layer(np.array([[2.0]]), np.array([1.0]), "linear")])
        y = forward(m, np.array([[3.0]])).outputs
        assert y[0, 0] == 7.0

    def test_bad_input_width(self):
        m = init_mlp([3, 2], ["linear"], seed=0)
        with pytest.raises(DimensionError):
            forward(m, np.zeros((4, 5)))

    def test_softmax_rows_normalized(self):
        for c in range(10):
            m, x, _, _ = perturbed_tiny_net(c, "softmax_multinomial")
            y = forward(m, x).outputs
            assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
            assert np.all((y > 0.0) & (y < 1.0))


def nll_oracle(m, batch, om):
    """Direct density evaluation, independent of the loss implementation."""
    y = forward(m, batch.inputs).outputs
    t = batch.targets
    n = batch.size
    if om.kind == "linear_gaussian":
        return float(np.sum((t - y) ** 2) / (2 * om.noise_std**2 * n))
    if om.kind == "sigmoid_bernoulli":
        p = np.prod(y**t * (1 - y) ** (1 - t), axis=1)
        return float(-np.mean(np.log(p)))
    p = np.prod(y**t, axis=1)
    return float(-np.mean(np.log(p)))


class TestLoss:
    def test_perfect_linear_prediction_zero(self):
        m, x, _, om = perturbed_tiny_net(0, "linear_gaussian")
        y = forward(m, x).outputs
        assert ng.loss(m, Batch(x, y), om) == 0.0

    def test_sigmoid_at_half_is_log2_per_output(self):
        o = 3
        m = init_mlp([2, o], ["sigmoid"], seed=0)
        m = m.with_params(np.zeros(m.param_count))
        t = (make_rng(1).random((6, o)) < 0.5).astype(float)
        assert ng.loss(m, Batch(np.zeros((6, 2)), t), ng.sigmoid_bernoulli()) == pytest.approx(
            o * np.log(2.0), rel=1e-12
        )

    @pytest.mark.parametrize("kind", sorted(OUTPUT_MODELS))
    def test_matches_direct_density_oracle(self, kind):
        m, _, batch, om = perturbed_tiny_net(3, kind)
        assert ng.loss(m, batch, om) == pytest.approx(nll_oracle(m, batch, om), rel=1e-12)

    def test_missing_targets(self):
        m, x, _, om = perturbed_tiny_net(0, "linear_gaussian")
        with pytest.raises(ValueError):
            ng.loss(m, Batch(x), om)

    def test_output_model_mismatch(self):
        m, x, batch, _ = perturbed_tiny_net(0, "linear_gaussian")
        with pytest.raises(ValueError):
            ng.loss(m, batch, ng.softmax_multinomial())


class TestGradient:
    def test_perfect_linear_prediction_zero_gradient(self):
        m, x, _, om = perturbed_tiny_net(1, "linear_gaussian")
        y = forward(m, x).outputs
        g = ng.gradient(m, Batch(x, y), om)
        assert np.all(g == 0.0)

    @pytest.mark.parametrize("kind", sorted(OUTPUT_MODELS))
    def test_matches_finite_differences(self, kind):
        rng = make_rng(11, 0)
        for _ in range(7):
            m, _, batch, om = random_tiny_net(rng, kind, n=5)
            err = np.max(np.abs(ng.gradient(m, batch, om) - fd_gradient(m, batch, om)))
            assert err <= 1e-6

    def test_doubling_residual_doubles_gradient(self):
        m, x, _, om = perturbed_tiny_net(2, "linear_gaussian")
        y = forward(m, x).outputs
        t = y + make_rng(4).standard_normal(y.shape)
        g1 = ng.gradient(m, Batch(x, t), om)
        g2 = ng.gradient(m, Batch(x, y + 2 * (t - y)), om)
        assert np.allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)

    def test_deterministic(self):
        m, _, batch, om = perturbed_tiny_net(5, "softmax_multinomial")
        assert np.array_equal(ng.gradient(m, batch, om), ng.gradient(m, batch, om))


class TestRop:
    def test_zero_tangent(self):
        m, x, _, _ = perturbed_tiny_net(0)
        assert np.all(ng.rop_output(m, x, np.zeros(m.param_count)) == 0.0)

    def test_matches_finite_differences(self):
        rng = make_rng(12, 0)
        for kind in sorted(OUTPUT_MODELS):
            m, x, _, _ = random_tiny_net(rng, kind, n=5)
            v = rng.standard_normal(m.param_count)
            err = np.max(np.abs(ng.rop_output(m, x, v) - fd_output_jvp(m, x, v)))
            assert err <= 1e-6

    def test_linearity_in_tangent(self):
        m, x, _, _ = perturbed_tiny_net(6)
        v = make_rng(13).standard_normal(m.param_count)
        assert np.allclose(
            ng.rop_output(m, x, 3.5 * v), 3.5 * ng.rop_output(m, x, v), rtol=1e-12
        )


class TestLop:
    def test_zero_adjoint(self):
        m, x, _, _ = perturbed_tiny_net(0)
        u = np.zeros_like(forward(m, x).outputs)
        assert np.all(ng.lop_output(m, x, u) == 0.0)

    def test_adjoint_identity(self):
        rng = make_rng(14, 0)
        for c in range(50):
            kind = sorted(OUTPUT_MODELS)[c % 3]
            m, x, _, _ = random_tiny_net(rng, kind, n=4)
            v = rng.standard_normal(m.param_count)
            u = rng.standard_normal(forward(m, x).outputs.shape)
            lhs = ng.dot(ng.lop_output(m, x, u), v)
            rhs = float(np.sum(u * ng.rop_output(m, x, v)))
            assert abs(lhs - rhs) <= 1e-10 * (1 + abs(rhs))

    def test_single_example_linear_net_by_hand(self):
        w = np.array([[2.0, -1.0], [0.5, 3.0]])
        m = Mlp([Layer(w, np.zeros(2), "linear")])
        x = np.array([[1.0, 2.0]])
        u = np.array([[3.0, -2.0]])
        # J w.r.t. weights is u_i * x_j; w.r.t. biases is u_i
        got = ng.lop_output(m, x, u)
        want = np.array([3.0, 6.0, -2.0, -4.0, 3.0, -2.0])
        assert np.allclose(got, want)


class TestPreactivationOps:
    def test_linear_output_matches_output_ops(self):
        m, x, _, _ = perturbed_tiny_net(7, "linear_gaussian")
        v = make_rng(15).standard_normal(m.param_count)
        u = make_rng(16).standard_normal(forward(m, x).outputs.shape)
        assert np.array_equal(ng.rop_preactivation(m, x, v), ng.rop_output(m, x, v))
        assert np.array_equal(ng.lop_preactivation(m, x, u), ng.lop_output(m, x, u))

    def test_adjoint_identity(self):
        rng = make_rng(17, 0)
        for _ in range(20):
            m, x, _, _ = random_tiny_net(rng, "softmax_multinomial", n=4)
            v = rng.standard_normal(m.param_count)
            u = rng.standard_normal(forward(m, x).outputs.shape)
            lhs = ng.dot(ng.lop_preactivation(m, x, u), v)
            rhs = float(np.sum(u * ng.rop_preactivation(m, x, v)))
            assert abs(lhs - rhs) <= 1e-10 * (1 + abs(rhs))

    def test_zero_tangent(self):
        m, x, _, _ = perturbed_tiny_net(8)
        assert np.all(ng.rop_preactivation(m, x, np.zeros(m.param_count)) == 0.0)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        m, _, _, _ = perturbed_tiny_net(9, "softmax_multinomial")
        path = tmp_path / "model.ngmlp"
        save_mlp(m, path)
        again = load_mlp(path)
        assert again.dims == m.dims
        assert again.acts == m.acts
        assert np.array_equal(again.flatten(), m.flatten())

    def test_header(self, tmp_path):
        m = init_mlp([2, 2], ["linear"], seed=0)
        path = tmp_path / "model.ngmlp"
        save_mlp(m, path)
        lines = path.read_text().split("\n")
        assert lines[0] == "NGMLP 1"
        assert lines[1] == "2 2"
        assert lines[2] == "linear"

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(ValueError):
            load_mlp(path)


@given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(0, 10))
@settings(max_examples=40, deadline=None)
def test_flatten_unflatten_roundtrip(dims, seed):
    acts = ["tanh"] * (len(dims) - 1)
    m = init_mlp(dims, acts, seed)
    theta = m.flatten() + 0.1
    again = m.with_params(theta)
    assert np.array_equal(again.flatten(), theta)


def test_layer_dims_must_chain():
    with pytest.raises(DimensionError):
        Mlp(
            [
                Layer(np.zeros((3, 2)), np.zeros(3), "tanh"),
                Layer(np.zeros((2, 4)), np.zeros(2), "linear"),
            ]
        )
