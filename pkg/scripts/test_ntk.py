import numpy as np
import pytest

from scripts.errors import BudgetError, ConfigError
from scripts.ntk import (
    MLP,
    check_proxy_trace_correlation,
    check_sensitivity_bound,
    check_supernet_decomposition,
    check_width_scaling,
    ntk_matrix,
    sample_jacobian,
    trace_correlation,
)
from scripts.scoring import proxy_score
from scripts.spaces import CellSpace, SequentialSpace, Supernet
from scripts.tensor import Tensor


def _linear(d):
    net = MLP.initialize([d, 1], seed=0, activation="linear")
    return net


def _batch(space, n=6, seed=0):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(space.input_shape(n)))
    return x, rng.integers(0, space.num_classes, size=n)


class TestNtkMatrix:
    def test_linear_model_identity_rows(self):
        report = ntk_matrix(_linear(4), Tensor(np.eye(4)))
        np.testing.assert_allclose(report.theta, np.eye(4), atol=1e-15)
        assert report.trace_norm == pytest.approx(1.0)
        assert report.output == "sum_of_logits"

    def test_linear_model_ones(self):
        report = ntk_matrix(_linear(5), Tensor(np.ones((1, 5))))
        np.testing.assert_allclose(report.theta, [[5.0]])
        assert report.trace_norm == pytest.approx(np.sqrt(5.0))

    def test_block_additivity_and_psd(self):
        net = MLP.initialize([4, 6, 3], seed=1)
        x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
        report = ntk_matrix(net, x)
        assert report.residuals["block_additivity"] < 1e-10
        assert report.residuals["asymmetry"] < 1e-12
        assert report.residuals["min_eigenvalue_ratio"] >= -1e-10
        assert set(report.per_block) == {"layer0", "layer1"}

        parts = [ntk_matrix(net, x, key).theta for key in ("layer0", "layer1")]
        np.testing.assert_allclose(report.theta, parts[0] + parts[1], rtol=0, atol=1e-10)

    def test_jacobian_block_shapes(self):
        net = MLP.initialize([4, 6, 3], seed=1)
        x = Tensor(np.ones((2, 4)))
        blocks = sample_jacobian(net, x, net.weight_blocks())
        assert blocks["layer0"].shape == (2, 24)
        assert blocks["layer1"].shape == (2, 18)

    def test_supernet_op_subset(self):
        space = SequentialSpace()
        net = Supernet.initialize(space, seed=0)
        x, _ = _batch(space)
        by_tuple = ntk_matrix(net, x, (1, 2))
        by_key = ntk_matrix(net, x, "layer1:linear_relu@2")
        np.testing.assert_array_equal(by_tuple.theta, by_key.theta)
        with pytest.raises(ConfigError):
            ntk_matrix(net, x, "layer7:linear_relu@0")

    def test_budget(self):
        net = MLP.initialize([4, 6, 3], seed=1)
        with pytest.raises(BudgetError):
            ntk_matrix(net, Tensor(np.ones((3, 4))), memory_budget=10)

    def test_large_matrix_elided(self):
        report = ntk_matrix(_linear(3), Tensor(np.ones((70, 3))))
        assert report.to_json()["theta"] is None
        assert len(report.to_json(elide_above=100)["theta"]) == 70


class TestWidthScaling:
    def test_full_width_ratio_is_one(self):
        result = check_width_scaling(16, 1.0, seeds=3, input_dim=4, n_samples=4)
        assert result.ratios == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)

    def test_fractional_width_rounds_to_nearest_unit(self):
        result = check_width_scaling(16, 0.3, seeds=2, input_dim=4, n_samples=4)
        assert result.kept == 5
        assert result.effective_rho == pytest.approx(5 / 16)
        assert result.expected == pytest.approx(np.sqrt(5 / 16))
        assert result.to_json()["effective_rho"] == pytest.approx(0.3125)

    @pytest.mark.parametrize("rho", [0.0, 1.5, 0.01])
    def test_out_of_range_rho_rejected(self, rho):
        with pytest.raises(ConfigError):
            check_width_scaling(16, rho)

    def test_narrower_is_smaller(self):
        result = check_width_scaling(64, 0.25, seeds=3, input_dim=4, n_samples=4)
        assert all(r < 1.0 for r in result.ratios)

    @pytest.mark.slow
    @pytest.mark.parametrize("rho, low, high", [(0.25, 0.45, 0.55), (0.64, 0.72, 0.88)])
    def test_square_root_law(self, rho, low, high):
        result = check_width_scaling(1024, rho, depth=2, seeds=10)
        assert low <= result.mean <= high
        assert result.within(0.1)
        assert result.expected == pytest.approx(np.sqrt(rho), rel=1e-3)


class TestSensitivityBound:
    def test_single_layer_hand_constants(self):
        space = SequentialSpace(depth=1, branches=2, widths=(3, 2))
        net = Supernet.initialize(space, seed=3)
        x, y = _batch(space, n=4, seed=1)
        report = check_sensitivity_bound(net, (x, y), variant="vanilla")

        # 1. logits are the layer output, so df/dh is the identity
        assert report.layer_b[0] == pytest.approx(1.0)

        # 2. beta is the largest per-sample softmax residual
        z = net.forward(x).data
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        assert report.beta == pytest.approx(np.linalg.norm(p - np.eye(2)[y], axis=1).max(), rel=1e-12)

        # 3. kernel of relu(x W_k) against W_k: ||x_i||^2 per active unit
        for bound in report.ops:
            w = net.weights[net.block_key(bound.edge, bound.op)].data
            active = (x.data @ w > 0).sum(axis=1)
            expected = np.sqrt(((x.data ** 2).sum(axis=1) * active).sum() / 4)
            assert bound.kernel_trace_norm == pytest.approx(expected, rel=1e-10)
            assert not bound.violated
        assert not report.violations

    @pytest.mark.parametrize("variant", ["vanilla", "label_agnostic"])
    def test_random_nets_hold(self, variant):
        space = SequentialSpace()
        for seed in range(50):
            net = Supernet.initialize(space, seed=seed)
            report = check_sensitivity_bound(net, _batch(space, n=8, seed=seed), variant=variant, seed=seed)
            assert not report.violations, f"seed {seed}"
            assert all(b.score <= b.output_bound * (1 + 1e-10) for b in report.ops)

    def test_data_agnostic_output_form(self):
        space = SequentialSpace()
        for seed in range(10):
            report = check_sensitivity_bound(Supernet.initialize(space, seed=seed), variant="data_agnostic")
            assert all(b.score <= b.output_bound * (1 + 1e-10) for b in report.ops)

    def test_needs_sequential_space_and_batch(self):
        with pytest.raises(ConfigError):
            check_sensitivity_bound(Supernet.initialize(CellSpace(), seed=0), variant="data_agnostic")
        with pytest.raises(ConfigError):
            check_sensitivity_bound(Supernet.initialize(SequentialSpace(), seed=0), variant="vanilla")


class TestDecomposition:
    def test_single_op_exact(self):
        space = SequentialSpace(depth=1, branches=1, widths=(3, 2), activation="linear")
        net = Supernet.initialize(space, seed=0)
        net.alphas[0].data = np.array([1.0])
        x, _ = _batch(space)
        assert check_supernet_decomposition(net, x).residual == pytest.approx(0.0, abs=1e-15)

    def test_two_layer_linear(self):
        space = SequentialSpace(depth=2, branches=3, widths=(4, 5, 3), activation="linear")
        net = Supernet.initialize(space, seed=1, alpha_scale=0.1)
        x, _ = _batch(space)
        report = check_supernet_decomposition(net, x)
        assert report.residual < 1e-10
        assert len(report.per_op) == 6

    def test_alpha_scaling_quadruples_kernel(self):
        space = SequentialSpace(depth=1, branches=2, widths=(3, 2), activation="linear")
        net = Supernet.initialize(space, seed=2)
        x, _ = _batch(space)
        before = ntk_matrix(net, x).theta
        net.alphas[0].data = 2.0 * net.alphas[0].data
        np.testing.assert_allclose(ntk_matrix(net, x).theta, 4.0 * before, rtol=1e-12)

    def test_nonlinear_refused_unless_asked(self):
        space = SequentialSpace()
        net = Supernet.initialize(space, seed=0)
        x, _ = _batch(space)
        with pytest.raises(ConfigError):
            check_supernet_decomposition(net, x)
        report = check_supernet_decomposition(net, x, allow_nonlinear=True)
        assert report.activation == "relu"
        assert report.residual >= 0


class TestProxyTrace:
    def test_width_sweep_positive(self):
        x = Tensor(np.random.default_rng(0).standard_normal((6, 4)))
        archs = [MLP.initialize([4, 4 * k, 1], seed=k, activation="linear", readout_variance=1.0)
                 for k in range(1, 21)]
        report, constants = check_proxy_trace_correlation(archs, ["synflow"], x)
        assert report["synflow"].spearman > 0.8

        # the fitted constant bounds every sample
        traces = [ntk_matrix(a, x).trace_norm for a in archs]
        values = [proxy_score(a, "synflow").value for a in archs]
        assert all(v <= constants["synflow"] * t * (1 + 1e-12) for v, t in zip(values, traces))

    def test_identical_networks_undefined(self):
        report, _ = trace_correlation({"snip": [1.0] * 20}, [2.0] * 20)
        assert report["snip"].undefined

    def test_anti_constructed(self):
        traces = np.arange(1.0, 21.0)
        report, constants = trace_correlation({"fake": list(-traces)}, traces)
        assert report["fake"].spearman == pytest.approx(-1.0)
        assert constants["fake"] < 0

    def test_too_few_samples(self):
        with pytest.raises(ConfigError):
            trace_correlation({"snip": [1.0, 2.0]}, [1.0, 2.0])
