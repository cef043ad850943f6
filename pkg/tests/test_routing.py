"""Router tests: Gaussian head, reparameterized sampling, discrete gate, entropy."""

import math

import numpy as np
import pytest

from infmoe import routing as R
from infmoe import tensor as T
from infmoe.errors import ContractError
from infmoe.tensor import Tensor


def make_router(d_in=4, d_z=3, seed=0):
    return R.GaussianRouterParams.init(d_in, d_z, np.random.default_rng(seed))


class TestGaussianRoute:
    def test_zero_weights_give_softplus_floor(self):
        p = make_router()
        for _, t in p.tensors():
            t.data[...] = 0.0
        out = R.gaussian_route(p, Tensor(np.ones((2, 4))))
        np.testing.assert_allclose(out.mu.data, 0.0)
        np.testing.assert_allclose(out.sigma.data, math.log(2.0) + R.SIGMA_MIN, atol=1e-12)

    def test_hand_set_affine(self):
        p = make_router(d_in=1, d_z=1)
        p.w_mu.data[...] = 2.0
        p.b_mu.data[...] = 1.0
        out = R.gaussian_route(p, Tensor([[3.0]]))
        assert out.mu.data[0, 0] == pytest.approx(7.0)

    def test_sigma_strictly_positive_sweep(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            p = R.GaussianRouterParams.init(6, 4, rng, std=rng.uniform(0.01, 2.0))
            x = Tensor(rng.standard_normal((100, 6)) * rng.uniform(0.1, 10))
            out = R.gaussian_route(p, x)
            assert (out.sigma.data > 0).all()

    def test_gradcheck_through_heads(self):
        rng = np.random.default_rng(3)
        p = make_router(seed=3)
        x = Tensor(rng.standard_normal((2, 4)))

        def f():
            out = R.gaussian_route(p, x)
            return T.sum_all(T.add(T.mul(out.mu, out.mu), T.mul(out.sigma, out.sigma)))

        params = [t for _, t in p.tensors()]
        assert T.grad_check(f, params, eps=1e-5) < 1e-4


class TestSampleZ:
    def test_degenerate_sigma_collapses_to_mu(self):
        p = make_router()
        out = R.gaussian_route(p, Tensor(np.random.default_rng(0).standard_normal((5, 4))))
        out.sigma.data[...] = 0.0  # force the degenerate case
        s = R.sample_z(out, 7, np.random.default_rng(1))
        for t in s.tensors:
            np.testing.assert_array_equal(t.data, out.mu.data)

    def test_law_of_large_numbers(self):
        out = R.RouterOutput(mu=Tensor(np.zeros((1, 1))), sigma=Tensor(np.ones((1, 1))))
        s = R.sample_z(out, 10000, np.random.default_rng(7))
        z = s.z.reshape(-1)
        assert abs(z.mean()) < 4 / math.sqrt(10000)
        assert abs(z.var() - 1.0) < 0.1

    def test_seed_determinism(self):
        p = make_router()
        x = Tensor(np.random.default_rng(5).standard_normal((3, 4)))
        out = R.gaussian_route(p, x)
        a = R.sample_z(out, 4, np.random.default_rng(42))
        b = R.sample_z(out, 4, np.random.default_rng(42))
        np.testing.assert_array_equal(a.z, b.z)
        np.testing.assert_array_equal(a.epsilon, b.epsilon)

    def test_reparameterization_identity_bit_exact(self):
        p = make_router(seed=9)
        x = Tensor(np.random.default_rng(9).standard_normal((4, 4)))
        out = R.gaussian_route(p, x)
        s = R.sample_z(out, 3, np.random.default_rng(3))
        for k, t in enumerate(s.tensors):
            np.testing.assert_array_equal(
                t.data, out.mu.data + out.sigma.data * s.epsilon[:, k, :]
            )

    def test_k_zero_rejected(self):
        out = R.RouterOutput(mu=Tensor(np.zeros((1, 2))), sigma=Tensor(np.ones((1, 2))))
        with pytest.raises(ContractError):
            R.sample_z(out, 0, np.random.default_rng(0))

    def test_gradcheck_through_sampler(self):
        rng = np.random.default_rng(11)
        p = make_router(seed=11)
        x = Tensor(rng.standard_normal((2, 4)))
        eps_rng_state = np.random.default_rng(100)
        frozen_eps = eps_rng_state.standard_normal((2, 3, 3))

        class FixedRng:
            def standard_normal(self, shape, dtype=None):
                assert shape == frozen_eps.shape
                return frozen_eps

        def f():
            out = R.gaussian_route(p, x)
            s = R.sample_z(out, 3, FixedRng())
            acc = None
            for t in s.tensors:
                q = T.sum_all(T.mul(t, t))
                acc = q if acc is None else T.add(acc, q)
            return acc

        params = [t for _, t in p.tensors()]
        assert T.grad_check(f, params, eps=1e-5) < 1e-4

    def test_variance_decays_with_k(self):
        # Monte Carlo averages of a fixed nonlinear function settle as K grows.
        mu = Tensor(np.full((1, 2), 0.3))
        sigma = Tensor(np.full((1, 2), 1.2))
        out = R.RouterOutput(mu=mu, sigma=sigma)

        def h(z):
            return np.tanh(z).sum() + (z ** 2).sum()

        ks = [1, 2, 4, 8, 16]
        variances = []
        for K in ks:
            vals = []
            for trial in range(200):
                s = R.sample_z(out, K, np.random.default_rng(1000 + trial))
                vals.append(np.mean([h(t.data) for t in s.tensors]))
            variances.append(np.var(vals))
        assert all(a > b for a, b in zip(variances, variances[1:]))
        assert variances[-1] <= variances[0] / 8 * 1.5


class TestDiscreteRoute:
    def _params(self, scores_row):
        n = len(scores_row)
        p = R.DiscreteRouterParams.init(n, n, np.random.default_rng(0), k=None or 2)
        # identity gate: x = one-hot score row makes g(x) = scores
        p.w_gate.data[...] = np.eye(n)
        return p

    def test_hand_case(self):
        n = 4
        p = R.DiscreteRouterParams(
            w_gate=Tensor(np.eye(n), requires_grad=True), k=2, n=n
        )
        x = Tensor(np.array([[0.1, 0.9, 0.5, 0.3]]))
        idx, w = R.discrete_route(p, x)
        assert set(idx[0].tolist()) == {1, 2}
        expected = np.exp([0.9, 0.5]) / np.exp([0.9, 0.5]).sum()
        np.testing.assert_allclose(np.sort(w.data[0])[::-1], np.sort(expected)[::-1],
                                   atol=1e-12)
        assert w.data[0].sum() == pytest.approx(1.0, abs=1e-9)

    def test_k_equals_n_is_full_softmax(self):
        n = 5
        p = R.DiscreteRouterParams(w_gate=Tensor(np.eye(n)), k=n, n=n)
        g = np.array([[0.3, -1.0, 2.0, 0.0, 0.7]])
        idx, w = R.discrete_route(p, Tensor(g))
        full = np.exp(g[0]) / np.exp(g[0]).sum()
        restored = np.zeros(n)
        restored[idx[0]] = w.data[0]
        np.testing.assert_allclose(restored, full, atol=1e-12)

    def test_tie_break_lowest_index(self):
        n = 4
        p = R.DiscreteRouterParams(w_gate=Tensor(np.eye(n)), k=2, n=n)
        idx, w = R.discrete_route(p, Tensor(np.zeros((1, n))))
        assert sorted(idx[0].tolist()) == [0, 1]
        np.testing.assert_allclose(w.data[0], [0.5, 0.5], atol=1e-12)

    def test_k_greater_than_n_rejected(self):
        with pytest.raises(ContractError):
            R.DiscreteRouterParams(w_gate=Tensor(np.eye(3)), k=4, n=3)

    def test_weights_nonneg_sum_to_one(self):
        rng = np.random.default_rng(8)
        p = R.DiscreteRouterParams.init(6, 8, k=3, rng=rng)
        x = Tensor(rng.standard_normal((40, 6)))
        _, w = R.discrete_route(p, x)
        assert (w.data >= 0).all()
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-9)

    def test_score_shift_invariance(self):
        rng = np.random.default_rng(13)
        p = R.DiscreteRouterParams.init(6, 8, k=3, rng=rng)
        x = Tensor(rng.standard_normal((10, 6)))
        scores = R.router_scores(p, x)
        base = T.top_indices(scores.data, 3)
        shifted = T.top_indices(scores.data + 7.5, 3)
        np.testing.assert_array_equal(base, shifted)


class TestRoutingEntropy:
    def test_uniform_counts(self):
        s = R.RoutingStats(counts=np.full(16, 5, dtype=np.int64), total=80)
        assert R.routing_entropy(s) == pytest.approx(1.0, abs=1e-12)

    def test_point_mass(self):
        c = np.zeros(16, dtype=np.int64)
        c[3] = 100
        assert R.routing_entropy(R.RoutingStats(counts=c, total=100)) == 0.0

    def test_hand_derived_value(self):
        s = R.RoutingStats(counts=np.array([3, 1, 0, 0], dtype=np.int64), total=4)
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25)) / math.log(4)
        assert R.routing_entropy(s) == pytest.approx(expected, abs=1e-12)
        assert R.routing_entropy(s) == pytest.approx(0.4056, abs=1e-4)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            R.routing_entropy(R.RoutingStats.zeros(8))

    def test_accumulation_and_merge(self):
        a = R.RoutingStats.zeros(4)
        a.record_mask(np.array([[True, False, True, False]]))
        b = R.RoutingStats.zeros(4)
        b.record_mask(np.array([[False, True, False, True]]))
        a.merge(b)
        assert a.total == 4
        assert a.counts.tolist() == [1, 1, 1, 1]
        assert a.total == a.counts.sum()
