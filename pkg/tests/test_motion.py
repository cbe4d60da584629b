import numpy as np
import pytest

from bptrack.motion import (
    NeighborSet,
    PredictedPo,
    build_motion_params,
    cv_predict,
    linear_motion_params,
    motion_forward,
    motion_forward_batch,
    neighbor_weights,
    select_neighbors,
    sp_predict,
)
from bptrack.neural import NetMeta, Tape, vsum, vabs, vsub, zero_grads, _val
from bptrack.numerics import (
    GaussianState,
    Rng,
    UTParams,
    cv_process_noise,
    cv_transition,
)

META = NetMeta(hidden_dim=12, feat_dim=4, map_channels=2, pos_scale=30.0,
               vel_scale=5.0)


def random_gaussian(rng, scale=1.0):
    a = rng.standard_normal((4, 4))
    cov = scale * (a @ a.T + 4 * np.eye(4))
    mean = np.array([*rng.uniform(-20, 20, 2), *rng.uniform(-3, 3, 2)])
    return GaussianState(mean, cov)


def small_po(rng, hidden_dim=12):
    class Po:
        pass

    po = Po()
    po.gaussian = random_gaussian(rng)
    po.hidden = np.zeros(hidden_dim)
    po.existence = float(rng.uniform(0.2, 1.0))
    return po


class TestCvPredict:
    def test_unit_velocity(self):
        g = GaussianState(np.array([0.0, 0.0, 1.0, 0.0]), np.zeros((4, 4)))
        out = cv_predict(g, 1.0, np.zeros((4, 4)))
        assert np.allclose(out.mean, [1.0, 0.0, 1.0, 0.0])

    def test_zero_velocity_fixed_point(self):
        g = GaussianState(np.array([3.0, -2.0, 0.0, 0.0]), np.eye(4))
        out = cv_predict(g, 2.5, np.zeros((4, 4)))
        assert np.allclose(out.mean, g.mean)

    def test_semigroup(self):
        rng = Rng(1)
        g = random_gaussian(rng)
        once = cv_predict(g, 0.5, np.zeros((4, 4)))
        twice = cv_predict(cv_predict(g, 0.25, np.zeros((4, 4))), 0.25,
                           np.zeros((4, 4)))
        assert np.allclose(once.mean, twice.mean, atol=1e-12)
        assert np.allclose(once.cov, twice.cov, atol=1e-12)


class TestNeighborWeights:
    def test_inverse_distance(self):
        w = neighbor_weights(np.zeros(2), np.array([[1.0, 0.0], [2.0, 0.0]]))
        assert np.allclose(w, [2.0 / 3.0, 1.0 / 3.0])

    def test_single_neighbor(self):
        w = neighbor_weights(np.zeros(2), np.array([[5.0, 5.0]]))
        assert np.allclose(w, [1.0])

    def test_coincident_floor(self):
        w = neighbor_weights(np.zeros(2), np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert w[0] > 0.999


class TestMotionForward:
    def _zero_params(self):
        params = build_motion_params(META, Rng(5))
        for _, p in params.named_parameters("motion"):
            p.value = np.zeros_like(p.value)
        return params

    def test_zero_weights_halve_hidden(self):
        params = self._zero_params()
        h = np.linspace(-1, 1, META.hidden_dim)
        _, h_next = motion_forward(np.array([1.0, 2.0, 0.5, -0.5]), [], h, params)
        assert np.allclose(h_next, 0.5 * h)

    def test_zero_weights_decoder_bias(self):
        params = self._zero_params()
        bias = np.array([1.0, -2.0, 3.0, 4.0])
        params.decoder.out_bias.value = bias.copy()
        x_next, _ = motion_forward(np.array([9.0, 9.0, 1.0, 1.0]), [],
                                   np.zeros(META.hidden_dim), params)
        assert np.allclose(x_next, bias)

    def test_equidistant_neighbor_permutation(self):
        params = build_motion_params(META, Rng(17))
        x = np.array([0.0, 0.0, 1.0, 0.0])
        h = Rng(3).standard_normal(META.hidden_dim)
        n1 = np.array([3.0, 0.0, 0.0, 1.0])
        n2 = np.array([0.0, 3.0, -1.0, 0.0])
        a1, h1 = motion_forward(x, [n1, n2], h, params)
        a2, h2 = motion_forward(x, [n2, n1], h, params)
        assert np.allclose(a1, a2, atol=1e-12)
        assert np.allclose(h1, h2, atol=1e-12)

    def test_batch_matches_single(self):
        params = build_motion_params(META, Rng(19))
        rng = Rng(23)
        states = rng.standard_normal((7, 4))
        neighbors = rng.standard_normal((7, 3, 4))
        h = rng.standard_normal(META.hidden_dim)
        xb, hb = motion_forward_batch(states, neighbors, h, params)
        for i in range(7):
            xi, hi = motion_forward(states[i], list(neighbors[i]), h, params)
            assert np.allclose(xb[i], xi, atol=1e-12)
            assert np.allclose(hb[i], hi, atol=1e-12)

    def test_gradient_through_batched_graph(self):
        # finite differences through the full batched SP-style pipeline
        rng = Rng(29)
        params = build_motion_params(META, rng)
        named = list(params.named_parameters("motion"))
        states = rng.standard_normal((5, 4))
        neighbors = rng.standard_normal((5, 2, 4))
        h = rng.standard_normal(META.hidden_dim)
        target = rng.standard_normal(4)
        w = np.full(5, 0.2)

        def loss_fn():
            from bptrack.neural import vweighted_rows

            xn, _ = motion_forward_batch(states, neighbors, h, params)
            return vsum(vabs(vsub(vweighted_rows(xn, w), target)))

        from tests.test_neural import central_diff_check

        central_diff_check(loss_fn, named, rng)


class TestSpPredict:
    def test_linear_mode_equals_kalman(self):
        rng = Rng(31)
        dt = 0.5
        q = cv_process_noise(dt, 0.4)
        params = linear_motion_params(dt, META)
        ut = UTParams()
        for _ in range(20):
            po = small_po(rng)
            oracle = cv_predict(po.gaussian, dt, q)
            for strategy in ("object-sp", "joint-sp"):
                pred = sp_predict(po, NeighborSet([]), params, q, 0.999, ut, strategy)
                scale = np.max(np.abs(oracle.cov))
                assert np.allclose(pred.gaussian.mean, oracle.mean,
                                   atol=1e-8 * max(1, np.max(np.abs(oracle.mean))))
                assert np.max(np.abs(pred.gaussian.cov - oracle.cov)) < 1e-8 * scale

    def test_linear_mode_joint_with_neighbors(self):
        rng = Rng(37)
        dt = 0.5
        q = cv_process_noise(dt, 0.4)
        params = linear_motion_params(dt, META)
        po = small_po(rng)
        neighbors = NeighborSet([random_gaussian(rng) for _ in range(10)])
        pred = sp_predict(po, neighbors, params, q, 0.999, UTParams(), "joint-sp")
        oracle = cv_predict(po.gaussian, dt, q)
        scale = np.max(np.abs(oracle.cov))
        assert np.allclose(pred.gaussian.mean, oracle.mean, atol=1e-8 * 20)
        assert np.max(np.abs(pred.gaussian.cov - oracle.cov)) < 1e-8 * scale

    def test_survival_arithmetic(self):
        po = small_po(Rng(41))
        po.existence = 1.0
        pred = sp_predict(po, NeighborSet([]), linear_motion_params(0.5, META),
                          np.eye(4), 0.999, UTParams(), "object-sp")
        assert pred.existence == pytest.approx(0.999)

    def test_zero_neighbors_strategies_identical(self):
        rng = Rng(43)
        params = build_motion_params(META, rng)
        po = small_po(rng)
        q = 0.1 * np.eye(4)
        a = sp_predict(po, NeighborSet([]), params, q, 0.99, UTParams(), "joint-sp")
        b = sp_predict(po, NeighborSet([]), params, q, 0.99, UTParams(), "object-sp")
        assert np.allclose(a.gaussian.mean, b.gaussian.mean, atol=1e-12)
        assert np.allclose(a.gaussian.cov, b.gaussian.cov, atol=1e-12)
        assert np.allclose(a.hidden, b.hidden, atol=1e-12)

    def test_zero_neighbor_cov_matches_object_sp(self):
        rng = Rng(47)
        params = build_motion_params(META, rng)
        po = small_po(rng)
        q = 0.1 * np.eye(4)
        frozen = [GaussianState(random_gaussian(rng).mean, np.zeros((4, 4)))
                  for _ in range(3)]
        a = sp_predict(po, NeighborSet(frozen), params, q, 0.99, UTParams(),
                       "joint-sp")
        b = sp_predict(po, NeighborSet(frozen), params, q, 0.99, UTParams(),
                       "object-sp")
        assert np.allclose(a.gaussian.mean, b.gaussian.mean, atol=1e-8)
        assert np.allclose(a.gaussian.cov, b.gaussian.cov, atol=1e-8)

    def test_predicted_cov_dominates_process_noise(self):
        rng = Rng(53)
        params = build_motion_params(META, rng)
        q = cv_process_noise(0.5, 0.3)
        for strategy in ("object-sp", "joint-sp", "mean-only"):
            po = small_po(rng)
            neighbors = NeighborSet([random_gaussian(rng) for _ in range(2)])
            pred = sp_predict(po, neighbors, params, q, 0.999, UTParams(), strategy)
            diff = pred.gaussian.cov - q
            assert np.linalg.eigvalsh(diff).min() >= -1e-9

    def test_existence_bounds_and_decay(self):
        rng = Rng(59)
        params = linear_motion_params(0.5, META)
        po = small_po(rng)
        pred = sp_predict(po, NeighborSet([]), params, np.eye(4), 0.999,
                          UTParams(), "object-sp")
        assert 0.0 <= pred.existence <= po.existence

    def test_hidden_weights_sum(self):
        # hidden point estimate uses mean weights summing to one: a constant
        # hidden map must be reproduced exactly
        rng = Rng(61)
        params = build_motion_params(META, rng)
        po = small_po(rng)
        pred = sp_predict(po, NeighborSet([]), params, 0.1 * np.eye(4), 0.99,
                          UTParams(), "object-sp")
        assert np.all(np.isfinite(pred.hidden))


class TestSelectNeighbors:
    def test_ranking_and_threshold(self):
        g = [GaussianState(np.array([float(i), 0.0, 0.0, 0.0]), np.eye(4))
             for i in range(4)]
        ex = [1.0, 0.2, 0.9, 0.8]
        picked = select_neighbors(0, g, ex, 0.5, 2)
        assert picked.count == 2
        assert np.allclose(picked.states[0].mean[0], 2.0)  # nearest eligible
        assert np.allclose(picked.states[1].mean[0], 3.0)
