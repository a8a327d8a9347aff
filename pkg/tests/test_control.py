import numpy as np
import pytest

from spacetime_robust.control import (LTISystem, build_transfer_map, controllability_check, encoder_zeros,
                                      kalman_gain, observability_check, predictor_riccati, riccati_step,
                                      sensitivity, simulate_observer, spectral_radius, top_singular)
from spacetime_robust.errors import NotLinearized, NotObservable, Unstable, ValidationError
from spacetime_robust.model import (DecoderLayer, EncoderLayer, ModelConfig, SpacetimeModel, companion_matrix,
                                    linearize)

from .helpers import transfer_matrix


def _random_linear_model(rng, ell=None, h=None):
    cfg = ModelConfig(ell or int(rng.integers(1, 13)), h or int(rng.integers(1, 13)), int(rng.integers(1, 4)),
                      int(rng.integers(0, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), False)
    return linearize(SpacetimeModel.init(cfg, seed=int(rng.integers(1 << 30))))


def _stable_system(rng, n):
    while True:
        A = rng.normal(size=(n, n))
        A *= rng.uniform(0.3, 0.9) / spectral_radius(A)
        C = rng.normal(size=n)
        if observability_check(A, C).controllable:
            return LTISystem(A, C, np.diag(rng.uniform(0.05, 1.0, n)), float(rng.uniform(0.1, 1.0)))


def test_scalar_transfer_map():
    enc = EncoderLayer(np.array([[0.7]]), np.array([[1.5]]), None, False)
    dec = DecoderLayer(np.array([[0.4]]), np.array([[2.0]]), np.zeros((1, 1)))
    m = SpacetimeModel(np.ones(1), np.zeros(1), [enc], dec, np.ones(1), np.zeros(()), 1, 1)
    # c_bar * b_bar * c * b with b = b_bar = 1
    assert build_transfer_map(m).H.tolist() == [[3.0]]


@pytest.mark.parametrize("seed", range(8))
def test_transfer_map_matches_forward_passes(seed):
    m = _random_linear_model(np.random.default_rng(seed))
    tm = build_transfer_map(m)
    H = transfer_matrix(m)
    assert np.max(np.abs(tm.H - H)) <= 1e-9 * max(1.0, np.max(np.abs(H)))
    assert np.allclose(tm.H1 @ tm.H2, tm.H, rtol=1e-10, atol=1e-12)
    assert tm.H.shape == (m.horizon, m.lookback)


def test_transfer_map_needs_linearized_model():
    with pytest.raises(NotLinearized):
        build_transfer_map(SpacetimeModel.init(ModelConfig(4, 2, 2, 1, 2, 2), seed=0))


def test_top_singular_identity_tie_rule():
    sigma, v, ok = top_singular(np.eye(4))
    assert ok and sigma == 1.0
    assert v.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_top_singular_matches_dense_svd():
    rng = np.random.default_rng(0)
    for _ in range(20):
        H = rng.normal(size=(int(rng.integers(1, 8)), int(rng.integers(1, 8))))
        sigma, v, ok = top_singular(H)
        assert ok
        assert sigma == pytest.approx(np.linalg.svd(H, compute_uv=False)[0], rel=1e-10)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
        assert v[np.flatnonzero(np.abs(v) > 1e-12)[0]] > 0


def test_zero_matrix_singular():
    sigma, v, _ = top_singular(np.zeros((3, 2)))
    assert sigma == 0.0 and v.tolist() == [1.0, 0.0]


@pytest.mark.parametrize("seed", range(5))
def test_sensitivity_supremum_and_bounds(seed):
    rng = np.random.default_rng(100 + seed)
    m = _random_linear_model(rng)
    rep = sensitivity(build_transfer_map(m))
    H = transfer_matrix(m)
    assert np.linalg.norm(H @ rep.eps_star) == pytest.approx(rep.sigma_max, abs=1e-9)
    eps = rng.normal(size=(10_000, m.lookback))
    eps /= np.linalg.norm(eps, axis=1, keepdims=True)
    sup = np.max(np.linalg.norm(eps @ H.T, axis=1))
    assert sup <= rep.sigma_max * (1 + 1e-12)
    assert rep.bounds_hold()


def test_sensitivity_identity_bounds():
    m = SpacetimeModel.from_ar([1.0], 1, 1)  # forecast = last input, H = [[1]]
    rep = sensitivity(build_transfer_map(m))
    assert rep.sigma_max == pytest.approx(1.0)
    assert rep.l1_lower <= 1.0 <= rep.l1_upper


def test_encoder_zeros_are_numerator_roots():
    c = np.array([[2.0, -3.0, 1.0]])  # numerator 2 - 3z + z^2 = (z - 1)(z - 2)
    enc = EncoderLayer(np.zeros((1, 3)), c, None, False)
    m = SpacetimeModel(np.ones(1), np.zeros(1), [enc], DecoderLayer(np.zeros((1, 1)), np.ones((1, 1)),
                                                                    np.zeros((1, 1))), np.ones(1), np.zeros(()), 3, 1)
    assert sorted(abs(z) for z in encoder_zeros(m)) == pytest.approx([1.0, 2.0])


def test_zero_process_noise_gives_zero_gain():
    sys = LTISystem.autoregressive([0.3, 0.5, 0.2], np.zeros((3, 3)), 0.1)
    assert np.allclose(kalman_gain(sys), 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_riccati_fixed_point_and_stable_error_dynamics(seed):
    rng = np.random.default_rng(seed)
    sys = _stable_system(rng, int(rng.integers(2, 6)))
    P, _ = predictor_riccati(sys)
    assert np.linalg.norm(P - riccati_step(P, sys)) <= 1e-10
    L = kalman_gain(sys)
    assert spectral_radius(sys.A - np.outer(L, sys.C[0])) < 1.0


def test_kalman_gain_errors():
    with pytest.raises(Unstable):
        kalman_gain(LTISystem([[1.5]], [1.0], [[1.0]], 1.0))
    with pytest.raises(NotObservable):
        kalman_gain(LTISystem(np.eye(2) * 0.5, [1.0, 0.0], np.eye(2), 1.0))
    with pytest.raises(ValidationError):
        kalman_gain(LTISystem([[0.5]], [1.0], [[1.0]], 0.0))


def test_controllability_examples():
    assert controllability_check(companion_matrix([0.1, 0.2, 0.3]), np.eye(3)[-1]).controllable
    res = controllability_check(np.eye(2), [1.0, 0.0])
    assert not res.controllable and res.rank == 1
    assert res.pbh_consistent


def test_ar3_gain_controllability():
    sys = LTISystem.autoregressive([0.3, 0.5, 0.2], 1e-2 * np.eye(3), 0.1)
    L = kalman_gain(sys).reshape(-1, 1)
    assert controllability_check(sys.A, L).controllable
    assert controllability_check(sys.A - L @ sys.C, L).controllable


def test_zero_gain_observer_runs_open_loop():
    sys = LTISystem(companion_matrix([0.2, -0.1, 0.5]), [1.0, 0.4, 0.0], np.eye(3), 1.0)
    x0 = np.array([1.0, -2.0, 0.5])
    pred = simulate_observer(sys, np.zeros(3), np.random.default_rng(0).normal(size=6), x0)
    expected = [sys.C[0] @ np.linalg.matrix_power(sys.A, k + 1) @ x0 for k in range(6)]
    assert np.allclose(pred, expected, atol=1e-14)


def test_kalman_gain_beats_random_stabilizing_gains():
    rng = np.random.default_rng(7)
    sys = _stable_system(rng, 3)
    y = sys.simulate(10_000, rng)

    def mse(L):
        return float(np.mean((simulate_observer(sys, L, y)[:-1] - y[1:]) ** 2))

    best = mse(kalman_gain(sys))
    tried = 0
    while tried < 20:
        L = rng.normal(size=3)
        if spectral_radius(sys.A - np.outer(L, sys.C[0])) >= 1.0:
            continue
        tried += 1
        # 2% slack covers sampling error at 1e4 steps
        assert best <= mse(L) * 1.02
