import csv
import json

import numpy as np
import pytest

from spacetime_robust.attacks import (AttackConfig, DDAParams, adversarial_finetune, attack_with_norms, dda_attack,
                                      dda_batch, dda_roots, estimate_gamma_beta, outcomes_to_csv, outcomes_to_json,
                                      pgd_attack, pgd_batch)
from spacetime_robust.data import Scaler, SeriesWindow, window_arrays
from spacetime_robust.detectors import NormDetector, calibrate, replay_alarm, stream_statistics
from spacetime_robust.errors import DetectorViolatedAtInit, Infeasible, ValidationError, ZeroInput
from spacetime_robust.model import ModelConfig, ScaledForecaster, SpacetimeModel, linearize
from spacetime_robust.synthetic import ar_process, noiseless_ar3

from .helpers import transfer_matrix


class Identity:
    """f(u) = u with l = h."""

    def __init__(self, n):
        self.lookback = self.horizon = n

    def __call__(self, x):
        return np.array(x, dtype=np.float64)


@pytest.fixture(scope="module")
def linear_setup():
    m = linearize(SpacetimeModel.init(ModelConfig(8, 4, 2, 1, 3, 3, False), seed=3))
    f = ScaledForecaster(m, Scaler())
    rng = np.random.default_rng(0)
    return f, transfer_matrix(m), rng.normal(size=(5, 8)), rng.normal(size=(5, 4))


@pytest.fixture(scope="module")
def ar_stream():
    phi = (0.5, -0.3, 0.2)
    y = ar_process(phi, 6000, noise=1.0, seed=1).values
    f = ScaledForecaster(SpacetimeModel.from_ar(phi, 6, 4), Scaler(0.0, 1.3))
    delta = calibrate([z for _, z in stream_statistics(NormDetector(0.0), f, y[:4000])], 0.01)
    return f, NormDetector(delta), y


def test_zero_iterations_is_trivial(linear_setup):
    f, _, x, y = linear_setup
    res = pgd_batch(f, x, y, AttackConfig(1e-2, 0), NormDetector(np.inf))
    assert np.all(res.perturbations == 0)
    assert np.array_equal(res.adv_predictions, res.clean_predictions)
    assert res.stealthy.all()


def test_one_step_matches_first_order_prediction(linear_setup):
    f, H, x, y = linear_setup
    eta = 1e-4
    res = pgd_batch(f, x, y, AttackConfig(eta, 1), NormDetector(np.inf))
    for i in range(len(x)):
        r = H @ x[i] - y[i]
        g = H.T @ r / np.linalg.norm(r)
        assert np.allclose(res.perturbations[i], eta * g / np.linalg.norm(g), atol=1e-14)
        gain = np.linalg.norm(H @ (x[i] + res.perturbations[i]) - y[i]) - np.linalg.norm(r)
        assert gain == pytest.approx(eta * np.linalg.norm(g), rel=0.05)


def test_trace_is_monotone_for_small_steps(linear_setup):
    f, _, x, y = linear_setup
    res = pgd_batch(f, x, y, AttackConfig(1e-4, 50), NormDetector(np.inf))
    for tr in res.traces:
        assert len(tr) == 51
        assert np.all(np.diff(tr) >= 0)


def test_detector_mode_stops_below_threshold(linear_setup):
    f, H, x, y = linear_setup
    clean = np.linalg.norm(x @ H.T - y, axis=1)
    det = NormDetector(float(np.max(clean)) + 0.5)
    res = pgd_batch(f, x, y, AttackConfig(0.05, 500), det)
    assert set(res.status) == {"stopped_at_threshold"}
    assert np.all(np.linalg.norm(res.adv_predictions - y, axis=1) <= det.threshold)
    assert res.stealthy.all()


def test_violated_at_init(linear_setup):
    f, _, x, y = linear_setup
    res = pgd_batch(f, x, y, AttackConfig(), NormDetector(0.0))
    assert set(res.status) == {"violated_at_init"}
    assert not res.stealthy.any() and np.all(res.perturbations == 0)
    with pytest.raises(DetectorViolatedAtInit):
        pgd_attack(f, SeriesWindow(x[0], y[0], 0), AttackConfig(), NormDetector(0.0))


def test_zero_gradient_flag():
    m = SpacetimeModel.init(ModelConfig(5, 2, 2, 1, 2, 2), seed=0)
    m.proj_w[:] = 0.0
    f = ScaledForecaster(m, Scaler())
    out = pgd_attack(f, SeriesWindow(np.ones(5), np.ones(2), 0), AttackConfig(), NormDetector(np.inf))
    assert out.zero_gradient and out.status == "zero_gradient" and out.norm == 0.0


def test_clip_and_budget_modes(linear_setup):
    f, _, x, y = linear_setup
    f2 = ScaledForecaster(f.model, Scaler(1.0, 2.5))
    clip = pgd_batch(f2, x, y, AttackConfig(0.3, 40, "clip", clip=0.2))
    assert np.max(np.abs(clip.perturbations)) <= 0.2 + 1e-12
    budget = pgd_batch(f2, x, y, AttackConfig(0.3, 40, "budget", budget=0.7))
    assert np.all(budget.norms <= 0.7 + 1e-12)
    with pytest.raises(ValidationError):
        AttackConfig(mode="clip").validate()
    with pytest.raises(ValidationError):
        pgd_batch(f2, x, y, AttackConfig())


def test_equal_norm_attacks(linear_setup):
    f, _, x, y = linear_setup
    norms = np.array([0.1, 0.5, 1.0, 2.0, 0.0])
    res = attack_with_norms(f, x, y, norms, AttackConfig(0.05, 30))
    assert np.allclose(res.norms, norms, rtol=1e-12, atol=0)


def test_dda_identity_forecaster_hits_boundary():
    rng = np.random.default_rng(0)
    for _ in range(20):
        yi = rng.normal(size=6) + 3.0
        yo = yi + 0.2 * rng.normal(size=6)
        beta = float(yi @ yo / (np.linalg.norm(yi) * np.linalg.norm(yo)))
        det = NormDetector(2.0)
        for branch in ("plus", "minus"):
            out = dda_attack(SeriesWindow(yi, yo, 0), det, DDAParams(1.0, beta, branch=branch), forecaster=Identity(6))
            err = np.linalg.norm(out.adv_prediction - yo)
            assert err == pytest.approx(det.threshold - 0.05 * det.threshold, abs=1e-9)
            assert out.stealthy


def test_dda_norm_identity_is_exact():
    rng = np.random.default_rng(1)
    for _ in range(50):
        yi, yo = rng.normal(size=8) + 1, rng.normal(size=4) + 1
        p = DDAParams(float(rng.uniform(0.3, 2)), 1.0, branch="plus")
        det = NormDetector(float(rng.uniform(0.5, 3)))
        out = dda_attack(SeriesWindow(yi, yo, 0), det, p)
        no, s = np.linalg.norm(yo), 0.05 * det.threshold
        target = (no + np.sqrt(no ** 2 * (p.beta ** 2 - 1) + (det.threshold - s) ** 2)) / p.gamma
        assert np.linalg.norm(yi + out.perturbation) == pytest.approx(target, rel=1e-10)
        assert out.status == "unverified"


def test_dda_beta_one_collapses():
    plus, minus = dda_roots(5.0, 2.0, DDAParams(2.0, 1.0, slack=0.5))
    assert (plus, minus) == (pytest.approx((5.0 + 1.5) / 2.0), pytest.approx((5.0 - 1.5) / 2.0))


def test_dda_errors():
    w = SeriesWindow(np.ones(4), np.full(2, 10.0), 0)
    with pytest.raises(Infeasible):
        dda_attack(w, NormDetector(1.0), DDAParams(1.0, 0.5))
    with pytest.raises(Infeasible):
        dda_attack(w, NormDetector(np.inf), DDAParams(1.0, 1.0))
    with pytest.raises(ZeroInput):
        dda_attack(SeriesWindow(np.zeros(4), np.ones(2), 0), NormDetector(1.0), DDAParams(1.0))
    for bad in (dict(gamma=0.0), dict(gamma=1.0, beta=1.5), dict(gamma=1.0, slack=-1.0)):
        with pytest.raises(ValidationError):
            DDAParams(**bad)


def test_dda_batch_marks_infeasible_rows():
    x = np.ones((2, 6))
    y = np.stack([np.ones(6), np.full(6, 100.0)])
    res = dda_batch(Identity(6), x, y, NormDetector(1.0), DDAParams(1.0, 0.99))
    assert res.status == ["ok", "infeasible"]
    assert np.all(res.perturbations[1] == 0)


def test_gamma_beta_estimates():
    x = np.random.default_rng(0).normal(size=(10, 5))
    assert estimate_gamma_beta(x, x) == (pytest.approx(1.0), 1.0)
    with pytest.raises(ValidationError):
        estimate_gamma_beta(np.zeros((0, 3)), np.zeros((0, 3)))
    # least-squares AR(12) fit on a noisy sine-plus-level series, queried on held-out windows
    y = noiseless_ar3(600).values + 0.05 * np.random.default_rng(1).normal(size=600)
    x1, t1, _ = window_arrays(y[:400], 12, 1)
    phi = np.linalg.lstsq(x1, t1[:, 0], rcond=None)[0][::-1]
    xi, yo, _ = window_arrays(y[400:], 12, 6)
    _, beta = estimate_gamma_beta(xi, yo, ScaledForecaster(SpacetimeModel.from_ar(phi, 12, 6), Scaler()))
    assert 0.95 < beta <= 1.0


def test_finetune_zero_iterations_is_a_no_op(linear_setup):
    f, _, x, y = linear_setup
    tuned, hist = adversarial_finetune(f, x, y, NormDetector(np.inf), AttackConfig(), iters=0)
    assert tuned is not f and tuned.model is not f.model
    assert np.array_equal(tuned.model.flat_parameters(), f.model.flat_parameters())
    assert hist.adv_loss == []


def test_finetune_keeps_architecture():
    m = SpacetimeModel.init(ModelConfig(8, 3, 2, 1, 2, 2), seed=1)
    f = ScaledForecaster(m, Scaler())
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(40, 8)), rng.normal(size=(40, 3))
    before = m.flat_parameters().copy()
    tuned, hist = adversarial_finetune(f, x, y, NormDetector(np.inf), AttackConfig(0.1, 5), batch=8, iters=3)
    assert tuned.model.parameter_names() == m.parameter_names()
    assert tuned.model.flat_parameters().shape == before.shape
    assert not np.array_equal(tuned.model.flat_parameters(), before)
    assert np.array_equal(m.flat_parameters(), before)
    assert len(hist.adv_loss) == 3


def test_stealthy_attacks_replay_without_alarm(ar_stream):
    f, det, y = ar_stream
    origins = np.arange(4200, 5900, 37)
    X = np.stack([y[o - 5:o + 1] for o in origins])
    Y = np.stack([y[o + 1:o + 5] for o in origins])
    pgd = pgd_batch(f, X, Y, AttackConfig(0.05, 200), det)
    gamma, _ = estimate_gamma_beta(X, Y)
    dda = dda_batch(f, X, Y, det, DDAParams(gamma, 1.0))
    checked = 0
    for res in (pgd, dda):
        for i in np.flatnonzero(res.stealthy):
            assert not replay_alarm(det, f, y, int(origins[i]), res.perturbations[i])
            checked += 1
    assert checked > 40


def test_serialization(tmp_path, linear_setup):
    f, _, x, y = linear_setup
    res = pgd_batch(f, x, y, AttackConfig(0.01, 3), NormDetector(np.inf))
    outcomes_to_json(tmp_path / "a.json", res, y, {"method": "pgd"})
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["method"] == "pgd" and len(doc["attacks"]) == len(x)
    assert doc["attacks"][0]["norm"] == pytest.approx(res.norms[0])
    outcomes_to_csv(tmp_path / "a.csv", res, y)
    rows = list(csv.DictReader((tmp_path / "a.csv").open()))
    assert [float(r["norm"]) for r in rows] == res.norms.tolist()
