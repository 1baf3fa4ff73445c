import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbsma.averaging import (AveragingError, PredictionMatrix, WeightSolution, _quadratic,
                             kkt_residual, ma_predict, ma_standard_errors, one_marker_model_ids,
                             project_simplex, solve_weights, two_marker_model_ids, weighted_brier,
                             write_ma_predictions, write_weights)
from mbsma.metrics import brier, ipcw_frame

from oracles import grid_minimum, loop_weighted_brier, random_instance, surv


def matrix_for(frame, P, V=None):
    P = np.asarray(P, dtype=float)
    V = np.zeros_like(P) if V is None else np.asarray(V, dtype=float)
    return PredictionMatrix(frame.landmark, frame.window, frame.subject_ids,
                            tuple(f"M{k + 1}" for k in range(P.shape[1])), P, V)


def nocens_frame(n=5):
    return ipcw_frame(surv([0.5, 1.2, 3.0, 0.8, 4.0][:n], [1] * n), 0.0, 1.0)


# pair enumeration

def test_model_enumeration():
    assert one_marker_model_ids(3) == [(1,), (2,), (3,)]
    assert two_marker_model_ids(3) == [(1, 2), (1, 3), (2, 3)]
    assert len(two_marker_model_ids(5)) == 10


# weighted Brier

def test_vertex_reduction_and_degenerate_matrix():
    rng = np.random.default_rng(0)
    f, P = random_instance(rng, K=3)
    m = matrix_for(f, P)
    for k in range(3):
        assert weighted_brier(m, np.eye(3)[k], f) == pytest.approx(brier(P[:, k], f), abs=1e-15)
    same = matrix_for(f, np.repeat(P[:, :1], 3, axis=1))
    vals = [weighted_brier(same, w, f) for w in ([1, 0, 0], [0.2, 0.3, 0.5], [0, 0, 1])]
    assert max(vals) - min(vals) <= 1e-15


def test_weighted_brier_matches_loop():
    f = nocens_frame()
    P = np.random.default_rng(1).random((5, 3))
    w = np.array([0.2, 0.3, 0.5])
    assert weighted_brier(matrix_for(f, P), w, f) == pytest.approx(loop_weighted_brier(P, w, f), abs=1e-15)


def test_quadratic_form_reproduces_objective():
    rng = np.random.default_rng(2)
    f, P = random_instance(rng, K=4)
    Q, c, const = _quadratic(P, f)
    for _ in range(5):
        w = project_simplex(rng.normal(size=4))
        assert w @ Q @ w - 2 * c @ w + const == pytest.approx(loop_weighted_brier(P, w, f), abs=1e-14)
    assert np.linalg.eigvalsh(Q).min() >= -1e-10


# simplex projection

@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
@settings(max_examples=200, deadline=None)
def test_projection_is_the_nearest_simplex_point(v):
    v = np.array(v)
    p = project_simplex(v)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12
    # optimality: v - p is a multiple of 1 on the support and no larger off it
    d = v - p
    S = p > 0
    assert np.ptp(d[S]) <= 1e-12
    if (~S).any():
        assert np.all(d[~S] <= d[S][0] + 1e-12)


# solver

def test_single_model():
    f, P = random_instance(np.random.default_rng(3), K=1)
    sol = solve_weights(matrix_for(f, P), f)
    assert sol.weights.tolist() == [1.0]
    assert sol.objective == pytest.approx(brier(P[:, 0], f), abs=1e-15)


def test_perfect_vertex():
    f = nocens_frame()
    D = f.D.astype(float)
    sol = solve_weights(matrix_for(f, np.column_stack([D, 1 - D])), f)
    assert sol.weights.tolist() == [1.0, 0.0]
    assert sol.objective == pytest.approx(0.0, abs=1e-15)


def test_random_censored_instance_against_grid():
    f, P = random_instance(np.random.default_rng(4), n=40, K=3)
    sol = solve_weights(matrix_for(f, P), f)
    assert sol.objective <= grid_minimum(P, f) + 1e-6
    assert sol.objective == pytest.approx(weighted_brier(matrix_for(f, P), sol.weights, f), abs=1e-12)


@given(st.integers(0, 100_000), st.integers(2, 10), st.integers(20, 200))
@settings(max_examples=80, deadline=None)
def test_solver_certificates(seed, K, n):
    rng = np.random.default_rng(seed)
    f, P = random_instance(rng, n=n, K=K)
    m = matrix_for(f, P)
    sol = solve_weights(m, f)
    w = sol.weights
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-8
    Q, c, _ = _quadratic(P, f)
    assert kkt_residual(Q, c, w)[0] <= 1e-7
    assert sol.kkt_residual <= 1e-7
    assert sol.objective <= min(brier(P[:, k], f) for k in range(K)) + 1e-10
    if K <= 3:
        assert sol.objective <= grid_minimum(P, f) + 1e-6


def test_collinear_columns_are_deterministic():
    f, P = random_instance(np.random.default_rng(5), K=2)
    P3 = np.column_stack([P, P[:, 0]])
    a = solve_weights(matrix_for(f, P3), f)
    b = solve_weights(matrix_for(f, P3), f)
    assert np.array_equal(a.weights, b.weights)
    # the ridge splits mass equally between the duplicated columns
    assert a.weights[0] == pytest.approx(a.weights[2], abs=1e-6)


def test_solver_errors():
    f = ipcw_frame(surv([0.5, 1.0, 3.0], [0, 0, 1]), 0.0, 2.0)
    assert np.all(f.weights[:2] == 0)
    zero = type(f)(f.landmark, f.window, f.subject_ids[:2], f.observed_time[:2], f.event[:2], f.D[:2],
                   f.weights[:2], f.G_window)
    m = PredictionMatrix(0.0, 2.0, zero.subject_ids, ("a", "b"), np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(AveragingError, match="zero"):
        solve_weights(m, zero)


def test_matrix_validation():
    with pytest.raises(AveragingError):
        PredictionMatrix(0, 1, ("a",), ("m",), np.array([[1.5]]), np.zeros((1, 1)))
    with pytest.raises(AveragingError):
        PredictionMatrix(0, 1, ("a", "b"), ("m",), np.array([[0.5]]), np.zeros((1, 1)))


# averaged predictions

def test_ma_predict_examples():
    f = nocens_frame(2)
    m = matrix_for(f, [[0.2, 0.6], [0.4, 0.8]])
    pts = [p.point for p in ma_predict(m, WeightSolution(np.array([0.5, 0.5]), 0.0, 0.0, 0))]
    assert pts == pytest.approx([0.4, 0.6], abs=1e-15)
    pts = [p.point for p in ma_predict(m, WeightSolution(np.array([0.0, 1.0]), 0.0, 0.0, 0))]
    assert pts == [0.6, 0.8]


def test_standard_error_hand_example():
    f = nocens_frame(1)
    m = matrix_for(f, [[0.3, 0.5]], [[0.01, 0.04]])
    (p,) = ma_standard_errors(m, WeightSolution(np.array([0.5, 0.5]), 0.0, 0.0, 0))
    assert abs(p.point - 0.4) <= 1e-12
    assert abs(p.se_buckland - (0.5 * math.sqrt(0.02) + 0.5 * math.sqrt(0.05))) <= 1e-12
    assert abs(p.se_burnham - math.sqrt(0.035)) <= 1e-12
    assert p.se_buckland == pytest.approx(0.1825, abs=5e-5)
    assert p.se_burnham == pytest.approx(0.1871, abs=5e-5)


def test_standard_errors_degenerate_cases():
    f = nocens_frame(3)
    v = 0.0123
    m = matrix_for(f, np.full((3, 4), 0.3), np.full((3, 4), v))
    for p in ma_standard_errors(m, WeightSolution(np.array([0.1, 0.2, 0.3, 0.4]), 0.0, 0.0, 0)):
        assert p.se_buckland == math.sqrt(v) and p.se_burnham == math.sqrt(v)
    m1 = matrix_for(f, [[0.1], [0.2], [0.3]], [[0.04], [0.09], [0.01]])
    ses = [p.se_buckland for p in ma_standard_errors(m1, WeightSolution(np.ones(1), 0.0, 0.0, 0))]
    assert ses == pytest.approx([0.2, 0.3, 0.1], abs=1e-15)


def test_negative_variance_is_clamped():
    f = nocens_frame(1)
    m = matrix_for(f, [[0.3, 0.3]], [[-1e-18, 0.04]])
    with pytest.warns(RuntimeWarning, match="clamped"):
        (p,) = ma_standard_errors(m, WeightSolution(np.array([0.5, 0.5]), 0.0, 0.0, 0))
    assert p.se_buckland == pytest.approx(0.1, abs=1e-15)


@given(st.integers(0, 100_000), st.integers(1, 8))
@settings(max_examples=100, deadline=None)
def test_se_ordering_and_convex_combination(seed, K):
    rng = np.random.default_rng(seed)
    P, V = rng.random((10, K)), 0.01 * rng.random((10, K))
    w = project_simplex(rng.normal(size=K))
    f = ipcw_frame(surv(np.arange(1, 11, dtype=float), np.ones(10)), 0.0, 5.0)
    out = ma_standard_errors(matrix_for(f, P, V), WeightSolution(w, 0.0, 0.0, 0))
    for i, p in enumerate(out):
        assert p.se_burnham >= p.se_buckland - 1e-15 >= -1e-15
        assert P[i].min() - 1e-15 <= p.point <= P[i].max() + 1e-15


# files

def test_output_files(tmp_path):
    f, P = random_instance(np.random.default_rng(6), K=2)
    m = matrix_for(f, P, 0.001 * np.ones_like(P))
    sol = solve_weights(m, f)
    write_weights(tmp_path / "weights.json", [(0.3, 1.5, sol)])
    (entry,) = json.loads((tmp_path / "weights.json").read_text())
    assert entry["model_ids"] == ["M1", "M2"] and entry["weights"] == sol.weights.tolist()
    assert {"objective", "kkt_residual", "hash"} <= set(entry)
    write_ma_predictions(tmp_path / "ma.csv", [(0.3, 1.5, ma_standard_errors(m, sol))])
    lines = (tmp_path / "ma.csv").read_text().splitlines()
    assert lines[0] == "subject_id,s,t,pi_hat,se_buckland,se_burnham"
    assert len(lines) == 1 + f.n_at_risk
