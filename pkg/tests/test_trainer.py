import csv

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from conftest import central_differences, random_topology
from tsdcn.errors import DegenerateMatrix, RankDeficient, StepFailure
from tsdcn.forward import predict
from tsdcn.model import ModelTopology, NetworkWeights, TimeSeriesSample
from tsdcn.trainer import (TrainingConfig, TrainState, constraint_jacobian, constraint_pairs,
                           constraint_values, grad_weights, init_weights,
                           negative_log_likelihood, restore_orthogonality, solve_kkt,
                           teacher_vector, train, update_step, write_train_log)
from tsdcn.tsdca import encode_tsdca_params, random_tsdca_params


def labelled(rng, top, n_per_class=2, T=3, scale=1.0):
    return [TimeSeriesSample(scale * rng.normal(size=(top.D, T)), label=c + 1)
            for c in range(top.C) for _ in range(n_per_class)]


def W_from_V(V, mu_row=None):
    V = np.asarray(V, dtype=float)
    W = np.zeros((V.shape[0] + 1, V.shape[1]))
    W[1:] = V
    if mu_row is not None:
        W[0] = mu_row
    return W


def kkt_residual(g, jac, h, d, lam):
    n = len(g)
    A = np.block([[np.eye(n), jac.T], [jac, np.zeros((len(h), len(h)))]])
    return np.abs(A @ np.concatenate([d, lam]) + np.concatenate([g, h])).max()


# -- loss -------------------------------------------------------------------------

def bias_only(posterior):
    top = ModelTopology.uniform(len(posterior), 1, 1, 1, 1)
    W = np.zeros((top.U, 2, 1))
    W[:, 1, 0] = 1.0
    Wp = np.zeros((top.P, 2))
    with np.errstate(divide="ignore"):
        Wp[:, 0] = np.log(posterior)
    return NetworkWeights(top, W, Wp)


def test_loss_zero_for_certain_correct_prediction():
    w = bias_only([0.0, 1.0])
    assert negative_log_likelihood(w, [TimeSeriesSample([[0.3]], label=2)]) == pytest.approx(0.0)


def test_loss_of_uniform_posterior():
    w = bias_only([1 / 3] * 3)
    assert negative_log_likelihood(w, [TimeSeriesSample([[0.3]], label=1)]) == pytest.approx(np.log(3))


def test_loss_sums_over_samples():
    w = bias_only([0.5, 0.25, 0.25])
    data = [TimeSeriesSample([[0.0]], label=1), TimeSeriesSample([[1.0]], label=3)]
    assert negative_log_likelihood(w, data) == pytest.approx(3 * np.log(2), rel=1e-12)


def test_loss_accepts_teacher_vectors():
    w = bias_only([0.5, 0.25, 0.25])
    data = [(TimeSeriesSample([[0.0]]), teacher_vector(2, 3))]
    assert negative_log_likelihood(w, data) == pytest.approx(np.log(4))


def test_loss_floors_zero_posterior():
    w = bias_only([0.0, 1.0])
    J = negative_log_likelihood(w, [TimeSeriesSample([[0.0]], label=1)])
    assert J == pytest.approx(-np.log(1e-300))


def test_teacher_vector():
    np.testing.assert_array_equal(teacher_vector(2, 3), [0, 1, 0])
    with pytest.raises(ValueError):
        teacher_vector(4, 3)


# -- gradients --------------------------------------------------------------------

def assert_grad_matches(w, data):
    gW, gWp = grad_weights(w, data)
    f = lambda: negative_log_likelihood(w, data)
    for analytic, array in ((gW, w.W), (gWp, w.Wp)):
        numeric = central_differences(f, array, step=1e-6)
        err = np.abs(analytic - numeric)
        ok = (err <= 1e-4 * np.abs(numeric)) | (err <= 1e-8 * max(1.0, abs(f())))
        assert ok.all(), f"max abs err {err.max():.3g}"


def test_gradient_smallest_instance():
    rng = np.random.default_rng(0)
    top = ModelTopology.uniform(2, 1, 1, 2, 1)
    w = encode_tsdca_params(random_tsdca_params(top, rng))
    assert_grad_matches(w, labelled(rng, top, n_per_class=1, T=2))


@pytest.mark.parametrize("seed", range(8))
def test_gradient_random_instances(seed):
    rng = np.random.default_rng(50 + seed)
    top = random_topology(rng, C_max=3, D_max=4, Dp_max=2, K_max=2, M_max=2)
    w = encode_tsdca_params(random_tsdca_params(top, rng))
    w.Wp += rng.normal(scale=0.2, size=w.Wp.shape)
    assert_grad_matches(w, labelled(rng, top, n_per_class=1, T=int(rng.integers(1, 4))))


def test_gradient_with_mixed_lengths():
    rng = np.random.default_rng(9)
    top = ModelTopology.uniform(2, 2, 1, 2, 1)
    w = encode_tsdca_params(random_tsdca_params(top, rng))
    data = labelled(rng, top, 1, T=2) + labelled(rng, top, 1, T=3)
    assert_grad_matches(w, data)


def test_unused_input_dimension_has_zero_gradient():
    rng = np.random.default_rng(10)
    top = ModelTopology.uniform(2, 2, 2, 3, 2)
    w = encode_tsdca_params(random_tsdca_params(top, rng))
    data = labelled(rng, top, 2, T=3)
    for s in data:
        s.series[1] = 0.0
    gW, _ = grad_weights(w, data)
    assert np.all(gW[:, 2, :] == 0.0)
    assert np.any(gW[:, 1, :] != 0.0)


def test_symmetric_point_balanced_data_gives_equal_class_bias_gradients():
    rng = np.random.default_rng(11)
    top = ModelTopology.uniform(3, 2, 2, 2, 1)
    base = init_weights(top, 1)
    nW, nP = top.U // 3, top.P // 3
    w = NetworkWeights(top, np.tile(base.W[:nW], (3, 1, 1)), np.tile(base.Wp[:nP], (3, 1)))
    _, gWp = grad_weights(w, labelled(rng, top, n_per_class=3, T=4))
    unit_class = top.comp_class[top.unit_comp]
    per_class = [gWp[unit_class == c, 0].sum() for c in range(3)]
    np.testing.assert_allclose(per_class, per_class[0], atol=1e-10)
    np.testing.assert_allclose(per_class, 0.0, atol=1e-10)


# -- constraints --------------------------------------------------------------------

def test_constraint_order():
    j, l = constraint_pairs(3)
    one_based = [(a + 1, b + 1) for a, b in zip(j, l)]
    assert one_based == [(1, 1), (1, 2), (2, 2), (1, 3), (2, 3), (3, 3)]
    for i, (a, b) in enumerate(one_based, start=1):
        assert (b - 1) * b // 2 + a == i


def test_identity_columns_are_feasible():
    np.testing.assert_array_equal(constraint_values(W_from_V(np.eye(4)[:, :3])), np.zeros(6))


def test_duplicate_unit_columns():
    v = np.array([0.6, 0.8, 0.0])
    np.testing.assert_allclose(constraint_values(W_from_V(np.stack([v, v], axis=1))), [0, 1, 0],
                               atol=1e-15)


def test_constraints_ignore_mean_row():
    V = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_array_equal(constraint_values(W_from_V(V)),
                                  constraint_values(W_from_V(V, mu_row=[5.0, -2.0])))


def test_single_constraint_jacobian():
    v = np.array([1.0, 0.0, 0.0])
    jac = constraint_jacobian(W_from_V(v[:, None]))
    np.testing.assert_array_equal(jac, [[0.0, 2.0, 0.0, 0.0]])


@pytest.mark.parametrize("shape", [(3, 1), (4, 2), (5, 3)])
def test_jacobian_matches_finite_differences(shape):
    rng = np.random.default_rng(shape[0])
    W = W_from_V(rng.normal(size=shape), mu_row=rng.normal(size=shape[1]))
    jac = constraint_jacobian(W)
    for i in range(jac.shape[0]):
        fd = central_differences(lambda: constraint_values(W)[i], W, step=1e-6).ravel()
        np.testing.assert_allclose(jac[i], fd, atol=1e-7)
    assert np.all(jac.reshape(jac.shape[0], *W.shape)[:, 0, :] == 0.0)


def test_batched_constraints_match_single():
    rng = np.random.default_rng(3)
    Ws = rng.normal(size=(4, 5, 2))
    np.testing.assert_array_equal(constraint_values(Ws)[2], constraint_values(Ws[2]))
    np.testing.assert_array_equal(constraint_jacobian(Ws)[1], constraint_jacobian(Ws[1]))


# -- KKT ------------------------------------------------------------------------------

def test_kkt_feasible_and_tangent_gradient():
    W = W_from_V(np.eye(3)[:, :1])
    jac = constraint_jacobian(W)
    g = np.array([0.3, 0.0, 1.0, -2.0])      # no component along v_1
    d, lam = solve_kkt(g, jac, constraint_values(W))
    np.testing.assert_allclose(lam, 0.0, atol=1e-15)
    np.testing.assert_allclose(d, -g, atol=1e-15)


def test_kkt_single_constraint_closed_form():
    rng = np.random.default_rng(4)
    W = W_from_V(rng.normal(size=(3, 1)))
    jac, h = constraint_jacobian(W), constraint_values(W)
    g = rng.normal(size=4)
    d, lam = solve_kkt(g, jac, h)
    a = jac[0]
    assert lam[0] == pytest.approx((h[0] - a @ g) / (a @ a), rel=1e-12)
    np.testing.assert_allclose(d, -g - a * lam[0], rtol=1e-12)


def test_kkt_duplicated_row_is_rank_deficient():
    rng = np.random.default_rng(5)
    W = W_from_V(np.linalg.qr(rng.normal(size=(4, 2)))[0])
    jac, h = constraint_jacobian(W), constraint_values(W)
    with pytest.raises(RankDeficient):
        solve_kkt(rng.normal(size=jac.shape[1]), np.vstack([jac, jac[:1]]), np.append(h, h[0]))


def test_kkt_zero_column_is_rank_deficient():
    V = np.eye(3)[:, :2].copy()
    V[:, 1] = 0.0
    W = W_from_V(V)
    with pytest.raises(RankDeficient):
        solve_kkt(np.ones(W.size), constraint_jacobian(W), constraint_values(W))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_kkt_block_residual(D, Dp, seed):
    Dp = min(Dp, D)
    rng = np.random.default_rng(seed)
    W = W_from_V(np.linalg.qr(rng.normal(size=(D, Dp)))[0] + 0.05 * rng.normal(size=(D, Dp)),
                 mu_row=rng.normal(size=Dp))
    jac, h = constraint_jacobian(W), constraint_values(W)
    g = rng.normal(scale=10.0, size=W.size)
    d, lam = solve_kkt(g, jac, h)
    assert kkt_residual(g, jac, h, d, lam) <= 1e-9 * (1 + np.linalg.norm(g))


# -- restoration ------------------------------------------------------------------------

def test_restore_fixed_point():
    rng = np.random.default_rng(6)
    W = W_from_V(np.linalg.qr(rng.normal(size=(5, 3)))[0], mu_row=rng.normal(size=3))
    np.testing.assert_allclose(restore_orthogonality(W), W, atol=1e-14)


def test_restore_removes_scale():
    rng = np.random.default_rng(7)
    Q = np.linalg.qr(rng.normal(size=(4, 2)))[0]
    out = restore_orthogonality(W_from_V(1.01 * Q, mu_row=[1.0, 2.0]))
    np.testing.assert_allclose(out[1:], Q, atol=1e-14)
    np.testing.assert_array_equal(out[0], [1.0, 2.0])


def test_restore_rejects_duplicate_columns():
    v = np.array([1.0, 2.0, 2.0]) / 3
    with pytest.raises(DegenerateMatrix):
        restore_orthogonality(W_from_V(np.stack([v, v], axis=1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_restore_is_polar_factor_and_idempotent(D, Dp, seed):
    Dp = min(Dp, D)
    rng = np.random.default_rng(seed)
    V = np.linalg.qr(rng.normal(size=(D, Dp)))[0] + 0.1 * rng.normal(size=(D, Dp)) / np.sqrt(D)
    once = restore_orthogonality(W_from_V(V))
    twice = restore_orthogonality(once)
    polar = scipy.linalg.polar(V)[0]
    np.testing.assert_allclose(once[1:], polar, atol=1e-12)
    np.testing.assert_allclose(twice, once, atol=1e-13)
    assert np.abs(constraint_values(once)).max() <= 1e-12


# -- update and training ------------------------------------------------------------------

def test_update_at_stationary_point_keeps_weights():
    rng = np.random.default_rng(8)
    top = ModelTopology.uniform(2, 2, 1, 3, 2)
    base = init_weights(top, 3)
    n = top.U // 2
    w = NetworkWeights(top, np.tile(base.W[:n], (2, 1, 1)), np.tile(base.Wp[:top.P // 2], (2, 1)))
    series = [rng.normal(size=(3, 4)) for _ in range(3)]
    data = [TimeSeriesSample(s, label=c) for s in series for c in (1, 2)]
    new, rec = update_step(w, data, TrainingConfig(learning_rate=0.1))
    np.testing.assert_allclose(new.W, w.W, atol=1e-8)
    np.testing.assert_allclose(new.Wp, w.Wp, atol=1e-8)
    assert rec.backtracks == 0


@pytest.mark.parametrize("seed", range(3))
def test_update_decreases_loss_and_stays_feasible(seed):
    rng = np.random.default_rng(seed)
    top = ModelTopology.uniform(2, 2, 2, 3, 2)
    w = init_weights(top, seed)
    data = labelled(rng, top, 3, T=4)
    J0 = negative_log_likelihood(w, data)
    new, rec = update_step(w, data, TrainingConfig(learning_rate=0.05))
    assert rec.J < J0
    assert rec.J == pytest.approx(negative_log_likelihood(new, data), rel=1e-12)
    assert new.orth_residual() <= 1e-8 and rec.h_inf <= 1e-8


def test_update_reports_failure_when_no_step_helps(monkeypatch):
    import tsdcn.trainer as tr
    rng = np.random.default_rng(12)
    top = ModelTopology.uniform(2, 1, 1, 2, 1)
    w = init_weights(top, 0)
    data = labelled(rng, top, 2, T=2)
    # flip the gradient so every trial step goes uphill
    real = tr._grad
    monkeypatch.setattr(tr, "_grad", lambda *a: tuple(-g for g in real(*a)))
    with pytest.raises(StepFailure) as info:
        update_step(w, data, TrainingConfig(learning_rate=0.1), TrainState(iteration=4))
    assert info.value.iteration == 5


def test_train_separable_toy():
    top = ModelTopology.uniform(2, 1, 1, 1, 1)
    data = [TimeSeriesSample([[-1.0]], label=1), TimeSeriesSample([[1.0]], label=2)]
    w, records = train(init_weights(top, 0), data,
                       TrainingConfig(learning_rate=0.2, max_iter=3000, loss_tol=1e-10))
    x = np.array([[[-1.0]], [[1.0]]])
    np.testing.assert_array_equal(predict(w, x), [1, 2])
    assert records[-1].J < 0.1


def test_train_trace_monotone_and_feasible():
    rng = np.random.default_rng(13)
    top = ModelTopology.uniform(3, 2, 2, 4, 2)
    data = labelled(rng, top, 3, T=5)
    _, records = train(init_weights(top, 2), data, TrainingConfig(learning_rate=0.05, max_iter=60))
    J = np.array([r.J for r in records])
    assert np.all(np.diff(J) <= 1e-9)
    assert max(r.h_inf for r in records) <= 1e-8


def test_train_stops_on_small_change():
    rng = np.random.default_rng(14)
    top = ModelTopology.uniform(2, 1, 1, 2, 1)
    _, records = train(init_weights(top, 0), labelled(rng, top, 2, T=2),
                       TrainingConfig(learning_rate=0.05, max_iter=5000, loss_tol=1e-3))
    assert len(records) < 5000
    assert abs(records[-1].J - records[-2].J) < 1e-3


def test_train_rejects_infeasible_start():
    top = ModelTopology.uniform(2, 1, 1, 2, 1)
    w = init_weights(top, 0)
    w.W[0, 1:] *= 2
    with pytest.raises(ValueError):
        train(w, [TimeSeriesSample([[0.0], [1.0]], label=1)], TrainingConfig())


def test_terminal_attractor_scales_rate():
    rng = np.random.default_rng(15)
    top = ModelTopology.uniform(2, 1, 1, 2, 1)
    w = init_weights(top, 0)
    data = labelled(rng, top, 2, T=2)
    J0 = negative_log_likelihood(w, data)
    _, rec = update_step(w, data, TrainingConfig(learning_rate=1e-3, terminal_attractor=True))
    assert rec.gamma == pytest.approx(1e-3 * np.sqrt(J0) / 2 ** rec.backtracks)


def test_frozen_projection_keeps_V():
    rng = np.random.default_rng(16)
    top = ModelTopology.uniform(2, 1, 2, 2, 2)
    w = init_weights(top, 0)
    w.W[:, 1:, :] = np.eye(2)
    new, _ = train(w, labelled(rng, top, 2, T=3),
                   TrainingConfig(learning_rate=0.05, max_iter=20, freeze_projection=True))
    np.testing.assert_array_equal(new.W[:, 1:, :], w.W[:, 1:, :])
    assert not np.array_equal(new.W[:, 0, :], w.W[:, 0, :])


def test_init_weights():
    top = ModelTopology(2, [2, 1], [[1, 2], [3]], D=5, Dp=3)
    a, b, c = init_weights(top, 7), init_weights(top, 7), init_weights(top, 8)
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.Wp, b.Wp)
    assert not np.array_equal(a.W, c.W)
    assert a.orth_residual() <= 1e-12
    assert np.all(a.W[:, 0, :] == 0.0)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"lr": 0.1})
    cfg = TrainingConfig(learning_rate=0.3, terminal_attractor=True)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


def test_train_log_csv(tmp_path):
    rng = np.random.default_rng(17)
    top = ModelTopology.uniform(2, 1, 1, 2, 1)
    _, records = train(init_weights(top, 0), labelled(rng, top, 2, T=2),
                       TrainingConfig(learning_rate=0.05, max_iter=5))
    path = tmp_path / "log.csv"
    write_train_log(records, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "J", "h_inf", "gamma", "backtracks"]
    assert len(rows) == len(records) + 1
    assert float(rows[-1][1]) == records[-1].J
