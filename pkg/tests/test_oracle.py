"""Tests for the exact Gaussian law and its KL machinery."""

import math

import numpy as np
import pytest

from sgldlab.estimators import empirical_gen_gap
from sgldlab.losses import make_quadratic
from sgldlab.oracle import (
    GaussianState,
    KLRecursionReport,
    OracleTrace,
    _response_and_var,
    gaussian_kl,
    oracle_mi_upper,
    oracle_trace,
    ou_step,
    verify_kl_recursion,
)
from sgldlab.sgld import SGLDConfig, run_ensemble


def full_batch_cfg(**kw):
    base = dict(eta=0.05, beta=4.0, k=20, n=20, T=400, d=2, s_sq=1.0, seed=808)
    base.update(kw)
    return SGLDConfig(**base)


# ------------------------------------------------------------- GaussianState


def test_state_validation():
    GaussianState(mean=np.zeros(2), var=0.0, t=0)  # degenerate start allowed
    with pytest.raises(ValueError):
        GaussianState(mean=np.zeros(2), var=0.0, t=1)
    with pytest.raises(ValueError):
        GaussianState(mean=np.zeros((2, 2)), var=1.0, t=0)
    with pytest.raises(ValueError):
        GaussianState(mean=np.zeros(2), var=1.0, t=-1)


# ------------------------------------------------------------------- ou_step


def test_ou_step_fixed_point_mean():
    zbar = np.array([0.3, -0.7])
    state = GaussianState(mean=zbar.copy(), var=1.0, t=0)
    out = ou_step(state, eta=0.05, beta=4.0, R=1.0, zbar=zbar)
    np.testing.assert_allclose(out.mean, zbar, rtol=0, atol=0)
    assert out.t == 1


def test_ou_step_noise_floor_from_zero_var():
    state = GaussianState(mean=np.zeros(2), var=0.0, t=0)
    out = ou_step(state, eta=0.05, beta=4.0, R=1.0, zbar=np.zeros(2))
    assert out.var == 2.0 * 0.05 / 4.0


def test_ou_step_stationary_variance_algebra():
    eta, beta, R = 0.05, 4.0, 1.0
    v_geo = (2.0 * eta / beta) / (1.0 - (1.0 - eta * R) ** 2)
    v_closed = 1.0 / (beta * R * (1.0 - eta * R / 2.0))
    assert v_geo == pytest.approx(v_closed, rel=1e-14)
    state = GaussianState(mean=np.zeros(1), var=v_geo, t=3)
    out = ou_step(state, eta, beta, R, np.zeros(1))
    assert out.var == pytest.approx(v_geo, rel=1e-14)
    # small-step limit recovers the equilibrium variance 1/(beta R)
    assert 1.0 / (beta * R * (1.0 - 1e-9 * R / 2.0)) == pytest.approx(
        1.0 / (beta * R), rel=1e-8
    )


def test_ou_step_divergence_warns_but_computes():
    state = GaussianState(mean=np.ones(1), var=1.0, t=0)
    with pytest.warns(RuntimeWarning):
        out = ou_step(state, eta=2.5, beta=4.0, R=1.0, zbar=np.zeros(1))
    assert out.mean[0] == (1.0 - 2.5) * 1.0


def test_ou_step_shape_and_parameter_errors():
    state = GaussianState(mean=np.zeros(2), var=1.0, t=0)
    with pytest.raises(ValueError):
        ou_step(state, eta=0.05, beta=4.0, R=1.0, zbar=np.zeros(3))
    with pytest.raises(ValueError):
        ou_step(state, eta=-0.05, beta=4.0, R=1.0, zbar=np.zeros(2))


# --------------------------------------------------------------- gaussian_kl


def test_kl_identical_states_zero():
    p = GaussianState(mean=np.array([0.2, 0.4]), var=0.7, t=2)
    assert gaussian_kl(p, p) == 0.0


def test_kl_frozen_unit_mean_shift():
    p = GaussianState(mean=np.array([0.0]), var=1.0, t=1)
    q = GaussianState(mean=np.array([1.0]), var=1.0, t=1)
    assert gaussian_kl(p, q) == pytest.approx(0.5, rel=1e-14)


def test_kl_frozen_variance_mismatch():
    p = GaussianState(mean=np.array([0.0]), var=1.0, t=1)
    q = GaussianState(mean=np.array([0.0]), var=2.0, t=1)
    expect = (math.log(2.0) - 0.5) / 2.0
    assert gaussian_kl(p, q) == pytest.approx(expect, rel=1e-14)


def test_kl_errors():
    p = GaussianState(mean=np.zeros(1), var=1.0, t=1)
    q2 = GaussianState(mean=np.zeros(2), var=1.0, t=1)
    with pytest.raises(ValueError):
        gaussian_kl(p, q2)
    degenerate = GaussianState(mean=np.zeros(1), var=0.0, t=0)
    with pytest.raises(ValueError):
        gaussian_kl(p, degenerate)


# -------------------------------------------------------------- oracle trace


def test_oracle_trace_requires_full_batch():
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    ds = model.sample_data(np.random.default_rng(0), 20)
    cfg = full_batch_cfg(k=10)
    with pytest.raises(ValueError):
        oracle_trace(ds, ds, cfg, R=1.0)


def test_oracle_trace_kl_plateau_matches_stationary_formula():
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    rng = np.random.default_rng(42)
    S = model.sample_data(rng, 20)
    S_alt = model.sample_data(rng, 20)
    cfg = full_batch_cfg(T=1000)
    tr = oracle_trace(S, S_alt, cfg, R=1.0)
    assert tr.kl[0] == 0.0
    gap_sq = float(np.sum((S.mean(axis=0) - S_alt.mean(axis=0)) ** 2))
    sigma_inf_sq = 1.0 / (cfg.beta * 1.0 * (1.0 - cfg.eta * 1.0 / 2.0))
    plateau = gap_sq / (2.0 * sigma_inf_sq)
    assert tr.kl[-1] == pytest.approx(plateau, rel=1e-10)
    # increments die out: the trace is uniformly bounded and converges
    diffs = np.abs(np.diff(tr.kl))
    assert diffs[-1] < 1e-12 * max(1.0, tr.kl[-1])
    assert tr.kl.max() <= plateau * (1.0 + 1e-9)


def test_oracle_matches_ensemble_moments():
    # exact mean/variance recursions against a 1000-chain ensemble at
    # several stored steps, full-batch quadratic on one fixed dataset
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    ds = model.sample_data(np.random.default_rng(9), 20)
    cfg = full_batch_cfg(T=500, seed=515)
    traces = run_ensemble(cfg, model, dataset_sampler=lambda rng, m: ds,
                          n_chains=1000)
    a, v = _response_and_var(cfg.eta, cfg.beta, 1.0, cfg.s_sq, cfg.T)
    zbar = ds.mean(axis=0)
    states = np.stack([tr.states for tr in traces])  # (chains, steps, d)
    stored = traces[0].stored_steps
    for row in (0, 10, 100, 500):
        t = int(stored[row])
        X = states[:, row, :]
        mean_se = math.sqrt(v[t] / X.shape[0]) if v[t] > 0 else 0.0
        np.testing.assert_allclose(
            X.mean(axis=0), a[t] * zbar, atol=max(3.0 * mean_se, 1e-12)
        )
        if t > 0:
            var_emp = X.var(axis=0, ddof=1)
            var_se = v[t] * math.sqrt(2.0 / (X.shape[0] - 1))
            np.testing.assert_allclose(var_emp, v[t], atol=3.0 * var_se)


# ----------------------------------------------------------- oracle_mi_upper


def test_mi_identical_control_is_exact_zero():
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    cfg = full_batch_cfg(T=100)
    est = oracle_mi_upper(model.sample_data, cfg, R=1.0, n_dataset_pairs=12,
                          control_identical=True)
    assert est.mean == 0.0
    assert est.stderr == 0.0


def test_mi_requires_full_batch():
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    with pytest.raises(ValueError):
        oracle_mi_upper(model.sample_data, full_batch_cfg(k=5), R=1.0,
                        n_dataset_pairs=4)


def test_mi_bounded_in_T():
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    a = oracle_mi_upper(model.sample_data, full_batch_cfg(T=10_000), R=1.0,
                        n_dataset_pairs=300)
    b = oracle_mi_upper(model.sample_data, full_batch_cfg(T=100_000), R=1.0,
                        n_dataset_pairs=300)
    joint = math.hypot(a.stderr, b.stderr)
    assert abs(a.mean - b.mean) <= 3.0 * joint


def test_mi_scales_like_one_over_n():
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    small = oracle_mi_upper(model.sample_data, full_batch_cfg(n=25, k=25), R=1.0,
                            n_dataset_pairs=400)
    large = oracle_mi_upper(model.sample_data, full_batch_cfg(n=100, k=100), R=1.0,
                            n_dataset_pairs=400)
    ratio = small.mean / large.mean
    rel_se = math.hypot(small.stderr / small.mean, large.stderr / large.mean)
    assert abs(ratio - 4.0) <= 3.0 * ratio * rel_se


def test_gen_gap_within_mi_bound_chain():
    # the information-theoretic chain: empirical gap of the bounded
    # surrogate loss vs sqrt(2 sigma_g^2 MI / n) with sigma_g^2 = 1/4
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    cfg = full_batch_cfg(n=25, k=25, T=400, seed=99)
    mi = oracle_mi_upper(model.sample_data, cfg, R=1.0, n_dataset_pairs=400)
    gap = empirical_gen_gap(model, None, cfg, n_trials=30, eval_loss="surrogate")
    bound = math.sqrt(2.0 * 0.25 * mi.mean / cfg.n)
    bound_se = bound * mi.stderr / (2.0 * mi.mean)
    assert gap.mean <= bound + 3.0 * math.hypot(gap.stderr, bound_se)


# ------------------------------------------------------- verify_kl_recursion


def test_recursion_all_zero_trace_satisfied():
    rep = verify_kl_recursion(np.zeros(50), contraction=math.exp(-0.01), per_step_add=0.0)
    assert rep.n_violations == 0
    assert rep.worst_slack == 0.0
    assert len(rep.satisfied) == 49


def test_recursion_zero_violations_on_exact_oracle():
    # strongly convex constants: contraction e^{-eta R / 4}, additive term
    # eta (beta/2) sup_t E||grad gap||^2 = eta (beta/2) R^2 ||zbar gap||^2
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    rng = np.random.default_rng(1234)
    S = model.sample_data(rng, 100)
    S_alt = model.sample_data(rng, 100)
    cfg = SGLDConfig(eta=0.01, beta=4.0, k=100, n=100, T=10_000, d=2,
                     s_sq=0.1, seed=0)
    tr = oracle_trace(S, S_alt, cfg, R=1.0)
    gap_sq = float(np.sum((S.mean(axis=0) - S_alt.mean(axis=0)) ** 2))
    rep = verify_kl_recursion(
        tr.kl,
        contraction=math.exp(-cfg.eta * 1.0 / 4.0),
        per_step_add=cfg.eta * (cfg.beta / 2.0) * 1.0**2 * gap_sq,
    )
    assert rep.n_violations == 0
    assert rep.worst_slack >= 0.0


def test_recursion_falsification_control():
    rising = np.arange(5.0)
    rep = verify_kl_recursion(rising, contraction=1.0, per_step_add=0.0)
    assert rep.n_violations == 4
    assert rep.satisfied == (False, False, False, False)
    assert rep.worst_slack == -1.0


def test_recursion_short_trace_and_validation():
    rep = verify_kl_recursion([1.0], contraction=1.0, per_step_add=0.0)
    assert rep.satisfied == () and rep.n_violations == 0
    with pytest.raises(ValueError):
        verify_kl_recursion([[1.0, 2.0]], contraction=1.0, per_step_add=0.0)
    with pytest.raises(ValueError):
        verify_kl_recursion([1.0, 2.0], contraction=-0.5, per_step_add=0.0)


def test_recursion_report_dict_roundtrip():
    rep = verify_kl_recursion([0.0, 0.1, 0.15], contraction=1.0, per_step_add=0.2)
    d = rep.to_dict()
    assert d["n_violations"] == 0 and len(d["satisfied"]) == 2


# ------------------------------------------------------------------------ CSV


def test_oracle_trace_csv_roundtrip(tmp_path):
    model = make_quadratic(R=1.0, data_radius=1.0, d=2)
    rng = np.random.default_rng(3)
    S = model.sample_data(rng, 10)
    S_alt = model.sample_data(rng, 10)
    cfg = full_batch_cfg(n=10, k=10, T=5)
    tr = oracle_trace(S, S_alt, cfg, R=1.0)
    path = tmp_path / "oracle.csv"
    tr.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,mean_norm,var,kl"
    assert len(lines) == 7
    cells = lines[-1].split(",")
    assert int(cells[0]) == 5
    assert float(cells[2]) == pytest.approx(tr.var[-1], rel=0)
    assert float(cells[3]) == pytest.approx(tr.kl[-1], rel=0)
