import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rclab import autodiff as ad
from rclab.bounds import (CompositeHarness, QuadraticHarness, audit_draw, class_conditional_stats,
                          conditional_weights, contraction_check, contraction_rate, da_reduction_check,
                          domain_features, episode_report, lipschitz_label_penalty, mixture_bound_report,
                          random_psd, random_spd, support_weights, theorem1_report, write_bound_reports)
from rclab.data import DomainDataset
from rclab.errors import ContractError
from rclab.losses import CentroidTable, DaMaskPolicy, da_loss_features
from rclab.model import ModelConfig, init_params, per_sample_ce
from oracles import centroid_loop, identity_terms


def small_dataset(seed=0, K=3, C=2, n=12, d=3):
    rng = np.random.default_rng(seed)
    X = [rng.standard_normal((n, d)) + k for k in range(K)]
    y = [np.arange(n) % C for _ in range(K)]
    return DomainDataset([f"d{k}" for k in range(K)], X, y, C)


def collapsed_params(d=3, C=2):
    cfg = ModelConfig(d, C, (3,), 2)
    p = init_params(cfg, np.random.default_rng(0))
    arrs = p.arrays()
    for a in arrs[:4]:
        a[...] = 0.0
    arrs[3][...] = [[0.6, 0.8]]
    return p


# ---- weights

def test_support_weights():
    assert support_weights([5, 5, 5], 1).tolist() == [0.5, 0.0, 0.5]
    assert support_weights([1, 9, 3], 0, "size").tolist() == [0.0, 0.75, 0.25]
    with pytest.raises(ContractError):
        support_weights([1, 1, 1], 3)


def test_conditional_weights_rows_sum_to_one():
    omega = np.array([0.0, 0.5, 0.5])
    priors = np.array([[0.5, 0.5], [0.9, 0.1], [0.2, 0.8]])
    w = conditional_weights(omega, priors)
    assert np.allclose(w.sum(axis=1), 1.0)
    assert w[0].tolist() == pytest.approx([0.0, 0.9 / 1.1, 0.2 / 1.1])


# ---- degenerate geometry

def test_collapsed_features_zero_terms():
    p = collapsed_params()
    ds = small_dataset()
    st_ = class_conditional_stats(p, ds, 0)
    # renormalizing the mean of identical unit vectors can move it by one ulp
    assert np.nanmax(st_.scatter) <= 1e-15 and st_.C_scat <= 1e-15 and st_.A_i <= 1e-15
    rep = episode_report(p, ds, 0)
    assert max(rep.W1_c) <= 1e-15 and rep.feature_term <= 1e-14
    assert rep.slacks["eq2"] == pytest.approx(rep.da_loss + 2.0, abs=1e-14)
    assert rep.slacks["eq2"] >= 2.0
    assert rep.passed


def test_antipodal_positive_makes_lemma_tight():
    # only the positive remains in the denominator: L_DA = 0, A = 2 = R
    t = CentroidTable(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([1, 0]), np.array([0, 0]),
                      np.ones(2, dtype=np.int64))
    loss, _ = da_loss_features(ad.Tape().const([[1.0, 0.0]]), [0], [0], t, DaMaskPolicy.lemma())
    A, phi = identity_terms(np.array([[1.0, 0.0]]), [0], 0, {(1, 0): np.array([-1.0, 0.0]),
                                                              (0, 0): np.array([1.0, 0.0])})
    assert A == 2.0 and loss.item() == pytest.approx(0.0, abs=1e-15)
    assert A <= loss.item() + 2.0 + 1e-15


# ---- class statistics vs loop oracles

def test_scatter_and_c_scat_match_loops():
    for seed in range(5):
        ds = small_dataset(seed, K=4, C=3, n=15)
        p = init_params(ModelConfig(3, 3, (6,), 3), np.random.default_rng(seed))
        data = domain_features(p, ds)
        cells = centroid_loop(np.concatenate(data.Z), np.concatenate(data.y),
                              np.concatenate([np.full(len(y), k) for k, y in enumerate(data.y)]))
        i = seed % 4
        st_ = class_conditional_stats(p, ds, i, data=data)
        priors = data.priors()
        ref = 0.0
        for c in range(3):
            for j in range(4):
                if j == i:
                    continue
                Zc = data.cls(j, c)
                s = sum(math.dist(z, cells[(j, c)]) for z in Zc) / len(Zc)
                ref += priors[i, c] * (1 / 3) * s
        assert st_.C_scat == pytest.approx(ref, abs=1e-12)


def test_identity_residual_against_loop_oracle():
    for seed in range(10):
        ds = small_dataset(seed, K=3, C=2, n=10)
        p = init_params(ModelConfig(3, 2, (5,), 3), np.random.default_rng(seed))
        data = domain_features(p, ds)
        cells = centroid_loop(np.concatenate(data.Z), np.concatenate(data.y),
                              np.concatenate([np.full(len(y), k) for k, y in enumerate(data.y)]))
        i = seed % 3
        st_ = class_conditional_stats(p, ds, i, data=data)
        A, phi = identity_terms(data.Z[i], data.y[i], i, cells)
        assert st_.A_i == pytest.approx(A, abs=1e-12)
        assert st_.mean_phi == pytest.approx(phi, abs=1e-12)
        assert st_.identity_residual < 1e-9
        assert abs(st_.da_loss - (A + phi)) < 1e-9


# ---- theorem 1 examples

def test_prior_only_shift_has_zero_feature_term():
    a, b = [0.3, -1.0, 2.0], [1.5, 0.2, -0.7]
    mix = [(3, 1), (1, 3), (2, 2)]
    X = [np.array([a] * na + [b] * nb) for na, nb in mix]
    y = [np.array([0] * na + [1] * nb) for na, nb in mix]
    ds = DomainDataset(["p", "q", "r"], X, y, 2)
    p = init_params(ModelConfig(3, 2, (5,), 3), np.random.default_rng(1))
    for i in range(3):
        rep = theorem1_report(p, ds, i)
        assert rep.feature_term == pytest.approx(0.0, abs=1e-12)
        assert rep.slacks["theorem1"] >= -1e-12


def test_theorem1_risks_match_direct_computation():
    ds = small_dataset(3)
    p = init_params(ModelConfig(3, 2, (5,), 3), np.random.default_rng(3))
    rep = theorem1_report(p, ds, 2)
    assert rep.R_query == pytest.approx(float(np.mean(per_sample_ce(p, ds.X[2], ds.y[2]))), abs=1e-14)
    sup = [float(np.mean(per_sample_ce(p, ds.X[k], ds.y[k]))) for k in (0, 1)]
    assert rep.R_support == pytest.approx(np.mean(sup), abs=1e-14)


def test_unnormalized_config_rejected():
    p = init_params(ModelConfig(3, 2, (5,), 3, normalize_features=False), np.random.default_rng(0))
    with pytest.raises(ContractError):
        episode_report(p, small_dataset(), 0)


@given(st.integers(0, 10_000))
def test_audit_draws_never_violate(seed):
    d = audit_draw(seed)
    rep = episode_report(d.params, d.train, d.episode)
    assert rep.violations() == []
    assert rep.identity_residual < 1e-9


# ---- theorem 3

def test_mixture_with_point_mass_on_target_domain():
    ds = small_dataset(4, K=3)
    p = init_params(ModelConfig(3, 2, (5,), 3), np.random.default_rng(4))
    rep = mixture_bound_report(p, ds, ds.X[1], ds.y[1], [0.0, 1.0, 0.0])
    assert rep.W1 == pytest.approx(0.0, abs=1e-12)
    assert rep.mixture_risk == pytest.approx(rep.R_target, abs=1e-14)
    assert rep.slack == pytest.approx(0.0, abs=1e-12)


def test_mixture_infinite_penalty_flags_label_mismatch():
    ds = small_dataset(5, K=3)
    p = init_params(ModelConfig(3, 2, (5,), 3), np.random.default_rng(5))
    X = ds.X[0][ds.y[0] == 0]
    rep = mixture_bound_report(p, ds, X, np.zeros(len(X), dtype=np.int64), [0.5, 0.5, 0.0])
    assert math.isinf(rep.W1) and rep.flags
    finite = mixture_bound_report(p, ds, X, np.zeros(len(X), dtype=np.int64), [0.5, 0.5, 0.0], "lipschitz")
    assert math.isfinite(finite.W1) and finite.slack >= -1e-9
    assert finite.label_penalty == pytest.approx(lipschitz_label_penalty(p))


def test_mixture_rejects_bad_pi():
    ds = small_dataset()
    p = init_params(ModelConfig(3, 2, (5,), 3), np.random.default_rng(0))
    with pytest.raises(ContractError):
        mixture_bound_report(p, ds, ds.X[0], ds.y[0], [0.5, 0.6, -0.1])


# ---- contraction harnesses

def test_contraction_diag_example():
    h = QuadraticHarness(np.diag([1.0, 4.0]), np.zeros(2))
    assert contraction_rate(1.0, 4.0, 0.25) == 0.75
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = contraction_check(h, 0.25, rng.standard_normal(2))
        assert r["holds"] and r["factor"] <= 0.5625 + 1e-12


def test_contraction_at_optimum():
    h = QuadraticHarness(np.diag([1.0, 4.0]), np.array([1.0, 2.0]))
    r = contraction_check(h, 0.25, h.theta_star)
    assert r["lhs"] == 0.0 and r["rhs"] == 0.0 and r["holds"]


@pytest.mark.parametrize("alpha", [0.0, -0.1, 0.5, 1.0])
def test_step_outside_interval_rejected(alpha):
    with pytest.raises(ContractError):
        contraction_check(QuadraticHarness(np.diag([1.0, 4.0]), np.zeros(2)), alpha, np.ones(2))


def test_indefinite_matrix_rejected():
    with pytest.raises(ContractError):
        QuadraticHarness(np.diag([1.0, -1.0]), np.zeros(2))


def test_random_contraction_and_reduction():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 6))
        h = QuadraticHarness(random_spd(rng, n), rng.standard_normal(n), float(rng.standard_normal()))
        alpha = float(rng.uniform(0.01, 1.99)) / h.L
        assert contraction_check(h, alpha, rng.standard_normal(n))["holds"]
        c = CompositeHarness(random_spd(rng, n), rng.standard_normal(n), float(rng.uniform(0, 1)),
                             random_psd(rng, n), rng.standard_normal(n), float(rng.uniform(0, 1)),
                             float(rng.uniform(0.1, 5)))
        alpha = float(rng.uniform(0.01, 1.99)) / c.total.L
        assert da_reduction_check(c, alpha, rng.standard_normal(n))["holds"]


def test_da_reduction_large_lambda():
    rng = np.random.default_rng(2)
    c = CompositeHarness(np.eye(3), np.zeros(3), 0.0, np.diag([1.0, 2.0, 3.0]), np.ones(3), 0.1, 1e3)
    for _ in range(20):
        r = da_reduction_check(c, 1.0 / c.total.L, rng.standard_normal(3))
        assert r["holds"]


def test_composite_matches_total_quadratic():
    rng = np.random.default_rng(3)
    c = CompositeHarness(random_spd(rng, 3), rng.standard_normal(3), 0.5, random_psd(rng, 3),
                         rng.standard_normal(3), 0.2, 2.0)
    th = rng.standard_normal(3)
    assert c.J(th) == pytest.approx(c.total.J(th), rel=1e-12)
    with pytest.raises(ContractError):
        CompositeHarness(np.eye(2), np.zeros(2), -1.0, np.eye(2), np.zeros(2), 0.0, 1.0)


# ---- serialization

def test_report_json_and_csv(tmp_path):
    ds = small_dataset()
    p = init_params(ModelConfig(3, 2, (5,), 3), np.random.default_rng(0))
    reps = [episode_report(p, ds, i, lambda_da=2.0) for i in range(3)]
    write_bound_reports(reps, tmp_path / "b.json", tmp_path / "b.csv")
    doc = json.loads((tmp_path / "b.json").read_text())
    assert doc["schema_version"] == 1 and len(doc["reports"]) == 3
    first = doc["reports"][0]
    for key in ("episode", "R_query", "R_support", "prior_term", "feature_term", "A_i", "C_scat", "R",
                "L_ell", "slacks", "lambda_da"):
        assert key in first
    assert {"theorem1", "eq2", "eq3", "lemma_phi"} <= set(first["slacks"])
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == 3 and float(rows[1]["R_query"]) == reps[1].R_query
