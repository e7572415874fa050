"""Numerical evaluation of the transport-based risk bounds and the contraction results.

Everything here is evaluated on empirical measures: the same samples feed
the risk side and the transport side of every inequality, so the checks are
exact up to floating-point arithmetic.  All bound checks assume the
verification configuration, i.e. unit-norm features, where the feature
diameter R equals 2.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import DomainDataset, SyntheticSpec, generate_synthetic, stream
from .errors import ContractError, SpecError
from .losses import CentroidTable, DaMaskPolicy, centroids_from_features, da_loss_features
from .model import ModelConfig, ModelParams, features, init_params, lipschitz_constant, per_sample_ce
from .transport import EmpiricalDistribution, euclidean_cost, w1_exact, w1_labeled

SCHEMA_VERSION = 1
R_SPHERE = 2.0
SLACK_TOL = 1e-6


# ---------------------------------------------------------------- per-domain data

@dataclass
class DomainFeatures:
    """Unit-norm features, labels and per-sample cross-entropy for every domain."""

    Z: list[np.ndarray]
    y: list[np.ndarray]
    loss: list[np.ndarray]
    num_classes: int

    @property
    def K(self) -> int:
        return len(self.Z)

    def counts(self) -> np.ndarray:
        return np.array([np.bincount(y, minlength=self.num_classes) for y in self.y])

    def priors(self) -> np.ndarray:
        c = self.counts().astype(np.float64)
        return c / np.maximum(c.sum(axis=1, keepdims=True), 1)

    def cls(self, k: int, c: int) -> np.ndarray:
        return self.Z[k][self.y[k] == c]

    def cls_loss(self, k: int, c: int) -> np.ndarray:
        return self.loss[k][self.y[k] == c]


def domain_features(params: ModelParams, dataset: DomainDataset) -> DomainFeatures:
    if not params.config.normalize_features:
        raise ContractError("bound checks need the verification configuration (normalize_features=True)")
    Z = [features(params, X) for X in dataset.X]
    loss = [per_sample_ce(params, X, y) for X, y in zip(dataset.X, dataset.y)]
    return DomainFeatures(Z, [np.asarray(y, dtype=np.int64) for y in dataset.y], loss, dataset.num_classes)


def support_weights(sizes, i: int, mode: str = "uniform") -> np.ndarray:
    """ω over the support domains (ω_i = 0): uniform 1/(K-1) or proportional to size."""
    K = len(sizes)
    if not 0 <= i < K:
        raise ContractError(f"episode {i} out of range for {K} domains")
    w = np.zeros(K)
    others = [k for k in range(K) if k != i]
    if mode == "uniform":
        w[others] = 1.0 / len(others)
    elif mode == "size":
        s = np.asarray(sizes, dtype=np.float64)[others]
        w[others] = s / s.sum()
    else:
        raise ValueError(f"unknown omega mode {mode!r}")
    return w


def conditional_weights(omega: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """w[c, j] ∝ ω_j π_j(c): domain weights inside the support class-conditional mixture."""
    joint = omega[None, :] * priors.T  # (C, K)
    tot = joint.sum(axis=1, keepdims=True)
    return np.divide(joint, tot, out=np.zeros_like(joint), where=tot > 0)


# ---------------------------------------------------------------- class statistics

@dataclass
class ClassStats:
    episode: int
    omega: np.ndarray
    pi_query: np.ndarray
    pi_support: np.ndarray
    cond_weights: np.ndarray          # (C, K)
    centroids: CentroidTable
    scatter: np.ndarray               # (K, C), nan where the cell is empty
    C_scat: float
    A_i: float
    mean_phi: float
    mean_log_n: float
    da_loss: float
    identity_residual: float
    R: float = R_SPHERE
    uncovered: list[int] = field(default_factory=list)


def scatter_table(data: DomainFeatures, table: CentroidTable) -> np.ndarray:
    S = np.full((data.K, data.num_classes), np.nan)
    for k in range(data.K):
        for c in range(data.num_classes):
            Zc = data.cls(k, c)
            if len(Zc):
                S[k, c] = float(np.mean(np.linalg.norm(Zc - table.lookup(k, c), axis=1)))
    return S


def class_conditional_stats(params: ModelParams, dataset: DomainDataset, i: int, omega_mode: str = "uniform",
                            data: DomainFeatures | None = None) -> ClassStats:
    """Centroids, scatters, C_scat, A_i, mean Φ and the lemma-policy alignment loss for episode ``i``.

    A_i and Φ are evaluated sample-wise on the query domain; the
    positive-cell weights are uniform over the support domains holding
    the sample's class, which is how the alignment loss averages them.
    """
    data = data or domain_features(params, dataset)
    C = data.num_classes
    priors = data.priors()
    omega = support_weights([len(y) for y in data.y], i, omega_mode)
    pi_s = omega @ priors
    table = centroids_from_features(np.concatenate(data.Z), np.concatenate(data.y),
                                    np.concatenate([np.full(len(y), k) for k, y in enumerate(data.y)]))
    S = scatter_table(data, table)
    C_scat = 0.0
    for c in range(C):
        for j in range(data.K):
            if omega[j] > 0 and priors[i, c] > 0 and not np.isnan(S[j, c]):
                C_scat += priors[i, c] * omega[j] * S[j, c]

    uncovered = [c for c in range(C) if priors[i, c] > 0 and pi_s[c] == 0]
    if uncovered:
        warnings.warn(f"episode {i}: query classes {uncovered} are absent from every support domain; excluded")
    Zq, yq = data.Z[i], data.y[i]
    covered = ~np.isin(yq, uncovered)
    Zq, yq = Zq[covered], yq[covered]

    # path 1: the alignment loss itself, lemma policy (T = 1, own cell excluded)
    policy = DaMaskPolicy.lemma()
    tape = ad.Tape()
    loss, _ = da_loss_features(tape.const(Zq), yq, np.full(len(yq), i), table, policy)
    da = loss.item()

    # path 2: A_i + E Φ from explicit distances
    D = euclidean_cost(Zq, table.centers)
    own = (table.cell_domain[None, :] == i) & (table.cell_class[None, :] == yq[:, None])
    pos = (table.cell_domain[None, :] != i) & (table.cell_class[None, :] == yq[:, None])
    a_terms = (D * pos).sum(axis=1) / pos.sum(axis=1)
    den = ~own
    mx = np.where(den, -D, -np.inf).max(axis=1)
    phi = mx + np.log(np.where(den, np.exp(-D - mx[:, None]), 0.0).sum(axis=1))
    A_i = float(np.mean(a_terms))
    mean_phi = float(np.mean(phi))
    return ClassStats(i, omega, priors[i], pi_s, conditional_weights(omega, priors), table, S, float(C_scat),
                      A_i, mean_phi, float(np.mean(np.log(den.sum(axis=1)))), da,
                      abs(da - (A_i + mean_phi)), R_SPHERE, uncovered)


# ---------------------------------------------------------------- report

@dataclass
class BoundReport:
    """One episode's bound audit; every slack is RHS − LHS of a named inequality."""

    episode: int
    omega_mode: str
    n_query: int
    n_support: int
    R_query: float
    R_support: float
    R_support_c: list[float]
    prior_term: float
    W1_c: list[float]
    feature_term: float
    A_i: float
    mean_phi: float
    C_scat: float
    R: float
    L_ell: float
    da_loss: float
    identity_residual: float
    lambda_da: float | None = None
    two_step_rhs_c: list[float] = field(default_factory=list)
    slacks: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def violations(self, tol: float = SLACK_TOL) -> list[str]:
        return [k for k, v in self.slacks.items() if v < -tol]

    @property
    def passed(self) -> bool:
        return not self.violations()

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    CSV_FIELDS = ("episode", "omega_mode", "n_query", "n_support", "R_query", "R_support", "prior_term",
                  "feature_term", "A_i", "mean_phi", "C_scat", "R", "L_ell", "da_loss", "identity_residual")

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.CSV_FIELDS}
        row.update({f"slack_{k}": v for k, v in self.slacks.items()})
        return row


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_bound_reports(reports: list[BoundReport], json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]}, fh, indent=1)
    rows = [r.csv_row() for r in reports]
    cols = list(BoundReport.CSV_FIELDS) + sorted({k for r in rows for k in r if k.startswith("slack_")})
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------- theorem 1

def class_w1(data: DomainFeatures, i: int, c: int, cond_w: np.ndarray) -> float:
    """W1 between the query class-c features and the support class-c mixture."""
    Zq = data.cls(i, c)
    parts, coefs = [], []
    for j in range(data.K):
        if j != i and cond_w[c, j] > 0:
            parts.append(EmpiricalDistribution.uniform(data.cls(j, c)))
            coefs.append(cond_w[c, j])
    return w1_exact(EmpiricalDistribution.uniform(Zq), EmpiricalDistribution.mixture(parts, coefs))[0]


def theorem1_report(params: ModelParams, dataset: DomainDataset, i: int, omega_mode: str = "uniform",
                    data: DomainFeatures | None = None) -> BoundReport:
    """R_i ≤ R_-i + Σ_c |Δπ_c| R_-i,c + L_ℓ Σ_c π_i(c) W1(P_i,c, P_-i,c)."""
    data = data or domain_features(params, dataset)
    st = class_conditional_stats(params, dataset, i, omega_mode, data)
    C = data.num_classes
    L = lipschitz_constant(params)
    R_query = float(np.mean(data.loss[i]))
    R_dom = np.array([float(np.mean(l)) if len(l) else 0.0 for l in data.loss])
    R_support = float(st.omega @ R_dom)
    R_sc = np.zeros(C)
    W1 = np.zeros(C)
    for c in range(C):
        if st.pi_support[c] > 0:
            R_sc[c] = sum(st.cond_weights[c, j] * float(np.mean(data.cls_loss(j, c)))
                          for j in range(data.K) if st.cond_weights[c, j] > 0)
        if st.pi_query[c] > 0 and c not in st.uncovered:
            W1[c] = class_w1(data, i, c, st.cond_weights)
    prior_term = float(np.sum(np.abs(st.pi_query - st.pi_support) * R_sc))
    feature_term = L * float(st.pi_query @ W1)
    rep = BoundReport(
        episode=i, omega_mode=omega_mode, n_query=len(data.y[i]),
        n_support=int(sum(len(data.y[j]) for j in range(data.K) if j != i)),
        R_query=R_query, R_support=R_support, R_support_c=R_sc.tolist(), prior_term=prior_term,
        W1_c=W1.tolist(), feature_term=feature_term, A_i=st.A_i, mean_phi=st.mean_phi, C_scat=st.C_scat,
        R=st.R, L_ell=L, da_loss=st.da_loss, identity_residual=st.identity_residual,
        flags=[f"uncovered class {c}" for c in st.uncovered])
    rep.slacks["theorem1"] = R_support + prior_term + feature_term - R_query
    return rep


# ---------------------------------------------------------------- theorem 2 and the lemma chain

def theorem2_report(params: ModelParams, dataset: DomainDataset, i: int, omega_mode: str = "uniform",
                    data: DomainFeatures | None = None, report: BoundReport | None = None) -> BoundReport:
    """Lemma chain, Σ_c π_i(c) W1 ≤ E L_DA + C_scat + R, and the assembled target bound.

    Extends ``report`` (a theorem-1 report for the same episode) when given.
    """
    data = data or domain_features(params, dataset)
    rep = report or theorem1_report(params, dataset, i, omega_mode, data)
    st = class_conditional_stats(params, dataset, i, omega_mode, data)
    da, R = st.da_loss, st.R
    rep.slacks["lemma_phi"] = da + R - st.A_i
    rep.slacks["lemma_phi_tight"] = da + R - st.mean_log_n - st.A_i
    rhs_c = []
    for c in range(data.num_classes):
        if st.pi_query[c] == 0 or c in st.uncovered:
            rhs_c.append(0.0)
            continue
        Zq = data.cls(i, c)
        rhs = 0.0
        for j in range(data.K):
            w = st.cond_weights[c, j]
            if w > 0:
                mu = st.centroids.lookup(j, c)
                rhs += w * (float(np.mean(np.linalg.norm(Zq - mu, axis=1))) + st.scatter[j, c])
        rhs_c.append(rhs)
        rep.slacks[f"two_step_c{c}"] = rhs - rep.W1_c[c]
    rep.two_step_rhs_c = rhs_c
    lhs = float(st.pi_query @ np.asarray(rep.W1_c))
    rep.slacks["eq2"] = da + st.C_scat + R - lhs
    rep.slacks["eq3"] = rep.R_support + rep.prior_term + rep.L_ell * (da + st.C_scat + R) - rep.R_query
    return rep


def episode_report(params: ModelParams, dataset: DomainDataset, i: int, omega_mode: str = "uniform",
                   lambda_da: float | None = None) -> BoundReport:
    data = domain_features(params, dataset)
    rep = theorem2_report(params, dataset, i, omega_mode, data, theorem1_report(params, dataset, i, omega_mode, data))
    rep.lambda_da = lambda_da
    return rep


# ---------------------------------------------------------------- theorem 3

@dataclass
class MixtureReport:
    R_target: float
    mixture_risk: float
    W1: float
    L_ell: float
    label_penalty: float
    slack: float
    flags: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def lipschitz_label_penalty(params: ModelParams) -> float:
    """Smallest label-mismatch cost keeping cross-entropy L_ℓ-Lipschitz in d(z, z') + M·1[y ≠ y'].

    On the unit sphere |logit_c(z) − logit_c'(z)| ≤ ‖W_c − W_c'‖ + |b_c − b_c'|.
    """
    W, b = params.classifier
    L = lipschitz_constant(params)
    C = W.shape[0]
    gaps = [np.linalg.norm(W[c] - W[d]) + abs(b[0, c] - b[0, d]) for c in range(C) for d in range(C) if c != d]
    if L == 0:
        return 0.0
    return float(max(gaps, default=0.0)) / L


def mixture_bound_report(params: ModelParams, sources: DomainDataset, target_X, target_y, pi,
                         label_penalty: float | str = math.inf) -> MixtureReport:
    """R_T ≤ Σ_i π_i R_Di + L_ℓ W1(T, T̃_π) on joint (feature, label) measures.

    ``label_penalty`` is ∞ (mass may not change label), ``"lipschitz"`` for
    the finite penalty from :func:`lipschitz_label_penalty`, or a number.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (sources.K,) or np.any(pi < 0) or abs(math.fsum(pi) - 1.0) > 1e-12:
        raise ContractError("π must be a probability vector over the source domains")
    data = domain_features(params, sources)
    L = lipschitz_constant(params)
    if label_penalty == "lipschitz":
        label_penalty = lipschitz_label_penalty(params)
    ty = np.asarray(target_y, dtype=np.int64)
    ZT = features(params, target_X)
    R_T = float(np.mean(per_sample_ce(params, target_X, ty)))
    mix_risk = math.fsum(pi[k] * float(np.mean(data.loss[k])) for k in range(sources.K) if pi[k] > 0)
    flags = []
    src_classes = set()
    for k in range(sources.K):
        if pi[k] > 0:
            src_classes |= set(data.y[k].tolist())
    for c in sorted(set(ty.tolist()) - src_classes):
        flags.append(f"unmatched class {c}")
    parts = [EmpiricalDistribution.uniform(data.Z[k]) for k in range(sources.K)]
    mix = EmpiricalDistribution.mixture(parts, pi)
    mix_y = np.concatenate([data.y[k] for k in range(sources.K) if pi[k] > 0])
    W1, info = w1_labeled(EmpiricalDistribution.uniform(ZT), ty, mix, mix_y, float(label_penalty))
    if info["unmatched"]:
        flags.append(f"label marginals differ on classes {info['unmatched']}; W1 is infinite")
    rhs = mix_risk + (L * W1 if math.isfinite(W1) else math.inf)
    return MixtureReport(R_T, mix_risk, W1, L, float(label_penalty), rhs - R_T, flags)


# ---------------------------------------------------------------- quadratic harnesses

@dataclass
class QuadraticHarness:
    """J(Θ) = ½ ΘᵀAΘ − bᵀΘ + c with A symmetric positive definite."""

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        if not np.allclose(self.A, self.A.T):
            raise ContractError("A must be symmetric")
        eig = np.linalg.eigvalsh(self.A)
        if eig[0] <= 0:
            raise ContractError(f"A must be positive definite (λ_min = {eig[0]!r})")
        self.mu, self.L = float(eig[0]), float(eig[-1])
        self.theta_star = np.linalg.solve(self.A, self.b)
        self.J_star = self.c - 0.5 * float(self.b @ self.theta_star)

    def J(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return 0.5 * float(theta @ self.A @ theta) - float(self.b @ theta) + self.c

    def excess(self, theta) -> float:
        """J(Θ) − J* = ½ (Θ−Θ*)ᵀ A (Θ−Θ*), evaluated without cancellation."""
        e = np.asarray(theta, dtype=np.float64) - self.theta_star
        return 0.5 * float(e @ self.A @ e)

    def grad(self, theta) -> np.ndarray:
        return self.A @ np.asarray(theta, dtype=np.float64) - self.b

    def step(self, theta, alpha: float) -> np.ndarray:
        return np.asarray(theta, dtype=np.float64) - alpha * self.grad(theta)


def contraction_rate(mu: float, L: float, alpha: float) -> float:
    """ρ(α) = 1 − 2μα(1 − Lα/2)."""
    return 1.0 - 2.0 * mu * alpha * (1.0 - L * alpha / 2.0)


def _check_alpha(h: QuadraticHarness, alpha: float) -> None:
    if not 0 < alpha < 2.0 / h.L:
        raise ContractError(f"step size {alpha!r} outside the admissible interval (0, {2.0 / h.L!r})")


def contraction_check(h: QuadraticHarness, alpha: float, theta, tol: float = 1e-12) -> dict:
    """One gradient step: J(Θ⁺) − J* ≤ ρ(α) (J(Θ) − J*)."""
    _check_alpha(h, alpha)
    rho = contraction_rate(h.mu, h.L, alpha)
    before = h.excess(theta)
    lhs = h.excess(h.step(theta, alpha))
    rhs = rho * before
    return {"rho": rho, "lhs": lhs, "rhs": rhs, "slack": rhs - lhs,
            "factor": lhs / before if before > 0 else 0.0,
            "holds": lhs <= rhs + tol * max(1.0, before)}


@dataclass
class CompositeHarness:
    """J = risk + λ_DA · align with risk, align ≥ 0 shifted quadratics."""

    A_risk: np.ndarray
    m_risk: np.ndarray
    s_risk: float
    A_align: np.ndarray
    m_align: np.ndarray
    s_align: float
    lambda_da: float

    def __post_init__(self):
        if not self.lambda_da > 0:
            raise ContractError("lambda_da must be > 0")
        if self.s_risk < 0 or self.s_align < 0:
            raise ContractError("component offsets must be >= 0 so both components are non-negative")
        A = self.A_risk + self.lambda_da * self.A_align
        b = self.A_risk @ self.m_risk + self.lambda_da * self.A_align @ self.m_align
        c = (self.s_risk + 0.5 * self.m_risk @ self.A_risk @ self.m_risk
             + self.lambda_da * (self.s_align + 0.5 * self.m_align @ self.A_align @ self.m_align))
        self.total = QuadraticHarness(A, b, float(c))

    def risk(self, theta) -> float:
        e = np.asarray(theta) - self.m_risk
        return 0.5 * float(e @ self.A_risk @ e) + self.s_risk

    def align(self, theta) -> float:
        e = np.asarray(theta) - self.m_align
        return 0.5 * float(e @ self.A_align @ e) + self.s_align

    def J(self, theta) -> float:
        return self.risk(theta) + self.lambda_da * self.align(theta)

    @property
    def J_star(self) -> float:
        return self.J(self.total.theta_star)


def da_reduction_check(h: CompositeHarness, alpha: float, theta, tol: float = 1e-12) -> dict:
    """align(Θ⁺) ≤ (ρ/λ) J(Θ) + ((1−ρ)/λ) J* after one gradient step on J."""
    q = h.total
    _check_alpha(q, alpha)
    rho = contraction_rate(q.mu, q.L, alpha)
    theta_plus = q.step(theta, alpha)
    lhs = h.align(theta_plus)
    rhs = (rho * h.J(theta) + (1.0 - rho) * h.J_star) / h.lambda_da
    return {"rho": rho, "lhs": lhs, "rhs": rhs, "slack": rhs - lhs,
            "holds": lhs <= rhs + tol * max(1.0, abs(rhs))}


def random_spd(rng: np.random.Generator, n: int, cond: float = 100.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.exp(rng.uniform(0, math.log(cond), n))
    return (Q * eig) @ Q.T


def random_psd(rng: np.random.Generator, n: int) -> np.ndarray:
    G = rng.standard_normal((n, rng.integers(1, n + 1)))
    return G @ G.T


# ---------------------------------------------------------------- Monte-Carlo draws

@dataclass
class AuditDraw:
    spec: SyntheticSpec
    params: ModelParams
    train: DomainDataset
    test: DomainDataset
    episode: int


def audit_draw(seed: int, n_per_domain: tuple[int, int] = (30, 80)) -> AuditDraw:
    """A random small compound-shift instance and randomly scaled verification-config parameters."""
    rng = stream(seed, "audit")
    while True:
        C = int(rng.integers(2, 5))
        spec = SyntheticSpec(
            K=int(rng.integers(3, 5)), C=C, input_dim=int(rng.integers(2, 7)),
            imbalance_ratio=float(rng.uniform(1, 8)), conditional_shift=float(rng.uniform(0, 2)),
            noise_sigma=float(rng.uniform(0.2, 1.5)), n_per_domain=int(rng.integers(*n_per_domain)),
            class_sep=float(rng.uniform(0.5, 3.0)), n_eval_per_class=int(rng.integers(3, 12)),
            seed=int(rng.integers(2**31)))
        try:
            spec.validate()
        except SpecError:
            continue
        break
    splits = generate_synthetic(spec)
    mc = ModelConfig(spec.input_dim, C, hidden=(int(rng.integers(4, 12)),), feat_dim=int(rng.integers(2, 6)))
    params = init_params(mc, stream(seed, "init"))
    params = ModelParams(mc, params.flat * float(rng.uniform(0.5, 3.0)))
    return AuditDraw(spec, params, splits.train, splits.test, int(rng.integers(spec.K)))
