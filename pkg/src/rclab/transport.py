"""Exact 1-Wasserstein distances between finite weighted point clouds."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, ConvergenceError, DimensionError

WEIGHT_TOL = 1e-12
CERT_TOL = 1e-9

for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    # POT probes every installed array backend at import; we only use numpy
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")


def _ot():
    import ot

    return ot


@dataclass
class EmpiricalDistribution:
    """Finite atoms with non-negative weights summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        self.points = pts
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if pts.ndim != 2 or len(pts) != len(self.weights):
            raise DimensionError(f"{len(self.weights)} weights for points of shape {pts.shape}")
        if len(pts) == 0:
            raise ContractError("distribution has no atoms")
        if not np.all(np.isfinite(pts)):
            raise ContractError("distribution has non-finite atoms")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ContractError("weights must be finite and non-negative")
        total = math.fsum(self.weights)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ContractError(f"weights sum to {total!r}, not 1")

    @classmethod
    def uniform(cls, points) -> "EmpiricalDistribution":
        pts = np.asarray(points, dtype=np.float64)
        return cls(pts, np.full(len(pts), 1.0 / len(pts)))

    @classmethod
    def mixture(cls, parts: list["EmpiricalDistribution"], coefs) -> "EmpiricalDistribution":
        """sum_k coefs[k] * parts[k]; zero-coefficient parts are dropped."""
        coefs = np.asarray(coefs, dtype=np.float64)
        keep = [k for k in range(len(parts)) if coefs[k] > 0]
        if not keep:
            raise ContractError("mixture has no positive coefficient")
        pts = np.concatenate([parts[k].points for k in keep])
        w = np.concatenate([coefs[k] * parts[k].weights for k in keep])
        return cls(pts, w / math.fsum(w) if abs(math.fsum(w) - 1.0) > WEIGHT_TOL else w)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float

    def marginal_error(self, a, b) -> float:
        return float(max(np.abs(self.coupling.sum(axis=1) - a).max(),
                         np.abs(self.coupling.sum(axis=0) - b).max()))


def euclidean_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise distances from explicit differences (no Gram-matrix cancellation)."""
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"point dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _certificate_gap(G, M, a, b, u, v) -> float:
    """Worst violation among dual feasibility, complementary slackness and the duality gap."""
    reduced = M - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(M).max()))
    dual_infeas = max(0.0, -float(reduced.min())) / scale
    slack = float(np.abs(G * reduced).sum()) / scale
    primal = math.fsum((G * M).ravel())
    dual = math.fsum(a * u) + math.fsum(b * v)
    return max(dual_infeas, slack, abs(primal - dual) / scale)


def _solve_lp(a, b, M) -> np.ndarray:
    from scipy.optimize import linprog
    from scipy.sparse import csr_matrix, vstack, kron, eye

    n, m = M.shape
    rows = kron(eye(n), np.ones((1, m)))
    cols = kron(np.ones((1, n)), eye(m))
    res = linprog(M.ravel(), A_eq=csr_matrix(vstack([rows, cols])), b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise ConvergenceError(f"transport LP failed: {res.message}")
    return res.x.reshape(n, m)


def solve_transport(a, b, M) -> TransportPlan:
    """Optimal coupling for a cost matrix, certified via its dual potentials.

    The network simplex answer is accepted when reduced costs are
    non-negative and the duality gap vanishes (relative 1e-9); otherwise a
    HiGHS LP is solved and its plan is returned instead.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (len(a), len(b)):
        raise DimensionError(f"cost matrix {M.shape} vs marginals ({len(a)}, {len(b)})")
    for name, w in (("source", a), ("target", b)):
        if np.any(w < 0) or abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
            raise ContractError(f"{name} marginal is not a probability vector (sum {math.fsum(w)!r})")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        G, log = _ot().emd(a, b, M, numItermax=10_000_000, log=True)
    ok = log.get("result_code") == 1
    if ok:
        ok = _certificate_gap(G, M, a, b, log["u"], log["v"]) <= CERT_TOL
    if not ok:
        G = _solve_lp(a, b, M)
    G = np.clip(G, 0.0, None)
    return TransportPlan(G, math.fsum((G * M).ravel()))


def w1_exact(P: EmpiricalDistribution, Q: EmpiricalDistribution,
             metric: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None) -> tuple[float, TransportPlan]:
    """W1(P, Q) under ``metric`` (Euclidean by default) and an optimal plan."""
    M = (metric or euclidean_cost)(P.points, Q.points)
    plan = solve_transport(P.weights, Q.weights, M)
    return plan.cost, plan


def w1_1d_oracle(P: EmpiricalDistribution, Q: EmpiricalDistribution) -> float:
    """Integral over t in [0, 1] of |F_P^-1(t) - F_Q^-1(t)| on merged quantile breakpoints."""
    if P.points.shape[1] != 1 or Q.points.shape[1] != 1:
        raise DimensionError("the quantile oracle needs scalar supports")
    xp, wp = _sorted_atoms(P)
    xq, wq = _sorted_atoms(Q)
    cp = np.cumsum(wp)
    cq = np.cumsum(wq)
    cp[-1] = cq[-1] = 1.0
    ts = np.union1d(cp, cq)
    total, prev, i, j = [], 0.0, 0, 0
    for t in ts:
        total.append((t - prev) * abs(xp[i] - xq[j]))
        prev = t
        if i < len(cp) - 1 and cp[i] <= t:
            i += 1
        if j < len(cq) - 1 and cq[j] <= t:
            j += 1
    return math.fsum(total)


def _sorted_atoms(P: EmpiricalDistribution):
    order = np.argsort(P.points[:, 0], kind="stable")
    return P.points[order, 0], P.weights[order]


def w1_labeled(P: EmpiricalDistribution, p_labels, Q: EmpiricalDistribution, q_labels,
               label_penalty: float = math.inf) -> tuple[float, dict]:
    """W1 on (feature, label) pairs with cost d(z, z') + penalty * 1[y != y'].

    An infinite penalty forbids moving mass between labels, so the problem
    splits into one transport per class; if the class masses differ the
    distance is infinite and the offending classes are reported.
    """
    p_labels = np.asarray(p_labels, dtype=np.int64)
    q_labels = np.asarray(q_labels, dtype=np.int64)
    info: dict = {"unmatched": []}
    if math.isfinite(label_penalty):
        M = euclidean_cost(P.points, Q.points) + label_penalty * (p_labels[:, None] != q_labels[None, :])
        plan = solve_transport(P.weights, Q.weights, M)
        return plan.cost, info
    total = []
    for c in np.union1d(p_labels, q_labels):
        mp = math.fsum(P.weights[p_labels == c])
        mq = math.fsum(Q.weights[q_labels == c])
        if abs(mp - mq) > 1e-12:
            info["unmatched"].append(int(c))
            continue
        if mp == 0:
            continue
        Pc = EmpiricalDistribution(P.points[p_labels == c], P.weights[p_labels == c] / mp)
        Qc = EmpiricalDistribution(Q.points[q_labels == c], Q.weights[q_labels == c] / mq)
        total.append(mp * w1_exact(Pc, Qc)[0])
    if info["unmatched"]:
        return math.inf, info
    return math.fsum(total), info
