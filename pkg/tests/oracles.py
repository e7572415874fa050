"""Independent reference computations.  Loops and textbook formulas, no shared code with the package."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-7):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def matmul_loops(A, B):
    A, B = np.asarray(A), np.asarray(B)
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            out[i, j] = math.fsum(A[i, k] * B[k, j] for k in range(A.shape[1]))
    return out


def ce_scalar(logit_row, y):
    m = max(logit_row)
    return m + math.log(math.fsum(math.exp(v - m) for v in logit_row)) - logit_row[y]


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / math.sqrt(math.fsum(v * v))


def da_loss_loop(Z, y, domain, centers, cell_domain, cell_class, temperature, drop_positives, drop_self):
    """Per-sample double loop over centroid cells; mean over samples that have a positive."""
    total, n = [], 0
    for z, c, dk in zip(Z, y, domain):
        z = unit(z)
        pos, den = [], []
        for mu, dj, cj in zip(centers, cell_domain, cell_class):
            d = math.sqrt(math.fsum((z - mu) ** 2))
            logit = -d / temperature
            is_pos = cj == c and dj != dk
            is_self = cj == c and dj == dk
            if is_pos:
                pos.append(logit)
            if (is_pos and drop_positives) or (is_self and drop_self):
                continue
            den.append(logit)
        if not pos:
            continue
        m = max(den)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in den))
        total.append(-math.fsum(p - lse for p in pos) / len(pos))
        n += 1
    return math.fsum(total) / n


def centroid_loop(Z, y, domain):
    cells = {}
    for z, c, d in zip(Z, y, domain):
        cells.setdefault((int(d), int(c)), []).append(unit(z))
    return {k: unit(np.sum(v, axis=0)) for k, v in cells.items()}


def identity_terms(Zq, yq, i, cells):
    """A_i and mean Φ for query features against a {(domain, class): centroid} dict (lemma policy, T=1)."""
    A, phi = [], []
    for z, c in zip(Zq, yq):
        pos = [math.dist(z, mu) for (j, k), mu in cells.items() if k == c and j != i]
        den = [-math.dist(z, mu) for (j, k), mu in cells.items() if not (k == c and j == i)]
        A.append(math.fsum(pos) / len(pos))
        m = max(den)
        phi.append(m + math.log(math.fsum(math.exp(v - m) for v in den)))
    return math.fsum(A) / len(A), math.fsum(phi) / len(phi)


def w1_by_matching(xa, ca, xb, cb):
    """W1 between integer-mass atom sets with equal totals: expand by multiplicity and solve the assignment."""
    xa = np.atleast_2d(np.asarray(xa, dtype=np.float64))
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    if xa.shape[0] == 1 and len(ca) > 1:
        xa = xa.T
    if xb.shape[0] == 1 and len(cb) > 1:
        xb = xb.T
    N = sum(ca)
    assert N == sum(cb)
    A = np.repeat(xa, ca, axis=0)
    B = np.repeat(xb, cb, axis=0)
    cost = np.array([[math.dist(a, b) for b in B] for a in A])
    r, c = linear_sum_assignment(cost)
    return math.fsum(cost[r, c]) / N


def shot_recount(pred, y, domain, counts, many_min, medium_min):
    hit, tot = {}, {}
    for p, t, d in zip(pred, y, domain):
        n = counts[d][t]
        b = "Many" if n >= many_min else "Medium" if n >= medium_min else "Few" if n >= 1 else "Zero"
        tot[b] = tot.get(b, 0) + 1
        hit[b] = hit.get(b, 0) + int(p == t)
    return {b: 100.0 * hit[b] / tot[b] for b in tot}


def pearson_textbook(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
