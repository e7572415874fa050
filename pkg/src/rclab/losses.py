"""Cross-entropy, centroid table, domain-class alignment loss and mixup objectives."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Batch
from .errors import ContractError, DegenerateEpisodeError
from .model import BoundModel, ModelParams, features, normalize, raw_features


@dataclass(frozen=True)
class DaMaskPolicy:
    """Which centroid cells enter the softmax denominator of the alignment loss.

    ``algorithm2`` drops the positives and keeps the query's own (domain, class)
    cell; ``lemma`` keeps everything except the query's own cell.
    """

    exclude_positives_from_denominator: bool = True
    exclude_self_pair: bool = False
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")

    @classmethod
    def algorithm2(cls, temperature: float = 1.0) -> "DaMaskPolicy":
        return cls(True, False, temperature)

    @classmethod
    def lemma(cls) -> "DaMaskPolicy":
        return cls(False, True, 1.0)

    @classmethod
    def named(cls, name: str, temperature: float = 1.0) -> "DaMaskPolicy":
        if name == "algorithm2":
            return cls.algorithm2(temperature)
        if name == "lemma":
            return cls.lemma()
        raise ValueError(f"unknown mask policy {name!r}")

    @property
    def name(self) -> str:
        if self == DaMaskPolicy.lemma():
            return "lemma"
        if self.exclude_positives_from_denominator and not self.exclude_self_pair:
            return "algorithm2"
        return "custom"


@dataclass
class CentroidTable:
    """Unit-norm centroids for (domain, class) cells, stored as a flat cell list.

    Only present cells are stored; ``lookup`` maps (domain, class) to a row.
    Values are plain arrays, so they never carry gradient.
    """

    centers: np.ndarray       # (M, feat_dim)
    cell_domain: np.ndarray   # (M,)
    cell_class: np.ndarray    # (M,)
    counts: np.ndarray        # (M,) samples behind each centroid

    def present(self, domain: int, cls: int) -> bool:
        return bool(np.any((self.cell_domain == domain) & (self.cell_class == cls)))

    def lookup(self, domain: int, cls: int) -> np.ndarray:
        hit = np.flatnonzero((self.cell_domain == domain) & (self.cell_class == cls))
        if len(hit) == 0:
            raise KeyError((domain, cls))
        return self.centers[hit[0]]

    def __len__(self) -> int:
        return len(self.cell_class)


def centroids_from_features(Z: np.ndarray, y: np.ndarray, domain: np.ndarray) -> CentroidTable:
    """Mean of L2-normalized rows per (domain, class), re-normalized."""
    Zn = normalize(ad.as_matrix(Z))
    y = np.asarray(y, dtype=np.int64)
    domain = np.asarray(domain, dtype=np.int64)
    width = int(y.max()) + 1 if len(y) else 1
    code = domain * width + y
    tally = np.bincount(code)
    keys = np.flatnonzero(tally)
    rank = np.cumsum(tally > 0) - 1
    inv = rank[code]
    cells = np.stack([keys // width, keys % width], axis=1)
    counts = tally[keys]
    onehot = np.zeros((len(keys), len(inv)))
    onehot[inv, np.arange(len(inv))] = 1.0
    sums = onehot @ Zn
    means = sums / counts[:, None]
    nrm = np.linalg.norm(means, axis=1)
    for m in np.flatnonzero(nrm < ad.NORM_EPS):
        # antipodal samples cancel; keep the cell on the sphere
        means[m] = Zn[np.flatnonzero(inv == m)[0]]
        nrm[m] = 1.0
    return CentroidTable(means / nrm[:, None], cells[:, 0].copy(), cells[:, 1].copy(), counts.astype(np.int64))


def compute_centroids(params: ModelParams, support_batches: list[Batch]) -> CentroidTable:
    """Support centroids from the current extractor, without gradient."""
    b = Batch.concat(support_batches)
    return centroids_from_features(raw_features(params, b.X), b.y, b.domain)


def cross_entropy_batch(model: BoundModel, Z: ad.Var, y) -> ad.Var:
    """Mean cross-entropy of the classifier on features ``Z``."""
    if len(y) == 0:
        raise ContractError("cross-entropy of an empty batch")
    return ad.mean(ad.softmax_cross_entropy(model.logits(Z), y))


def da_masks(y: np.ndarray, domain: np.ndarray, table: CentroidTable,
             policy: DaMaskPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Positive and denominator masks, both (n, M)."""
    same_class = table.cell_class[None, :] == y[:, None]
    same_domain = table.cell_domain[None, :] == domain[:, None]
    pos = same_class & ~same_domain
    den = np.ones_like(pos)
    if policy.exclude_positives_from_denominator:
        den &= ~pos
    if policy.exclude_self_pair:
        den &= ~(same_class & same_domain)
    return pos, den


@dataclass
class DaStats:
    n_with_positives: int
    n_without_positives: int


def da_logits(Z: ad.Var, table: CentroidTable, policy: DaMaskPolicy) -> ad.Var:
    """-distance(normalize(Z), centroids) / T, shape (n, M)."""
    Zn, _ = ad.normalize_rows(Z)
    return ad.scale(ad.pairwise_distance(Zn, table.centers), -1.0 / policy.temperature)


def da_loss_from_logits(logits: ad.Var, y, domain, table: CentroidTable,
                        policy: DaMaskPolicy) -> tuple[ad.Var, DaStats]:
    loss, stats = da_loss_mixture(logits, [(y, domain, 1.0)], table, policy)
    return loss, stats[0]


def da_loss_mixture(logits: ad.Var, label_sets, table: CentroidTable,
                    policy: DaMaskPolicy) -> tuple[ad.Var, list[DaStats]]:
    """sum_t a_t * DA(logits; y_t, d_t) for ``label_sets`` of (y, domain, a) on shared logits."""
    W = np.zeros(logits.shape)
    lse_terms, all_stats = [], []
    for y, domain, a in label_sets:
        y = np.asarray(y, dtype=np.int64)
        domain = np.asarray(domain, dtype=np.int64)
        pos, den = da_masks(y, domain, table, policy)
        has_pos = pos.any(axis=1)
        stats = DaStats(int(has_pos.sum()), int((~has_pos).sum()))
        if stats.n_with_positives == 0:
            raise DegenerateEpisodeError("no sample in the batch has a positive centroid")
        rows = logits
        if stats.n_without_positives:
            keep = np.flatnonzero(has_pos)
            pos, den, rows = pos[keep], den[keep], ad.rows(logits, keep)
        if not den.any(axis=1).all():
            raise ContractError("mask policy leaves a sample with an empty denominator")
        n = stats.n_with_positives
        W[has_pos] -= a * pos / pos.sum(axis=1, keepdims=True) / n
        lse = ad.logsumexp_rows(rows, den)
        lse_terms.append(ad.weighted_sum(lse, np.full((n, 1), a / n)))
        all_stats.append(stats)
    total = lse_terms[0]
    for t in lse_terms[1:]:
        total = ad.add(total, t)
    return ad.add(total, ad.weighted_sum(logits, W)), all_stats


def da_loss_features(Z: ad.Var, y, domain, table: CentroidTable,
                     policy: DaMaskPolicy) -> tuple[ad.Var, DaStats]:
    """Alignment loss on (possibly unnormalized) features already on a tape.

    Per sample: average over present positive cells (same class, other
    domain) of -(logit - logsumexp over the denominator cells), where
    logit = -distance / T.  Samples without any positive are skipped and
    counted; the result is the mean over the remaining samples.
    """
    return da_loss_from_logits(da_logits(Z, table, policy), y, domain, table, policy)


def da_loss(params: ModelParams, batch: Batch, table: CentroidTable,
            policy: DaMaskPolicy) -> float:
    """Value of the alignment loss for ``batch`` under ``params``."""
    tape = ad.Tape()
    Z = tape.const(features(params, batch.X))
    loss, _ = da_loss_features(Z, batch.y, batch.domain, table, policy)
    return loss.item()


def sample_mixup_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) via the ratio of two Gamma(alpha) draws."""
    if not alpha > 0:
        raise ContractError("alpha_mixup must be positive")
    g1 = rng.gamma(alpha)
    g2 = rng.gamma(alpha)
    if g1 + g2 == 0.0:
        return 0.5
    return float(min(1.0, max(0.0, g1 / (g1 + g2))))


def composite(model: BoundModel, Z: ad.Var, y, domain, lambda_da: float,
              table: CentroidTable | None, policy: DaMaskPolicy) -> tuple[ad.Var, float, float | None]:
    """CE(Z) + lambda_da * DA(Z); DA is skipped entirely when lambda_da == 0."""
    if lambda_da < 0:
        raise ContractError("lambda_da must be >= 0")
    ce = cross_entropy_batch(model, Z, y)
    if lambda_da == 0 or table is None:
        return ce, ce.item(), None
    da, _ = da_loss_features(Z, y, domain, table, policy)
    return ad.add(ce, ad.scale(da, lambda_da)), ce.item(), da.item()


def total_objective(model: BoundModel, batch: Batch, lambda_da: float,
                    table: CentroidTable | None, policy: DaMaskPolicy) -> ad.Var:
    loss, _, _ = composite(model, model.features(batch.X), batch.y, batch.domain, lambda_da, table, policy)
    return loss


def mix_features(z1: ad.Var, z2: ad.Var, lam: float) -> ad.Var:
    """lam * z1 + (1 - lam) * z2, truncating to the shorter batch with a warning."""
    n1, n2 = z1.shape[0], z2.shape[0]
    if n1 != n2:
        n = min(n1, n2)
        warnings.warn(f"mixup batches differ in size ({n1} vs {n2}); truncating to {n}")
        z1 = ad.rows(z1, np.arange(n)) if n1 > n else z1
        z2 = ad.rows(z2, np.arange(n)) if n2 > n else z2
    return ad.add(ad.scale(z1, lam), ad.scale(z2, 1.0 - lam))


def mixed_loss(model: BoundModel, z_mix: ad.Var, batch_1: Batch, batch_2: Batch, lam: float, lambda_da: float,
               table: CentroidTable | None, policy: DaMaskPolicy) -> tuple[ad.Var, dict]:
    """lam * L(Z_mix, y_1, d_1) + (1 - lam) * L(Z_mix, y_2, d_2) with L = CE + lambda_da * DA.

    Classifier logits and centroid distances of ``z_mix`` are shared by
    both label sets.
    """
    if lambda_da < 0:
        raise ContractError("lambda_da must be >= 0")
    n = z_mix.shape[0]
    batch_1, batch_2 = batch_1.head(n), batch_2.head(n)
    cls = model.logits(z_mix)
    targets = np.zeros(cls.shape)
    targets[np.arange(n), batch_1.y] += lam
    targets[np.arange(n), batch_2.y] += 1.0 - lam
    loss = ad.mean(ad.soft_cross_entropy(cls, targets))
    parts = {"ce": loss.item(), "da": None}
    if lambda_da > 0 and table is not None:
        dl = da_logits(z_mix, table, policy)
        da, _ = da_loss_mixture(dl, [(batch_1.y, batch_1.domain, lam), (batch_2.y, batch_2.domain, 1.0 - lam)],
                                table, policy)
        parts["da"] = da.item()
        loss = ad.add(loss, ad.scale(da, lambda_da))
    return loss, parts


def mixed_pair_loss(model: BoundModel, batch_1: Batch, batch_2: Batch, lam: float, lambda_da: float,
                    table: CentroidTable | None, policy: DaMaskPolicy) -> tuple[ad.Var, dict]:
    """Manifold mixup at the feature layer, scored against both label sets."""
    z_mix = mix_features(model.features(batch_1.X), model.features(batch_2.X), lam)
    return mixed_loss(model, z_mix, batch_1, batch_2, lam, lambda_da, table, policy)
