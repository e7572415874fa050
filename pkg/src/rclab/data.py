"""Multi-domain long-tailed datasets: synthesis, file IO, batching, shot buckets."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import EpisodeError, ParseError, SpecError

# independent randomness per purpose: data / batches / mixup / pairs / init / eval
STREAMS = {"data": 0, "batch": 1, "mixup": 2, "pairs": 3, "init": 4, "audit": 5}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """A generator for one purpose, statistically independent of the others."""
    key = (STREAMS[purpose], *extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    domain: np.ndarray  # domain index per row

    def __len__(self) -> int:
        return len(self.y)

    def head(self, n: int) -> "Batch":
        return Batch(self.X[:n], self.y[:n], self.domain[:n])

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        return Batch(np.vstack([b.X for b in batches]),
                     np.concatenate([b.y for b in batches]),
                     np.concatenate([b.domain for b in batches]))


@dataclass
class DomainDataset:
    """K named partitions of (features, labels) over C classes."""

    names: list[str]
    X: list[np.ndarray]
    y: list[np.ndarray]
    num_classes: int

    def __post_init__(self):
        if not (len(self.names) == len(self.X) == len(self.y)):
            raise ValueError("names, X and y must have one entry per domain")
        dims = {x.shape[1] for x in self.X if len(x)}
        if len(dims) > 1:
            raise ValueError(f"feature dimensions differ across domains: {sorted(dims)}")
        for yk in self.y:
            if len(yk) and (yk.min() < 0 or yk.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def input_dim(self) -> int:
        for x in self.X:
            if x.ndim == 2:
                return x.shape[1]
        return 0

    def sizes(self) -> list[int]:
        return [len(yk) for yk in self.y]

    def counts(self) -> np.ndarray:
        """(K, C) per-domain class counts."""
        out = np.zeros((self.K, self.num_classes), dtype=np.int64)
        for k, yk in enumerate(self.y):
            out[k] = np.bincount(yk, minlength=self.num_classes)
        return out

    def priors(self) -> np.ndarray:
        """π_k(c) = count / partition size; rows of empty domains stay zero."""
        c = self.counts().astype(np.float64)
        tot = c.sum(axis=1, keepdims=True)
        return np.divide(c, tot, out=np.zeros_like(c), where=tot > 0)

    def subset(self, domains: Sequence[int]) -> "DomainDataset":
        domains = list(domains)
        return DomainDataset([self.names[k] for k in domains], [self.X[k] for k in domains],
                             [self.y[k] for k in domains], self.num_classes)

    def without(self, k: int) -> "DomainDataset":
        return self.subset([j for j in range(self.K) if j != k])

    def batch(self, k: int) -> Batch:
        return Batch(self.X[k], self.y[k], np.full(len(self.y[k]), k, dtype=np.int64))

    def pooled(self) -> Batch:
        return Batch.concat([self.batch(k) for k in range(self.K)])


@dataclass
class Splits:
    train: DomainDataset
    val: DomainDataset
    test: DomainDataset


@dataclass
class SyntheticSpec:
    K: int = 4
    C: int = 5
    input_dim: int = 8
    imbalance_ratio: float = 10.0
    conditional_shift: float = 1.0
    noise_sigma: float = 0.3
    n_per_domain: int = 2000
    class_sep: float = 1.0
    n_eval_per_class: int = 60
    prior_permutation: list[list[int]] | None = None
    allow_zero_shot: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1 or self.C < 2 or self.input_dim < 1:
            raise SpecError("need K >= 1, C >= 2, input_dim >= 1")
        if self.imbalance_ratio < 1:
            raise SpecError("imbalance_ratio must be >= 1")
        if self.conditional_shift < 0:
            raise SpecError("conditional_shift must be >= 0")
        if not self.noise_sigma > 0:
            raise SpecError("noise_sigma must be > 0")
        if self.n_eval_per_class < 0:
            raise SpecError("n_eval_per_class must be >= 0")
        if self.prior_permutation is not None:
            if len(self.prior_permutation) != self.K:
                raise SpecError("prior_permutation needs one permutation per domain")
            for p in self.prior_permutation:
                if sorted(p) != list(range(self.C)):
                    raise SpecError(f"{p} is not a permutation of range({self.C})")
        counts = long_tail_counts(head_count(self), self.C, self.imbalance_ratio)
        if self.allow_zero_shot:
            counts = counts[:-1]
        if min(counts) < 1:
            raise SpecError(f"n_per_domain={self.n_per_domain} is too small to give every class a sample")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def long_tail_counts(n_max: int, C: int, ratio: float) -> list[int]:
    """Exponential profile n_c = n_max * ratio^(-c / (C - 1)), rounded."""
    if C == 1:
        return [int(n_max)]
    return [int(round(n_max * ratio ** (-c / (C - 1)))) for c in range(C)]


def head_count(spec: SyntheticSpec) -> int:
    """Head-class count so the profile sums to roughly ``n_per_domain``."""
    mass = sum(spec.imbalance_ratio ** (-c / (spec.C - 1)) for c in range(spec.C))
    return max(1, int(round(spec.n_per_domain / mass)))


def domain_permutations(spec: SyntheticSpec, rng: np.random.Generator) -> list[list[int]]:
    """Rank-to-class maps; rotations of one random order, so head classes differ by domain."""
    if spec.prior_permutation is not None:
        return [list(p) for p in spec.prior_permutation]
    base = rng.permutation(spec.C)
    return [[int(base[(r + k) % spec.C]) for r in range(spec.C)] for k in range(spec.K)]


def domain_geometry(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class base means (C, d) and unit domain offsets (K, d).

    Offsets sit at equally spaced angles in a random 2-plane, hence are
    pairwise distinct for K >= 2.
    """
    d = spec.input_dim
    G = rng.standard_normal((max(spec.C, 2) + 2, d))
    base = G[: spec.C]
    base = base / np.linalg.norm(base, axis=1, keepdims=True) * spec.class_sep
    if d >= 2:
        q, _ = np.linalg.qr(G[spec.C:spec.C + 2].T)
        e1, e2 = q[:, 0], q[:, 1]
    else:
        e1, e2 = np.ones(1), np.zeros(1)
    phase = rng.uniform(0, 2 * math.pi)
    ang = phase + 2 * math.pi * np.arange(spec.K) / max(spec.K, 1)
    U = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    return base, U


def generate_synthetic(spec: SyntheticSpec) -> Splits:
    """Train/val/test triple for a compound-shift benchmark.

    Train counts follow the long-tail profile reordered by each domain's
    permutation; val and test are class-balanced.  Samples are
    N(base_c + shift * u_k, sigma^2 I).
    """
    spec.validate()
    rng = stream(spec.seed, "data")
    base, U = domain_geometry(spec, rng)
    perms = domain_permutations(spec, rng)
    profile = long_tail_counts(head_count(spec), spec.C, spec.imbalance_ratio)
    if spec.allow_zero_shot:
        profile[-1] = 0
    names = [f"d{k}" for k in range(spec.K)]
    parts: dict[str, tuple[list, list]] = {s: ([], []) for s in ("train", "val", "test")}
    for k in range(spec.K):
        train_counts = np.zeros(spec.C, dtype=np.int64)
        for rank, c in enumerate(perms[k]):
            train_counts[c] = profile[rank]
        eval_counts = np.full(spec.C, spec.n_eval_per_class, dtype=np.int64)
        for split, counts in (("train", train_counts), ("val", eval_counts), ("test", eval_counts)):
            labels = np.repeat(np.arange(spec.C), counts)
            means = base[labels] + spec.conditional_shift * U[k]
            X = means + spec.noise_sigma * rng.standard_normal((len(labels), spec.input_dim))
            order = rng.permutation(len(labels))
            parts[split][0].append(X[order])
            parts[split][1].append(labels[order].astype(np.int64))
    make = lambda s: DomainDataset(list(names), parts[s][0], parts[s][1], spec.C)  # noqa: E731
    return Splits(make("train"), make("val"), make("test"))


# ---------------------------------------------------------------- file formats

def load_jsonl(path, num_classes: int | None = None) -> DomainDataset:
    """Read ``{"domain", "label", "features"}`` lines; domains keep first-seen order."""
    names: list[str] = []
    rows: dict[str, tuple[list, list]] = {}
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dom, label, feats = str(rec["domain"]), int(rec["label"]), rec["features"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed record ({exc})", lineno) from None
            if not isinstance(feats, list):
                raise ParseError("features must be a list", lineno)
            if dim is None:
                dim = len(feats)
            elif len(feats) != dim:
                raise ParseError(f"expected {dim} features, found {len(feats)}", lineno)
            if label < 0:
                raise ParseError("labels must be non-negative", lineno)
            if dom not in rows:
                names.append(dom)
                rows[dom] = ([], [])
            rows[dom][0].append([float(v) for v in feats])
            rows[dom][1].append(label)
    C = num_classes
    if C is None:
        C = 1 + max((max(r[1]) for r in rows.values()), default=-1)
    X = [np.array(rows[n][0], dtype=np.float64).reshape(-1, dim or 0) for n in names]
    y = [np.array(rows[n][1], dtype=np.int64) for n in names]
    return DomainDataset(names, X, y, max(C, 0))


def write_jsonl(dataset: DomainDataset, path) -> None:
    with open(path, "w") as fh:
        for k, name in enumerate(dataset.names):
            for x, label in zip(dataset.X[k], dataset.y[k]):
                fh.write(json.dumps({"domain": name, "label": int(label), "features": x.tolist()}) + "\n")


def write_csv(dataset: DomainDataset, path) -> None:
    d = dataset.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label", *[f"f{j}" for j in range(d)]])
        for k, name in enumerate(dataset.names):
            for x, label in zip(dataset.X[k], dataset.y[k]):
                w.writerow([name, int(label), *[repr(float(v)) for v in x]])


# ---------------------------------------------------------------- sampling

def sample_batches(dataset: DomainDataset, batch_size: int, rng: np.random.Generator,
                   min_domains: int = 3) -> list[Batch]:
    """One batch per domain; without replacement unless the partition is smaller."""
    if dataset.K < min_domains:
        raise EpisodeError(f"need at least {min_domains} domains, dataset has {dataset.K}")
    out = []
    for k in range(dataset.K):
        n = len(dataset.y[k])
        if n == 0:
            raise EpisodeError(f"domain {dataset.names[k]!r} is empty")
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        out.append(Batch(dataset.X[k][idx], dataset.y[k][idx], np.full(batch_size, k, dtype=np.int64)))
    return out


# ---------------------------------------------------------------- shot buckets

class Shot(str, Enum):
    MANY = "Many"
    MEDIUM = "Medium"
    FEW = "Few"
    ZERO = "Zero"


@dataclass
class ShotPartition:
    buckets: list[list[Shot]]  # [domain][class]
    many_min: int = 100
    medium_min: int = 20

    def bucket(self, domain: int, cls: int) -> Shot:
        return self.buckets[domain][cls]


def classify_count(n: int, many_min: int, medium_min: int) -> Shot:
    if n >= many_min:
        return Shot.MANY
    if n >= medium_min:
        return Shot.MEDIUM
    if n >= 1:
        return Shot.FEW
    return Shot.ZERO


def shot_partition(train: DomainDataset, many_min: int = 100, medium_min: int = 20) -> ShotPartition:
    if not many_min > medium_min > 0:
        raise ValueError("thresholds must satisfy many_min > medium_min > 0")
    counts = train.counts()
    buckets = [[classify_count(int(n), many_min, medium_min) for n in row] for row in counts]
    return ShotPartition(buckets, many_min, medium_min)
