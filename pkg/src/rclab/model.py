"""MLP feature extractor, linear classifier and flat parameter handling."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ConvergenceError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (32,)
    feat_dim: int = 16
    # unit-sphere features before the classifier (bound-verification configuration)
    normalize_features: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, self.num_classes, *self.hidden)
        if any(int(d) < 1 for d in dims):
            raise ContractError(f"all model dimensions must be >= 1, got {dims}")
        if self.feat_dim < 2:
            raise ContractError("feat_dim must be >= 2")

    @property
    def extractor_widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.feat_dim)

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """(weight, bias) shapes: extractor layers first, classifier last."""
        w = self.extractor_widths
        shapes = [((w[k + 1], w[k]), (1, w[k + 1])) for k in range(len(w) - 1)]
        shapes.append(((self.num_classes, self.feat_dim), (1, self.num_classes)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(a * b + c * d for (a, b), (c, d) in self.layer_shapes())

    @property
    def n_extractor_params(self) -> int:
        return sum(a * b + c * d for (a, b), (c, d) in self.layer_shapes()[:-1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "hidden": tuple(d.get("hidden", ()))})


@dataclass
class ModelParams:
    """Flat parameter vector Θ = (θ, φ) with per-layer views.

    The classifier (φ) occupies the tail of the vector.
    """

    config: ModelConfig
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.config.n_params,):
            raise DimensionError(
                f"flat parameter vector has shape {self.flat.shape}, config needs ({self.config.n_params},)")

    def arrays(self) -> list[np.ndarray]:
        """Views [W1, b1, ..., W_cls, b_cls] into the flat vector."""
        out, pos = [], 0
        for ws, bs in self.config.layer_shapes():
            for shape in (ws, bs):
                n = shape[0] * shape[1]
                out.append(self.flat[pos:pos + n].reshape(shape))
                pos += n
        return out

    @property
    def classifier(self) -> tuple[np.ndarray, np.ndarray]:
        arrs = self.arrays()
        return arrs[-2], arrs[-1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    @classmethod
    def unflatten(cls, config: ModelConfig, flat) -> "ModelParams":
        return cls(config, np.array(flat, dtype=np.float64))

    def to_json(self) -> str:
        # json writes floats with repr(), which round-trips float64 exactly
        return json.dumps({"config": self.config.to_dict(), "flat_params": self.flat.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        d = json.loads(text)
        return cls(ModelConfig.from_dict(d["config"]), np.array(d["flat_params"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_json(Path(path).read_text())


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    parts = []
    for (fo, fi), bs in config.layer_shapes():
        bound = math.sqrt(6.0 / (fi + fo))
        parts.append(rng.uniform(-bound, bound, size=fo * fi))
        parts.append(np.zeros(bs[1]))
    return ModelParams(config, np.concatenate(parts))


def _check_input(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = ad.as_matrix(X)
    if X.shape[1] != params.config.input_dim:
        raise DimensionError(f"input has shape {X.shape}, model expects {params.config.input_dim} columns")
    return X


def raw_features(params: ModelParams, X) -> np.ndarray:
    X = _check_input(params, X)
    arrs = params.arrays()
    h = X
    for k in range(0, len(arrs) - 2, 2):
        h = np.maximum(h @ arrs[k].T + arrs[k + 1], 0.0)
    return h


def normalize(Z: np.ndarray, eps: float = ad.NORM_EPS) -> np.ndarray:
    norms = np.sqrt(np.sum(Z * Z, axis=1, keepdims=True))
    out = Z / np.where(norms < eps, 1.0, norms)
    bad = (norms < eps).ravel()
    if bad.any():
        out[bad] = 0.0
        out[bad, 0] = 1.0
    return out


def features(params: ModelParams, X) -> np.ndarray:
    """f_θ(X); rows are unit-norm when the config asks for normalized features."""
    Z = raw_features(params, X)
    return normalize(Z) if params.config.normalize_features else Z


def logits(params: ModelParams, Z) -> np.ndarray:
    W, b = params.classifier
    Z = ad.as_matrix(Z)
    if Z.shape[1] != W.shape[1]:
        raise DimensionError(f"features have shape {Z.shape}, classifier expects {W.shape[1]} columns")
    return Z @ W.T + b


def predict(params: ModelParams, X) -> np.ndarray:
    return np.argmax(logits(params, features(params, X)), axis=1)


def per_sample_ce(params: ModelParams, X, y) -> np.ndarray:
    L = logits(params, features(params, X))
    mx = L.max(axis=1, keepdims=True)
    lse = (mx + np.log(np.exp(L - mx).sum(axis=1, keepdims=True))).ravel()
    return lse - L[np.arange(len(L)), np.asarray(y, dtype=np.int64)]


class BoundModel:
    """Parameters placed on a tape as leaves, for differentiable forward passes."""

    def __init__(self, tape: ad.Tape, params: ModelParams):
        self.tape = tape
        self.config = params.config
        self.leaves = [tape.leaf(a) for a in params.arrays()]

    def raw_features(self, X) -> ad.Var:
        X = ad.as_matrix(X)
        if X.shape[1] != self.config.input_dim:
            raise DimensionError(f"input has shape {X.shape}, model expects {self.config.input_dim} columns")
        h = self.tape.const(X)
        for k in range(0, len(self.leaves) - 2, 2):
            h = ad.relu(ad.linear(h, self.leaves[k], self.leaves[k + 1]))
        return h

    def features(self, X) -> ad.Var:
        return self.finish(self.raw_features(X))

    def finish(self, raw: ad.Var) -> ad.Var:
        """Row-normalize raw extractor output when the config asks for it."""
        if self.config.normalize_features:
            raw, _ = ad.normalize_rows(raw)
        return raw

    def logits(self, Z: ad.Var) -> ad.Var:
        return ad.linear(Z, self.leaves[-2], self.leaves[-1])

    def gradient(self, out: ad.Var) -> np.ndarray:
        """Flat gradient of a scalar output, laid out like ``ModelParams.flat``."""
        grads = self.tape.backward(out, self.leaves)
        return np.concatenate([g.ravel() for g in grads])


def lipschitz_constant(params: ModelParams, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """sqrt(2) * sigma_max(W) for the linear classifier, by power iteration on W^T W.

    For cross-entropy on a linear head, the feature gradient is W^T (p - e_y)
    and ||p - e_y|| <= sqrt(2), so this bounds the loss's Lipschitz constant
    in the feature metric.
    """
    W, _ = params.classifier
    return math.sqrt(2.0) * spectral_norm(W, tol=tol, max_iter=max_iter)


def spectral_norm(W: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        return 0.0
    M = W.T @ W
    # deterministic start with support on every coordinate
    v = np.linspace(1.0, 2.0, M.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector orthogonal to the range; reseed deterministically
            v = np.roll(v, 1) + 1e-3
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        Mv = M @ v
        lam = float(v @ Mv)
        # stop on the eigen-residual, not on successive Rayleigh quotients, which
        # can stall below sigma_max when the top two singular values are close
        if np.linalg.norm(Mv - lam * v) <= tol * lam:
            return math.sqrt(lam)
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps")


def apply_delta(params: ModelParams, grad, alpha: float) -> ModelParams:
    """Return params - alpha * grad; the input is left untouched."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match parameters {params.flat.shape}")
    return ModelParams(params.config, params.flat - alpha * g)
