"""RC-Align training (LODO episodes, first-order MAML) and the ERM baseline."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .data import Batch, DomainDataset, sample_batches, stream
from .errors import ContractError, EpisodeError
from .losses import (CentroidTable, DaMaskPolicy, centroids_from_features, cross_entropy_batch,
                     da_loss_features, mix_features, mixed_loss, sample_mixup_lambda)
from .model import BoundModel, ModelConfig, ModelParams, apply_delta, features, init_params, predict

LAMBDA_GRID = (0.1, 0.5, 1.0, 2.0)


@dataclass
class TrainConfig:
    inner_lr: float = 0.1
    outer_lr: float = 1e-3
    lambda_da: float = 2.0
    alpha_mixup: float = 0.5
    batch_size: int = 64
    steps: int = 300
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    use_meta: bool = True
    use_da: bool = True
    use_mixup: bool = True
    inner_steps: int = 1
    mask_policy: str = "algorithm2"
    temperature: float = 0.1
    log_interval: int = 10
    seed: int = 0

    def validate(self) -> None:
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise ContractError("inner_lr and outer_lr must be > 0")
        if self.steps < 1 or self.batch_size < 1 or self.inner_steps < 1 or self.log_interval < 1:
            raise ContractError("steps, batch_size, inner_steps and log_interval must be >= 1")
        if self.lambda_da < 0 or self.weight_decay < 0:
            raise ContractError("lambda_da and weight_decay must be >= 0")
        if not self.alpha_mixup > 0:
            raise ContractError("alpha_mixup must be > 0")

    @property
    def policy(self) -> DaMaskPolicy:
        return DaMaskPolicy.named(self.mask_policy, self.temperature)

    @property
    def effective_lambda(self) -> float:
        return self.lambda_da if self.use_da else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


ABLATIONS = {
    "erm": dict(use_meta=False, use_da=False, use_mixup=False),
    "m": dict(use_meta=True, use_da=False, use_mixup=False),
    "da": dict(use_meta=False, use_da=True, use_mixup=False),
    "m_da": dict(use_meta=True, use_da=True, use_mixup=False),
    "full": dict(use_meta=True, use_da=True, use_mixup=True),
}


def ablation(config: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(config, **ABLATIONS[name])


class Adam:
    """Adam with decoupled weight decay: θ ← θ − η (m̂ / (√v̂ + ε) + wd·θ)."""

    def __init__(self, n: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: ModelParams, grad: np.ndarray) -> ModelParams:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        direction = mhat / (np.sqrt(vhat) + self.eps) + self.wd * params.flat
        return ModelParams(params.config, params.flat - self.lr * direction)

    @classmethod
    def for_config(cls, n: int, config: TrainConfig) -> "Adam":
        return cls(n, config.outer_lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)


def random_pairs(domain_ids, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Shuffle and chunk into pairs; an odd leftover joins a random earlier domain."""
    ids = list(domain_ids)
    if len(ids) < 2:
        raise EpisodeError(f"need at least 2 support domains to form pairs, got {len(ids)}")
    order = [ids[k] for k in rng.permutation(len(ids))]
    pairs = [(order[k], order[k + 1]) for k in range(0, len(order) - 1, 2)]
    if len(order) % 2:
        partner = order[int(rng.integers(len(order) - 1))]
        pairs.append((order[-1], partner))
    return pairs


@dataclass
class InnerResult:
    adapted: ModelParams
    loss: float
    ce: float
    da: float | None
    tape_released: bool


def inner_objective(model: BoundModel, batches: list[Batch], config: TrainConfig,
                    rng: np.random.Generator, table: CentroidTable | None = None
                    ) -> tuple[ad.Var, float, float | None, CentroidTable | None]:
    """Composite support loss: mixup pairs when enabled, else the pooled batch.

    When DA is on and no table is given, centroids are taken (without
    gradient) from the same forward pass that feeds the loss.
    """
    lam_da = config.effective_lambda
    policy = config.policy
    if config.use_mixup:
        pooled = Batch.concat(batches)
        raw = model.raw_features(pooled.X)
        if lam_da > 0 and table is None:
            table = centroids_from_features(raw.value, pooled.y, pooled.domain)
        Z = model.finish(raw)
        ends = np.cumsum([len(b) for b in batches])
        feats = {int(b.domain[0]): (b, ad.rows(Z, np.arange(e - len(b), e))) for b, e in zip(batches, ends)}
        pairs = random_pairs(sorted(feats), rng)
        total, ce_sum, da_sum = None, 0.0, 0.0
        for j1, j2 in pairs:
            lam = sample_mixup_lambda(config.alpha_mixup, rng)
            (b1, z1), (b2, z2) = feats[j1], feats[j2]
            loss, parts = mixed_loss(model, mix_features(z1, z2, lam), b1, b2, lam, lam_da, table, policy)
            total = loss if total is None else ad.add(total, loss)
            ce_sum += parts["ce"]
            da_sum += parts["da"] or 0.0
        total = ad.scale(total, 1.0 / len(pairs))
        return total, ce_sum / len(pairs), (da_sum / len(pairs) if lam_da > 0 else None), table
    pooled = Batch.concat(batches)
    raw = model.raw_features(pooled.X)
    if lam_da > 0 and table is None:
        table = centroids_from_features(raw.value, pooled.y, pooled.domain)
    Z = model.finish(raw)
    ce = cross_entropy_batch(model, Z, pooled.y)
    if lam_da == 0:
        return ce, ce.item(), None, table
    da, _ = da_loss_features(Z, pooled.y, pooled.domain, table, policy)
    return ad.add(ce, ad.scale(da, lam_da)), ce.item(), da.item(), table


def inner_adapt(params: ModelParams, support_batches: list[Batch], config: TrainConfig,
                rng: np.random.Generator) -> InnerResult:
    """One (or ``inner_steps``) plain gradient step(s) Θ' = Θ − α ∇L_inner(Θ).

    Centroids come from the support batches at the incoming Θ and are held
    fixed.  The tape is released before returning, so nothing downstream can
    differentiate through the adaptation.
    """
    adapted = params
    first = None
    table = None
    tape = None
    for _ in range(config.inner_steps):
        tape = ad.Tape()
        model = BoundModel(tape, adapted)
        loss, ce, da, table = inner_objective(model, support_batches, config, rng, table)
        grad = model.gradient(loss)
        if first is None:
            first = (loss.item(), ce, da)
        tape.release()
        adapted = apply_delta(adapted, grad, config.inner_lr)
    return InnerResult(adapted, first[0], first[1], first[2], tape.released)


def outer_step(params: ModelParams, adapted: ModelParams, held_out: Batch, optimizer: Adam) -> tuple[ModelParams, float]:
    """First-order meta-update: ∇_{Θ'} CE(B_i; Θ') applied at Θ through Adam."""
    tape = ad.Tape()
    model = BoundModel(tape, adapted)
    loss = cross_entropy_batch(model, model.features(held_out.X), held_out.y)
    grad = model.gradient(loss)
    value = loss.item()
    tape.release()
    return optimizer.step(params, grad), value


# ------------------------------------------------------------------ monitoring

@dataclass
class Monitor:
    """Evaluation data watched during training (never used for gradients).

    ``source`` holds eval splits of the training domains in the same order;
    ``target`` is the held-out domain's eval split (one domain) or None.
    """

    source: DomainDataset
    target: DomainDataset | None = None
    target_index: int = -1


@dataclass
class EpisodeLog:
    step: int
    held_out: int
    inner_loss: float
    outer_loss: float | None
    da_heldout: float | None
    gap: float | None
    source_acc: float
    target_acc: float | None

    CSV_FIELDS = ("step", "i", "inner_loss", "outer_loss", "da_heldout", "gap")

    def csv_row(self) -> list:
        return [self.step, self.held_out, self.inner_loss, self.outer_loss, self.da_heldout, self.gap]


def accuracy(params: ModelParams, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(params, X) == y))


def heldout_da(params: ModelParams, monitor: Monitor, policy: DaMaskPolicy) -> float | None:
    """Target-domain DA loss against centroids of the source eval splits."""
    if monitor.target is None:
        return None
    src = monitor.source.pooled()
    table = centroids_from_features(features(params, src.X), src.y, src.domain)
    tgt = monitor.target.batch(0)
    tgt = Batch(tgt.X, tgt.y, np.full(len(tgt), monitor.source.K, dtype=np.int64))
    tape = ad.Tape()
    Z = tape.const(features(params, tgt.X))
    try:
        loss, _ = da_loss_features(Z, tgt.y, tgt.domain, table, policy)
    except EpisodeError:
        return None
    return loss.item()


def snapshot(params: ModelParams, monitor: Monitor, policy: DaMaskPolicy) -> dict:
    src_acc = [accuracy(params, monitor.source.X[k], monitor.source.y[k]) for k in range(monitor.source.K)]
    out = {"source_acc": float(np.mean(src_acc)), "target_acc": None, "gap": None, "da_heldout": None}
    if monitor.target is not None:
        tacc = accuracy(params, monitor.target.X[0], monitor.target.y[0])
        out["target_acc"] = tacc
        out["gap"] = (1 - tacc) - float(np.mean([1 - a for a in src_acc]))
        out["da_heldout"] = heldout_da(params, monitor, policy)
    return out


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_step: int
    logs: list[EpisodeLog] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    inner_curve: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    n_updates: int = 0


class _Tracker:
    """Interval logging plus training-domain-validation model selection."""

    def __init__(self, config: TrainConfig, monitor: Monitor | None, params: ModelParams):
        self.config, self.monitor = config, monitor
        self.best = params
        self.best_step = 0
        self.best_acc = -np.inf
        self.logs: list[EpisodeLog] = []
        self.eval_time = 0.0

    def maybe_log(self, step: int, params: ModelParams, inner: float, outer: float | None) -> None:
        if step % self.config.log_interval or self.monitor is None:
            return
        t0 = time.perf_counter()
        snap = snapshot(params, self.monitor, self.config.policy)
        self.logs.append(EpisodeLog(step, self.monitor.target_index, inner, outer, snap["da_heldout"],
                                    snap["gap"], snap["source_acc"], snap["target_acc"]))
        if snap["source_acc"] > self.best_acc:
            self.best_acc, self.best, self.best_step = snap["source_acc"], params, step
        self.eval_time += time.perf_counter() - t0


def rc_align_train(dataset: DomainDataset, config: TrainConfig, model_config: ModelConfig | None = None,
                   monitor: Monitor | None = None, params: ModelParams | None = None) -> TrainResult:
    """Algorithm-1 training loop.

    With ``use_meta`` every iteration runs K sequential LODO episodes, each an
    inner adaptation on the other domains followed by an Adam update from the
    held-out domain's loss at the adapted point.  Without it the inner
    objective over all domains is minimized directly, one update per
    iteration, which with DA and mixup off is exactly pooled ERM.
    """
    config.validate()
    if dataset.K < 3:
        raise EpisodeError(f"LODO training needs K >= 3 domains, got {dataset.K}")
    if model_config is None:
        model_config = ModelConfig(dataset.input_dim, dataset.num_classes)
    if params is None:
        params = init_params(model_config, stream(config.seed, "init"))
    batch_rng = stream(config.seed, "batch")
    mix_rng = stream(config.seed, "mixup")
    opt = Adam.for_config(params.flat.size, config)
    tracker = _Tracker(config, monitor, params)
    result = TrainResult(params, params, 0)
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        try:
            batches = sample_batches(dataset, config.batch_size, batch_rng, min_domains=3)
            if config.use_meta:
                inner_losses, outer_losses = [], []
                for i in range(dataset.K):
                    support = [b for k, b in enumerate(batches) if k != i]
                    inner = inner_adapt(params, support, config, mix_rng)
                    params, outer = outer_step(params, inner.adapted, batches[i], opt)
                    inner_losses.append(inner.loss)
                    outer_losses.append(outer)
                    result.n_updates += 1
                inner_v, outer_v = float(np.mean(inner_losses)), float(np.mean(outer_losses))
                result.loss_curve.append(outer_v)
            else:
                tape = ad.Tape()
                model = BoundModel(tape, params)
                loss, _, _, _ = inner_objective(model, batches, config, mix_rng)
                grad = model.gradient(loss)
                inner_v, outer_v = loss.item(), None
                tape.release()
                params = opt.step(params, grad)
                result.n_updates += 1
                result.loss_curve.append(inner_v)
        except EpisodeError as exc:
            raise EpisodeError(str(exc), step=step) from exc
        result.inner_curve.append(inner_v)
        tracker.maybe_log(step, params, inner_v, outer_v)
    result.wall_time = time.perf_counter() - t0 - tracker.eval_time
    result.params = params
    # without any logged point there is nothing to select on; keep the final iterate
    selected = monitor is not None and bool(tracker.logs)
    result.best_params = tracker.best if selected else params
    result.best_step = tracker.best_step if selected else config.steps
    result.logs = tracker.logs
    return result


def erm_train(dataset: DomainDataset, config: TrainConfig, model_config: ModelConfig | None = None,
              monitor: Monitor | None = None, params: ModelParams | None = None) -> TrainResult:
    """Pooled-domain minibatch cross-entropy with Adam; lambda_da is ignored."""
    config.validate()
    if model_config is None:
        model_config = ModelConfig(dataset.input_dim, dataset.num_classes)
    if params is None:
        params = init_params(model_config, stream(config.seed, "init"))
    batch_rng = stream(config.seed, "batch")
    opt = Adam.for_config(params.flat.size, config)
    tracker = _Tracker(config, monitor, params)
    result = TrainResult(params, params, 0)
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        pooled = Batch.concat(sample_batches(dataset, config.batch_size, batch_rng, min_domains=1))
        tape = ad.Tape()
        model = BoundModel(tape, params)
        loss = cross_entropy_batch(model, model.features(pooled.X), pooled.y)
        grad = model.gradient(loss)
        value = loss.item()
        tape.release()
        params = opt.step(params, grad)
        result.n_updates += 1
        result.loss_curve.append(value)
        result.inner_curve.append(value)
        tracker.maybe_log(step, params, value, None)
    result.wall_time = time.perf_counter() - t0 - tracker.eval_time
    result.params = params
    # without any logged point there is nothing to select on; keep the final iterate
    selected = monitor is not None and bool(tracker.logs)
    result.best_params = tracker.best if selected else params
    result.best_step = tracker.best_step if selected else config.steps
    result.logs = tracker.logs
    return result


def train(dataset: DomainDataset, config: TrainConfig, model_config: ModelConfig | None = None,
          monitor: Monitor | None = None) -> TrainResult:
    """Dispatch: the all-off ablation cell goes to ERM, everything else to RC-Align."""
    if not (config.use_meta or config.use_da or config.use_mixup):
        return erm_train(dataset, config, model_config, monitor)
    return rc_align_train(dataset, config, model_config, monitor)
