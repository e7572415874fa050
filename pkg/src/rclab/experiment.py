"""Leave-one-domain-out runs over a train/val/test triple."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import Splits
from .meta import EpisodeLog, Monitor, TrainConfig, TrainResult, train
from .model import ModelConfig, ModelParams


@dataclass
class LodoRun:
    snapshots: dict[int, ModelParams] = field(default_factory=dict)
    results: dict[int, TrainResult] = field(default_factory=dict)

    @property
    def logs(self) -> list[EpisodeLog]:
        return [row for k in sorted(self.results) for row in self.results[k].logs]

    @property
    def wall_time(self) -> float:
        return sum(r.wall_time for r in self.results.values())

    @property
    def n_updates(self) -> int:
        return sum(r.n_updates for r in self.results.values())


def iterations_for(config: TrainConfig, k_train: int, equal_updates: bool) -> int:
    """Loop iterations so every ablation cell gets the same number of optimizer updates.

    A meta iteration makes one update per training domain; the other cells
    make one per iteration, so they run ``k_train`` times as many.
    """
    if equal_updates and not config.use_meta:
        return config.steps * k_train
    return config.steps


def run_lodo(splits: Splits, config: TrainConfig, model_config: ModelConfig | None = None,
             heldout: list[int] | None = None, equal_updates: bool = True) -> LodoRun:
    """Train one model per held-out domain; the checkpoint kept is the best by source-domain validation."""
    K = splits.train.K
    if model_config is None:
        model_config = ModelConfig(splits.train.input_dim, splits.train.num_classes)
    run = LodoRun()
    for k in (range(K) if heldout is None else heldout):
        cfg = replace(config, steps=iterations_for(config, K - 1, equal_updates))
        monitor = Monitor(splits.val.without(k), splits.test.subset([k]), k)
        res = train(splits.train.without(k), cfg, model_config, monitor)
        run.results[k] = res
        run.snapshots[k] = res.best_params
    return run
