from dataclasses import replace

import numpy as np

from rclab.data import SyntheticSpec, generate_synthetic
from rclab.experiment import iterations_for, run_lodo
from rclab.meta import TrainConfig, ablation


def test_iterations_for_equal_updates():
    cfg = TrainConfig(steps=10)
    assert iterations_for(cfg, 3, True) == 10
    assert iterations_for(ablation(cfg, "erm"), 3, True) == 30
    assert iterations_for(ablation(cfg, "da"), 3, False) == 10


def test_run_lodo_cells_get_equal_updates():
    splits = generate_synthetic(SyntheticSpec(K=4, C=3, input_dim=4, n_per_domain=120, n_eval_per_class=6,
                                                imbalance_ratio=1.0))
    cfg = TrainConfig(steps=3, batch_size=16, log_interval=1)
    runs = {name: run_lodo(splits, ablation(cfg, name), heldout=[0, 2]) for name in ("erm", "m", "full")}
    for run in runs.values():
        assert sorted(run.snapshots) == [0, 2]
        assert {r.held_out for r in run.logs} == {0, 2}
    assert len({run.n_updates for run in runs.values()}) == 1
    assert runs["erm"].n_updates == 2 * 3 * 3


def test_run_lodo_snapshot_is_best_by_source_validation():
    splits = generate_synthetic(SyntheticSpec(K=4, C=2, input_dim=3, n_per_domain=60, n_eval_per_class=5,
                                                imbalance_ratio=1.0))
    run = run_lodo(splits, replace(TrainConfig(steps=4, batch_size=16), log_interval=1), heldout=[1])
    res = run.results[1]
    best = max(res.logs, key=lambda r: r.source_acc)
    assert res.best_step == best.step
    assert not np.array_equal(run.snapshots[1].flat, np.zeros_like(run.snapshots[1].flat))
