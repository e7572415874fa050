"""``rclab`` command line: gen, train, eval, bounds, correlate.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 bound-audit
violation. Settings resolve as flags > ``--config`` file > defaults and the
resolved configuration is written next to the outputs as ``config.json``;
passing that file back via ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .bounds import SLACK_TOL, episode_report, mixture_bound_report, write_bound_reports, _jsonable
from .data import (DomainDataset, Splits, SyntheticSpec, generate_synthetic, load_jsonl, shot_partition,
                   write_jsonl)
from .errors import RCLabError, ReportError
from .evaluation import (DEFAULT_BURN_IN, config_digest, gap_correlation, lodo_evaluate, read_logs_csv,
                         write_correlation_csv, write_logs_csv, write_manifest, write_plot_data, write_reports)
from .experiment import run_lodo
from .meta import ABLATIONS, TrainConfig
from .model import ModelConfig, ModelParams

log = logging.getLogger("rclab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2, 3
SPLIT_FILES = ("train.jsonl", "val.jsonl", "test.jsonl")


@dataclass
class RunConfig:
    """Everything a command needs besides the output directory.

    ``model`` holds the architecture knobs only; input and class counts
    always come from the data.
    """

    spec: dict = field(default_factory=lambda: SyntheticSpec().to_dict())
    model: dict = field(default_factory=lambda: {"hidden": [32], "feat_dim": 16, "normalize_features": True})
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    ablation: str = "full"
    data: str | None = None
    heldout: list[int] | None = None
    seeds: list[int] | None = None
    equal_updates: bool = True
    many_min: int = 100
    medium_min: int = 20
    burn_in: int = DEFAULT_BURN_IN
    omega_mode: str = "uniform"
    episodes: list[int] | None = None
    label_penalty: str = "inf"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls()
        unknown = set(d) - set(base.to_dict())
        if unknown:
            raise RCLabError(f"unknown config keys: {sorted(unknown)}")
        for key in ("spec", "model", "train"):
            if key in d:
                d = {**d, key: {**getattr(base, key), **d[key]}}
        return replace(base, **d)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def model_config(self, dataset: DomainDataset) -> ModelConfig:
        return ModelConfig(dataset.input_dim, dataset.num_classes, tuple(self.model["hidden"]),
                           int(self.model["feat_dim"]), bool(self.model["normalize_features"]))


# ---------------------------------------------------------------- argument parsing

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _all_or_ints(text: str):
    return None if text == "all" else _int_list(text)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (a previous config.json works)")
    p.add_argument("--out", type=Path, help="output directory (default: $RCLAB_OUT or ./rclab_out)")
    p.add_argument("-v", "--verbose", action="store_true")


# argparse dest -> key in the spec / train section
SPEC_FLAGS = {"k": "K", "c": "C", "imbalance": "imbalance_ratio", "shift": "conditional_shift",
              "noise": "noise_sigma", "input_dim": "input_dim", "n_per_domain": "n_per_domain",
              "class_sep": "class_sep", "n_eval": "n_eval_per_class"}
TRAIN_FLAGS = {"lambda_da": "lambda_da", "steps": "steps", "inner_lr": "inner_lr", "outer_lr": "outer_lr",
               "batch_size": "batch_size", "temperature": "temperature", "mask_policy": "mask_policy",
               "inner_steps": "inner_steps", "log_interval": "log_interval", "alpha_mixup": "alpha_mixup",
               "weight_decay": "weight_decay"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rclab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rclab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic multi-domain long-tailed benchmark")
    _common(g)
    g.add_argument("--k", type=int)
    g.add_argument("--c", type=int)
    g.add_argument("--imbalance", type=float, help="head/tail count ratio (1 = balanced)")
    g.add_argument("--shift", type=float, help="class-conditional shift strength (0 = none)")
    g.add_argument("--noise", type=float)
    g.add_argument("--input-dim", type=int)
    g.add_argument("--n-per-domain", type=int)
    g.add_argument("--class-sep", type=float)
    g.add_argument("--n-eval", type=int, help="val/test samples per class and domain")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="LODO training, one checkpoint per held-out domain")
    _common(t)
    t.add_argument("--data", help="directory holding train/val/test JSONL")
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    for flag, typ in (("lambda-da", float), ("steps", int), ("inner-lr", float), ("outer-lr", float),
                      ("batch-size", int), ("temperature", float), ("inner-steps", int), ("log-interval", int),
                      ("alpha-mixup", float), ("weight-decay", float)):
        t.add_argument(f"--{flag}", type=typ)
    t.add_argument("--mask-policy", choices=("algorithm2", "lemma"))
    t.add_argument("--hidden", type=_int_list, help="comma-separated hidden widths")
    t.add_argument("--feat-dim", type=int)
    t.add_argument("--heldout", type=_all_or_ints, help="'all' or comma-separated domain indices")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", type=_int_list, help="comma-separated seeds; each gets a seed<N>/ subdirectory")
    t.add_argument("--jobs", type=int, default=1, help="parallel processes across seeds")
    t.add_argument("--no-equal-updates", action="store_true",
                   help="give every cell the same iteration count instead of the same update count")

    e = sub.add_parser("eval", help="score checkpoints on the test split")
    _common(e)
    e.add_argument("--run", type=Path, required=True, help="output directory of `rclab train`")
    e.add_argument("--data")
    e.add_argument("--many-min", type=int)
    e.add_argument("--medium-min", type=int)
    e.add_argument("--burn-in", type=int)

    b = sub.add_parser("bounds", help="audit the generalization bounds on trained checkpoints")
    _common(b)
    b.add_argument("--run", type=Path, required=True)
    b.add_argument("--data")
    b.add_argument("--episodes", type=_all_or_ints, help="'all' or comma-separated episode indices")
    b.add_argument("--omega", choices=("uniform", "size"), dest="omega_mode")
    b.add_argument("--label-penalty", help="'inf', 'lipschitz' or a number")

    c = sub.add_parser("correlate", help="held-out alignment loss vs generalization gap")
    _common(c)
    c.add_argument("--logs", type=Path, required=True, help="episodes.csv from `rclab train`")
    c.add_argument("--burn-in", type=int)
    return parser


def resolve(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    """Defaults, then the config file, then explicit flags."""
    cfg = RunConfig()
    if args.config is not None:
        try:
            cfg = RunConfig.from_dict(json.loads(args.config.read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise RCLabError(f"cannot read config {args.config}: {exc}") from exc
    a = vars(args)
    spec = dict(cfg.spec)
    for flag, key in SPEC_FLAGS.items():
        if a.get(flag) is not None:
            spec[key] = a[flag]
    train = dict(cfg.train)
    if a.get("ablation") is not None:
        cfg.ablation = a["ablation"]
    if args.command == "train":
        train.update(ABLATIONS[cfg.ablation])
    for flag, key in TRAIN_FLAGS.items():
        if a.get(flag) is not None:
            train[key] = a[flag]
    if a.get("seed") is not None:
        spec["seed"] = train["seed"] = a["seed"]
    model = dict(cfg.model)
    if a.get("hidden") is not None:
        model["hidden"] = a["hidden"]
    if a.get("feat_dim") is not None:
        model["feat_dim"] = a["feat_dim"]
    cfg = replace(cfg, spec=spec, train=train, model=model)
    for key in ("data", "heldout", "seeds", "many_min", "medium_min", "burn_in", "omega_mode", "episodes",
                "label_penalty"):
        if a.get(key) is not None:
            setattr(cfg, key, a[key])
    if a.get("no_equal_updates"):
        cfg.equal_updates = False
    out = args.out or Path(os.environ.get("RCLAB_OUT") or "rclab_out")
    return cfg, out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")


def _load_splits(data: str | None, run_cfg: dict | None = None) -> Splits:
    if data is None and run_cfg is not None:
        data = run_cfg.get("data")
    if data is None:
        raise RCLabError("no dataset given; pass --data DIR")
    root = Path(data)
    try:
        spec = json.loads((root / "spec.json").read_text()) if (root / "spec.json").exists() else {}
        C = spec.get("C")
        parts = [load_jsonl(root / name, C) for name in SPLIT_FILES]
    except OSError as exc:
        raise RCLabError(f"cannot read dataset under {root}: {exc}") from exc
    C = max(p.num_classes for p in parts)
    parts = [DomainDataset(p.names, p.X, p.y, C) for p in parts]
    return Splits(*parts)


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig, out: Path) -> int:
    spec = SyntheticSpec.from_dict(cfg.spec)
    splits = generate_synthetic(spec)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLIT_FILES, (splits.train, splits.val, splits.test)):
        write_jsonl(part, out / name)
    _write_json(out / "spec.json", spec.to_dict())
    write_manifest(out, [*SPLIT_FILES, "spec.json"])
    log.info("wrote %s (train sizes %s)", out, splits.train.sizes())
    return EXIT_OK


def _train_one(cfg: RunConfig, seed: int, out: Path) -> dict:
    splits = _load_splits(cfg.data)
    train_cfg = replace(cfg.train_config(), seed=seed)
    run_cfg = replace(cfg, train=train_cfg.to_dict(), seeds=None)
    model_cfg = cfg.model_config(splits.train)
    run = run_lodo(splits, train_cfg, model_cfg, cfg.heldout, cfg.equal_updates)
    out.mkdir(parents=True, exist_ok=True)
    files = ["config.json", "episodes.csv", "checkpoints.json"]
    _write_json(out / "config.json", run_cfg.to_dict())
    write_logs_csv(run.logs, out / "episodes.csv")
    index = {}
    for k, params in sorted(run.snapshots.items()):
        name = f"ckpt_{k}.json"
        params.save(out / name)
        files.append(name)
        res = run.results[k]
        index[str(k)] = {"domain": splits.train.names[k], "file": name, "best_step": res.best_step,
                         "n_updates": res.n_updates, "final_loss": res.loss_curve[-1] if res.loss_curve else None}
    _write_json(out / "checkpoints.json", index)
    write_manifest(out, files)
    log.info("seed %d: %d checkpoints, %.1fs training", seed, len(index), run.wall_time)
    return {"seed": seed, "out": str(out), "wall_time": run.wall_time}


def cmd_train(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    if cfg.data is None:
        raise RCLabError("train needs --data DIR (output of `rclab gen`)")
    cfg.data = str(cfg.data)
    if not cfg.seeds:
        _train_one(cfg, int(cfg.train["seed"]), out)
        return EXIT_OK
    targets = [(s, out / f"seed{s}") for s in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for f in [pool.submit(_train_one, cfg, s, o) for s, o in targets]:
                f.result()
    else:
        for s, o in targets:
            _train_one(cfg, s, o)
    return EXIT_OK


def _run_dirs(run: Path) -> list[Path]:
    if (run / "config.json").exists():
        return [run]
    dirs = sorted((d for d in run.glob("seed*") if (d / "config.json").exists()),
                  key=lambda d: int(d.name[4:]) if d.name[4:].isdigit() else d.name)
    if not dirs:
        raise RCLabError(f"{run} holds no training output (config.json missing)")
    return dirs


def _load_run(run: Path) -> tuple[dict, dict[int, ModelParams]]:
    run_cfg = json.loads((run / "config.json").read_text())
    index = json.loads((run / "checkpoints.json").read_text())
    snaps = {int(k): ModelParams.load(run / v["file"]) for k, v in index.items()}
    return run_cfg, snaps


def cmd_eval(cfg: RunConfig, out: Path, run: Path) -> int:
    results, per_seed = [], []
    for d in _run_dirs(run):
        run_cfg, snaps = _load_run(d)
        splits = _load_splits(cfg.data, run_cfg)
        part = shot_partition(splits.train, cfg.many_min, cfg.medium_min)
        res = lodo_evaluate(snaps, splits.test, part, run_cfg["train"]["seed"], config_digest(run_cfg))
        results.append(res)
        logs = read_logs_csv(d / "episodes.csv") if (d / "episodes.csv").exists() else []
        per_seed.append((d, res, logs))
    if len(per_seed) == 1:
        write_reports(results, [], per_seed[0][2], out, cfg.burn_in)
    else:
        for d, res, logs in per_seed:
            write_reports([res], [], logs, out / d.name, cfg.burn_in)
        write_reports(results, [], [], out, cfg.burn_in)
    for r in results:
        log.info("seed %s: Average %.1f Worst %.1f", r.seed, r.average, r.worst)
    return EXIT_OK


def _label_penalty(text: str):
    if text == "inf":
        return math.inf
    if text == "lipschitz":
        return text
    try:
        return float(text)
    except ValueError:
        raise RCLabError(f"--label-penalty must be 'inf', 'lipschitz' or a number, got {text!r}") from None


def cmd_bounds(cfg: RunConfig, out: Path, run: Path) -> int:
    """One report per episode i, audited with the checkpoint that held domain i out."""
    run_cfg, snaps = _load_run(_run_dirs(run)[0])
    splits = _load_splits(cfg.data, run_cfg)
    K = splits.train.K
    episodes = list(range(K)) if cfg.episodes is None else cfg.episodes
    bad = [i for i in episodes if not 0 <= i < K]
    if bad:
        raise RCLabError(f"episode indices {bad} outside 0..{K - 1}")
    missing = [i for i in episodes if i not in snaps]
    if missing:
        raise ReportError(f"no checkpoint holding out domain(s) {missing}")
    penalty = _label_penalty(cfg.label_penalty)
    lam = run_cfg["train"]["lambda_da"]
    reports, mixtures, warnings, theorem3_bad = [], [], [], []
    for i in episodes:
        rep = episode_report(snaps[i], splits.train, i, cfg.omega_mode, lam)
        reports.append(rep)
        warnings += [f"episode {i}: {f}" for f in rep.flags]
        src = splits.train.without(i)
        mix = mixture_bound_report(snaps[i], src, splits.test.X[i], splits.test.y[i], [1.0 / src.K] * src.K, penalty)
        mixtures.append({"episode": i, **mix.to_dict()})
        if mix.slack < -SLACK_TOL:
            theorem3_bad.append(i)
        warnings += [f"episode {i} mixture: {f}" for f in mix.flags]
    out.mkdir(parents=True, exist_ok=True)
    write_bound_reports(reports, out / "bounds.json", out / "bounds.csv")
    violations = {f"episode {r.episode}": r.violations() for r in reports if r.violations()}
    for i in theorem3_bad:
        violations.setdefault(f"episode {i}", []).append("theorem3")
    summary = {"episodes": episodes, "omega_mode": cfg.omega_mode, "passed": not violations,
               "violations": violations, "warnings": warnings, "mixture": mixtures}
    _write_json(out / "bounds_summary.json", summary)
    write_manifest(out, ["bounds.json", "bounds.csv", "bounds_summary.json"])
    for w in warnings:
        log.warning(w)
    if violations:
        log.error("bound violations: %s", violations)
        return EXIT_VIOLATION
    log.info("all %d episode audits passed", len(reports))
    return EXIT_OK


def cmd_correlate(cfg: RunConfig, out: Path, logs_path: Path) -> int:
    try:
        logs = read_logs_csv(logs_path)
    except (OSError, KeyError, ValueError) as exc:
        raise RCLabError(f"cannot read logs {logs_path}: {exc}") from exc
    corr = gap_correlation(logs, cfg.burn_in)
    out.mkdir(parents=True, exist_ok=True)
    write_correlation_csv(corr, out / "correlation.csv")
    write_plot_data(logs, out / "da_vs_gap.csv")
    write_manifest(out, ["correlation.csv", "da_vs_gap.csv"])
    for scope, c in corr.items():
        if c.undefined:
            log.warning("%s: correlation undefined (zero variance or too few points)", scope)
        else:
            log.info("%s: r=%.3f p=%.3g n=%d", scope, c.r, c.p, c.n)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg, out = resolve(args)
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.jobs)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.run)
        if args.command == "bounds":
            return cmd_bounds(cfg, out, args.run)
        return cmd_correlate(cfg, out, args.logs)
    except (RCLabError, OSError, ValueError) as exc:
        print(f"rclab {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
