"""LODO accuracy tables, the alignment-loss/gap correlation study and report files."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data import DomainDataset, Shot, ShotPartition
from .errors import ReportError
from .meta import EpisodeLog
from .model import ModelParams, predict

MIN_LOG_POINTS = 30
DEFAULT_BURN_IN = 200


@dataclass
class EvalResult:
    per_domain: dict[str, float]
    average: float
    worst: float
    by_shot: dict[str, float | None]
    seed: int | None = None
    config_digest: str = ""
    shot_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def lodo_evaluate(snapshots: dict[int, ModelParams], test: DomainDataset,
                  partition: ShotPartition | None = None, seed: int | None = None,
                  digest: str = "") -> EvalResult:
    """Score each held-out domain with its own snapshot; accuracies in percent."""
    missing = [test.names[k] for k in range(test.K) if k not in snapshots]
    if missing:
        raise ReportError(f"no snapshot for held-out domain(s): {', '.join(missing)}")
    per_domain = {}
    hits = {s.value: 0 for s in Shot}
    totals = {s.value: 0 for s in Shot}
    for k in range(test.K):
        pred = predict(snapshots[k], test.X[k])
        correct = pred == test.y[k]
        per_domain[test.names[k]] = 100.0 * float(np.mean(correct)) if len(correct) else float("nan")
        if partition is not None:
            for c, ok in zip(test.y[k].tolist(), correct.tolist()):
                b = partition.bucket(k, c).value
                hits[b] += int(ok)
                totals[b] += 1
    accs = list(per_domain.values())
    by_shot = {b: (100.0 * hits[b] / totals[b] if totals[b] else None) for b in hits} if partition else {}
    return EvalResult(per_domain, float(np.mean(accs)), float(np.min(accs)), by_shot, seed, digest,
                      dict(totals) if partition else {})


# ---------------------------------------------------------------- correlation

@dataclass
class Correlation:
    r: float | None
    p: float | None
    n: int
    undefined: bool

    def row(self, scope: str) -> list:
        return [scope, self.n, self.r, self.p, int(self.undefined)]


def pearson(x, y) -> Correlation:
    """Pearson r with a two-sided p-value from t = r √((n−2)/(1−r²))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 3:
        return Correlation(None, None, n, True)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return Correlation(None, None, n, True)
    r = max(-1.0, min(1.0, float(dx @ dy) / (sx * sy)))
    if abs(r) == 1.0:
        return Correlation(r, 0.0, n, False)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return Correlation(r, float(2.0 * stats.t.sf(abs(t), n - 2)), n, False)


def correlation_points(logs: list[EpisodeLog]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = [(l.step, l.da_heldout, l.gap) for l in logs if l.da_heldout is not None and l.gap is not None]
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    a = np.array(rows, dtype=np.float64)
    return a[:, 0].astype(np.int64), a[:, 1], a[:, 2]


def gap_correlation(logs: list[EpisodeLog], burn_in: int = DEFAULT_BURN_IN) -> dict[str, Correlation]:
    """Correlation of held-out alignment loss with the generalization gap, all points and step ≥ burn_in."""
    steps, da, gap = correlation_points(logs)
    if len(steps) < MIN_LOG_POINTS:
        raise ReportError(f"need at least {MIN_LOG_POINTS} log points with both series, got {len(steps)}")
    stable = steps >= burn_in
    return {"all": pearson(da, gap), "stable": pearson(da[stable], gap[stable])}


# ---------------------------------------------------------------- files

LOG_FIELDS = ("step", "i", "inner_loss", "outer_loss", "da_heldout", "gap")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_logs_csv(logs: list[EpisodeLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for l in logs:
            w.writerow([_fmt(v) for v in l.csv_row()])


def read_logs_csv(path) -> list[EpisodeLog]:
    def num(s):
        return None if s == "" else float(s)

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EpisodeLog(int(row["step"]), int(row["i"]), float(row["inner_loss"]), num(row["outer_loss"]),
                                  num(row["da_heldout"]), num(row["gap"]), float("nan"), None))
    return out


def write_correlation_csv(corr: dict[str, Correlation], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "n", "r", "p", "undefined"])
        for scope in ("all", "stable"):
            w.writerow([_fmt(v) for v in corr[scope].row(scope)])


def write_plot_data(logs: list[EpisodeLog], path) -> None:
    _, da, gap = correlation_points(logs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["da_heldout", "gap"])
        for x, y in zip(da.tolist(), gap.tolist()):
            w.writerow([repr(x), repr(y)])


RESULT_COLUMNS = ("seed", "config_digest", "average", "worst")


def write_results(results: list[EvalResult], json_path, csv_path, md_path) -> None:
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in results], fh, indent=1)
    domains = list(results[0].per_domain) if results else []
    shots = [s.value for s in Shot]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(RESULT_COLUMNS) + [f"acc_{d}" for d in domains] + [f"shot_{s}" for s in shots])
        for r in results:
            w.writerow([_fmt(r.seed), r.config_digest, _fmt(r.average), _fmt(r.worst)]
                       + [_fmt(r.per_domain.get(d)) for d in domains] + [_fmt(r.by_shot.get(s)) for s in shots])
    with open(md_path, "w") as fh:
        fh.write("| seed | " + " | ".join(domains) + " | Average | Worst | " + " | ".join(shots) + " |\n")
        fh.write("|" + "---|" * (len(domains) + len(shots) + 3) + "\n")
        one = lambda v: "-" if v is None else f"{v:.1f}"  # noqa: E731
        for r in results:
            fh.write(f"| {r.seed} | " + " | ".join(one(r.per_domain[d]) for d in domains)
                     + f" | {one(r.average)} | {one(r.worst)} | "
                     + " | ".join(one(r.by_shot.get(s)) for s in shots) + " |\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, files: list[str], omitted: dict[str, str] | None = None) -> dict:
    out_dir = Path(out_dir)
    manifest = {"files": {f: sha256_file(out_dir / f) for f in sorted(files)}, "omitted": omitted or {}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def write_reports(results: list[EvalResult], bound_reports, logs: list[EpisodeLog], out_dir,
                  burn_in: int = DEFAULT_BURN_IN) -> dict:
    """Emit results, bounds, correlation and plot-data files plus a hashed manifest.

    ``bound_reports`` is a list of :class:`rclab.bounds.BoundReport`.
    Files that cannot be produced (no logs, too few points, no bound
    reports) are listed under ``omitted`` with the reason.
    """
    from .bounds import write_bound_reports

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc}") from exc
    files, omitted = [], {}
    try:
        write_results(results, out / "results.json", out / "results.csv", out / "results.md")
        files += ["results.json", "results.csv", "results.md"]
        if bound_reports:
            write_bound_reports(bound_reports, out / "bounds.json", out / "bounds.csv")
            files += ["bounds.json", "bounds.csv"]
        else:
            omitted["bounds.csv"] = "no bound reports"
        if logs:
            write_logs_csv(logs, out / "episodes.csv")
            files.append("episodes.csv")
            write_plot_data(logs, out / "da_vs_gap.csv")
            files.append("da_vs_gap.csv")
            try:
                write_correlation_csv(gap_correlation(logs, burn_in), out / "correlation.csv")
                files.append("correlation.csv")
            except ReportError as exc:
                omitted["correlation.csv"] = str(exc)
        else:
            omitted["correlation.csv"] = "no episode logs"
            omitted["da_vs_gap.csv"] = "no episode logs"
    except OSError as exc:
        raise ReportError(f"writing reports under {out}: {exc}") from exc
    return write_manifest(out, files, omitted)
