"""Metrics, sweeps, convergence accounting and the rank-sum test."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from diffmi.data import MembershipPrediction, ProbeDataset
from diffmi.errors import ValidationError
from diffmi.kernels import KernelSpec, mmd
from diffmi.projection import ProjectionSpec, project_many

EXACT_MAX_N = 8

RATIO_HEADER = ("r", "attack", "f1_mean", "f1_sem", "seeds")
CLASS_HEADER = ("m", "attack", "f1_mean", "f1_sem", "seeds")
LONG_HEADER = ("sweep", "x", "attack", "seed", "f1")
TRAJECTORY_HEADER = ("variant", "batch", "iteration", "distance", "moves")
TOTALS_HEADER = ("variant", "batches", "iterations", "moves_attempted", "moves_committed", "wall_time")
METRICS_HEADER = ("variant", "precision", "recall", "f1", "tp", "fp", "fn", "tn")


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    variant: str = ""
    digest: str = ""

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def row(self) -> tuple:
        return (self.variant, self.precision, self.recall, self.f1, self.tp, self.fp, self.fn, self.tn)


def compute_metrics(preds: Sequence[MembershipPrediction], ground_truth, variant: Optional[str] = None,
                    digest: str = "") -> MetricsReport:
    """Confusion-matrix metrics with member as the positive class.

    ``ground_truth`` is a ``{id: is_member}`` mapping or a labelled
    ``ProbeDataset``. Prediction ids and ground-truth ids must coincide.
    """
    truth = ground_truth.ground_truth() if isinstance(ground_truth, ProbeDataset) else dict(ground_truth)
    seen = set()
    tp = fp = fn = tn = 0
    for p in preds:
        if p.id in seen:
            raise ValidationError(f"duplicate prediction for id {p.id!r}")
        seen.add(p.id)
        if p.id not in truth:
            raise ValidationError(f"prediction id {p.id!r} has no ground truth")
        actual = bool(truth[p.id])
        if p.predicted_member:
            tp, fp = tp + actual, fp + (not actual)
        else:
            fn, tn = fn + actual, tn + (not actual)
    unpredicted = set(truth) - seen
    if unpredicted:
        raise ValidationError(f"{len(unpredicted)} ground-truth ids have no prediction, e.g. {sorted(unpredicted)[0]!r}")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    if variant is None:
        variant = preds[0].variant if preds else ""
    return MetricsReport(precision, recall, f1, tp, fp, fn, tn, variant, digest)


def f1_score(preds, ground_truth) -> float:
    return compute_metrics(preds, ground_truth).f1


# ---------------------------------------------------------- Mann-Whitney U

@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_value: float
    method: str

    def __iter__(self):
        return iter((self.u, self.p_value))


def _u_statistic(a: np.ndarray, b: np.ndarray):
    ranks = rankdata(np.r_[a, b])
    n1 = len(a)
    u_a = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u_a), float(len(a) * len(b) - u_a), ranks


def _exact_p(ranks: np.ndarray, n1: int, u_a: float) -> float:
    """Two-sided permutation p-value over all ways to pick group A's ranks.

    Mid-ranks are doubled to integers and a subset-sum DP counts how many
    size-``n1`` subsets reach each rank sum.
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    # counts[k][s] = number of k-subsets with doubled rank sum s
    counts = np.zeros((n1 + 1, total + 1), dtype=object)
    counts[0][0] = 1
    for r in r2:
        for k in range(n1, 0, -1):
            counts[k][r:] = counts[k][r:] + counts[k - 1][: total + 1 - r]
    dist = counts[n1]
    n = len(r2)
    offset = n1 * (n1 + 1)  # doubled minimum rank sum
    mean2 = n1 * (n + 1)    # doubled expected rank sum
    obs = abs(2 * u_a + offset - mean2)
    sums = np.arange(total + 1)
    extreme = np.abs(sums - mean2) >= obs - 1e-9
    num = sum(dist[extreme])
    den = sum(dist)
    return float(min(1.0, num / den))


def mann_whitney_u(sample_a, sample_b, method: str = "auto", alternative: str = "two-sided",
                   use_continuity: bool = True) -> MannWhitneyResult:
    """Rank-sum test returning ``(min(U_A, U_B), p)``.

    ``method="auto"`` enumerates exactly when both samples have at most
    eight values and uses the tie-corrected normal approximation otherwise.
    ``alternative="one-sided"`` gives the upper-tail normal p-value of the
    larger U (the convention of older statistics packages); it forces the
    asymptotic method.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if len(a) < 3 or len(b) < 3:
        raise ValidationError(f"each sample needs at least 3 values, got {len(a)} and {len(b)}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("samples must be finite")
    if method not in ("auto", "exact", "asymptotic"):
        raise ValidationError(f"unknown method {method!r}")
    if alternative not in ("two-sided", "one-sided"):
        raise ValidationError(f"unknown alternative {alternative!r}")
    u_a, u_b, ranks = _u_statistic(a, b)
    u = min(u_a, u_b)
    n1, n2 = len(a), len(b)

    if method == "auto":
        method = "exact" if max(n1, n2) <= EXACT_MAX_N and alternative == "two-sided" else "asymptotic"
    if method == "exact":
        if alternative != "two-sided":
            raise ValidationError("the exact method is two-sided only")
        return MannWhitneyResult(u, _exact_p(ranks, n1, u_a), "exact")

    n = n1 + n2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    mu = n1 * n2 / 2.0
    if var <= 0:
        return MannWhitneyResult(u, 1.0, "asymptotic")
    sd = math.sqrt(var)
    cc = 0.5 if use_continuity else 0.0
    if alternative == "one-sided":
        z = abs(max(u_a, u_b) - cc - mu) / sd
        return MannWhitneyResult(u, float(norm.sf(z)), "asymptotic")
    z = max(0.0, abs(u_a - mu) - cc) / sd
    return MannWhitneyResult(u, float(min(1.0, 2.0 * norm.sf(z))), "asymptotic")


# ------------------------------------------------------------------ sweeps

@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple = (1, 5, 10, 20)
    class_counts: tuple = (2, 10)
    seeds: tuple = (0, 1, 2, 3, 4)
    attacks: tuple = ("diff-w/", "diff-w/o", "top1_threshold")
    members_per_target: int = 100
    setting: str = "blackbox"

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(self.ratios))
        object.__setattr__(self, "class_counts", tuple(self.class_counts))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "attacks", tuple(self.attacks))
        if any(not r >= 1 for r in self.ratios):
            raise ValidationError(f"ratios must all be >= 1, got {self.ratios}")
        if any(int(m) != m or m < 2 for m in self.class_counts):
            raise ValidationError(f"class counts must be integers >= 2, got {self.class_counts}")
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if not self.attacks:
            raise ValidationError("at least one attack is required")
        if self.members_per_target < 2:
            raise ValidationError("members_per_target must be >= 2")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass
class SweepResult:
    """Aggregated rows plus the per-seed long table behind them."""

    kind: str  # "ratio" or "class"
    rows: list = field(default_factory=list)
    long_rows: list = field(default_factory=list)

    @property
    def header(self) -> tuple:
        return RATIO_HEADER if self.kind == "ratio" else CLASS_HEADER

    def f1_mean(self, x, attack: str) -> float:
        for row in self.rows:
            if row[0] == x and row[1] == attack:
                return row[2]
        raise KeyError((x, attack))

    def to_csv(self, comments: Optional[Mapping[str, str]] = None) -> str:
        return render_csv(self.header, self.rows, comments)

    def long_csv(self, comments: Optional[Mapping[str, str]] = None) -> str:
        return render_csv(LONG_HEADER, self.long_rows, comments)


def _aggregate(kind: str, long_rows: list) -> SweepResult:
    cells: dict = {}
    for _, x, attack, _, f1 in long_rows:
        cells.setdefault((x, attack), []).append(f1)
    rows = []
    for (x, attack), vals in sorted(cells.items()):
        v = np.asarray(vals)
        sem = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append((x, attack, float(v.mean()), sem, len(v)))
    long_rows = sorted(long_rows, key=lambda r: (r[1], r[2], r[3]))
    return SweepResult(kind, rows, long_rows)


def _sweep_x(value):
    return int(value) if float(value).is_integer() else float(value)


def _score(attack, target, bench, setting, seed) -> float:
    from diffmi.attacks import run_attack

    result = run_attack(
        attack, target, setting=setting, generated=bench.generated, reference=bench.reference,
        shadow=bench.shadow, seed=seed,
    )
    return compute_metrics(result.predictions, target).f1


def _ratio_cells(args) -> list:
    attacks, benchmark_spec, config, seed, bench = args
    from diffmi.benchmark import build_benchmark, compose_target

    bench = bench if bench is not None else build_benchmark(benchmark_spec, seed)
    rows = []
    for r in config.ratios:
        target = compose_target(bench, r, config.members_per_target, seed=seed * 1_000 + int(r * 10))
        for attack in attacks:
            rows.append(("ratio", _sweep_x(r), attack, seed, _score(attack, target, bench, config.setting, seed)))
    return rows


def _class_cells(args) -> list:
    attacks, benchmark_spec, m, seed, setting = args
    from diffmi.benchmark import build_benchmark

    spec = replace(benchmark_spec, synthetic=replace(benchmark_spec.synthetic, num_classes=int(m)))
    bench = build_benchmark(spec, seed)
    return [("class", int(m), attack, seed, _score(attack, bench.target, bench, setting, seed)) for attack in attacks]


def _map(fn, jobs_list, jobs: int) -> list:
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return [row for rows in pool.map(fn, jobs_list) for row in rows]
    return [row for job in jobs_list for row in fn(job)]


def ratio_sweep(attacks: Sequence[str], benchmark_spec=None, config: SweepConfig = SweepConfig(),
                benchmarks: Optional[Mapping[int, object]] = None, jobs: int = 1) -> SweepResult:
    """F1 per (ratio, attack), mean and SEM over seeds.

    For each seed one benchmark is built (or taken from ``benchmarks``),
    then for each ratio ``r`` a target with ``members_per_target`` members
    and ``r`` times as many held-out nonmembers is drawn from it. Seeds run
    as independent jobs.
    """
    from diffmi.benchmark import BenchmarkSpec

    if benchmark_spec is None:
        benchmark_spec = BenchmarkSpec()
    need = max(config.ratios) * config.members_per_target
    per_split = benchmark_spec.synthetic.num_classes * benchmark_spec.synthetic.samples_per_class
    if benchmark_spec.extra_nonmember_factor == 0 and need > per_split:
        benchmark_spec = replace(benchmark_spec, extra_nonmember_factor=int(math.ceil(need / per_split)) - 1)
    cells = [(tuple(attacks), benchmark_spec, config, seed, (benchmarks or {}).get(seed)) for seed in config.seeds]
    return _aggregate("ratio", _map(_ratio_cells, cells, jobs))


def class_sweep(attacks: Sequence[str], class_counts: Sequence[int], seeds: Sequence[int],
                benchmark_spec=None, setting: str = "blackbox", jobs: int = 1) -> SweepResult:
    """F1 per (class count, attack); a fresh synthetic benchmark per ``m`` and seed."""
    from diffmi.benchmark import BenchmarkSpec

    if benchmark_spec is None:
        benchmark_spec = BenchmarkSpec()
    SweepConfig(class_counts=tuple(class_counts), seeds=tuple(seeds), attacks=tuple(attacks))
    cells = [(tuple(attacks), benchmark_spec, m, seed, setting) for m, seed in product(class_counts, seeds)]
    return _aggregate("class", _map(_class_cells, cells, jobs))


# ------------------------------------------------------------- convergence

@dataclass
class ConvergenceReport:
    trajectories: list  # (variant, batch, iteration, distance, moves)
    totals: list        # (variant, batches, iterations, attempted, committed, wall_time)

    def total(self, variant: str) -> tuple:
        for row in self.totals:
            if row[0] == variant:
                return row
        raise KeyError(variant)

    def trajectories_csv(self, comments=None) -> str:
        return render_csv(TRAJECTORY_HEADER, self.trajectories, comments)

    def totals_csv(self, comments=None, include_time: bool = True) -> str:
        """Totals table; ``include_time=False`` drops the only non-reproducible column."""
        if include_time:
            return render_csv(TOTALS_HEADER, self.totals, comments)
        return render_csv(TOTALS_HEADER[:-1], [row[:-1] for row in self.totals], comments)


def convergence_report(outcomes: Mapping[str, Sequence]) -> ConvergenceReport:
    """Per-batch distance trajectories and per-variant totals.

    ``outcomes`` maps a variant name to its list of per-batch ``DiffOutcome``.
    Totals are plain sums of the per-batch counters.
    """
    traj, totals = [], []
    for variant in sorted(outcomes):
        batches = list(outcomes[variant])
        for b, o in enumerate(batches):
            for it, dist, moves in o.trajectory:
                traj.append((variant, b, it, dist, moves))
        totals.append((
            variant,
            len(batches),
            sum(o.iterations for o in batches),
            sum(o.moves_attempted for o in batches),
            sum(o.moves_committed for o in batches),
            sum(o.wall_time for o in batches),
        ))
    return ConvergenceReport(traj, totals)


# ------------------------------------------------------------ nonmember quality

def mmd_quality(candidates: ProbeDataset, reference: ProbeDataset,
                projection: ProjectionSpec = ProjectionSpec(), kernel: KernelSpec = KernelSpec()) -> float:
    """MMD between projected outputs of candidate nonmembers and real held-out nonmembers."""
    def feats(ds):
        labels = ds.true_labels() if projection.needs_true_label else None
        return project_many(ds.probs_matrix(), labels, projection)

    return mmd(feats(candidates), feats(reference), kernel)


# --------------------------------------------------------------------- CSV

def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return repr(round(x, 12))
    return str(x)


def render_csv(header: Iterable[str], rows: Iterable[Sequence], comments: Optional[Mapping[str, str]] = None) -> str:
    buf = io.StringIO()
    for k, v in (comments or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(c) for c in row])
    return buf.getvalue()
