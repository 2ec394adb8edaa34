"""Multi-round experiments, divided-K selection, oracle checks and timing.

Selectors never see labels: every sample is passed through ``without_label``
before it reaches a selector, and metrics are computed afterwards from the
original samples.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import islice
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .algorithms import (
    SelectionResult,
    SelectorConfig,
    brute_force,
    offline_greedy,
    run_selector,
)
from .errors import ConfigError
from .objective import (
    KERNEL_KINDS,
    DiversityState,
    KernelSpec,
    ObjectiveSpec,
    Sample,
    diversity_gain,
    diversity_commit,
    kernel_matrix,
    objective_value,
)
from .records import iter_records, round_files
from .simulator import PeculiaritySpec, WorldSpec, evaluate_selection, generate_round

FORMAT_VERSION = 1
CSV_COLUMNS = ("format_version", "algorithm", "seed", "round", "selected", "unique", "objective",
               "latency_mean", "latency_stderr", "stored_peak", "gain_evals")
# acceptance thresholds get multiplied by this in fault-injection mode
FAULT_SCALE = 50.0


def default_objective() -> ObjectiveSpec:
    return ObjectiveSpec(lambda_i=1.0, lambda_d=1.0, alpha=1.0,
                         kernel=KernelSpec("polynomial-features"))


@dataclass(frozen=True)
class ExperimentConfig:
    """What to run and on which streams.

    The source is either the simulator (``world`` + ``pec``, re-seeded per
    repeat) or ``record_path``, a record file or a directory with one file per
    round. ``seeds`` lists the repeats. ``rounds`` optionally truncates the
    number of rounds.
    """

    algorithms: tuple
    objective: ObjectiveSpec = field(default_factory=default_objective)
    world: WorldSpec | None = None
    pec: PeculiaritySpec | None = None
    record_path: str | None = None
    divide_k: int = 1
    seeds: tuple = (0,)
    cache: bool = True
    timing: bool = False
    rounds: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        if not self.seeds:
            raise ConfigError("at least one seed (repeat) is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if (self.record_path is None) == (self.world is None or self.pec is None):
            raise ConfigError("give either a simulator world + peculiarities or a record path")
        if int(self.divide_k) < 1:
            raise ConfigError("divide_k must be a positive integer")
        for a in self.algorithms:
            if a.k % self.divide_k:
                raise ConfigError(f"divide_k={self.divide_k} does not divide K={a.k} ({a.label})")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError("rounds must be positive")

    @property
    def round_count(self) -> int:
        if self.record_path is not None:
            n = len(round_files(self.record_path))
        else:
            n = self.pec.rounds
        return n if self.rounds is None else min(n, self.rounds)


@dataclass
class RoundReport:
    algorithm: str
    seed: int
    round: int
    selected_ids: list
    selected_count: int
    unique_groups: int
    nonobject: int
    objective: float
    objective_parts_sum: float
    latency_mean: float | None
    latency_stderr: float | None
    stored_peak: int
    gain_evaluations: int
    kernel_evaluations: int
    samples_seen: int
    dataset_size: int  # |D_n| after this round


def mean_stderr(values) -> tuple[float, float]:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def threads() -> int:
    """Worker cap from SIEVESTREAM_THREADS (default 1)."""
    raw = os.environ.get("SIEVESTREAM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SIEVESTREAM_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def round_stream(cfg: ExperimentConfig, seed: int, round_index: int) -> list[Sample]:
    """The ordered stream for one round; identical for every algorithm."""
    if cfg.record_path is not None:
        return list(iter_records(round_files(cfg.record_path)[round_index]))
    return generate_round(replace(cfg.world, seed=seed), cfg.pec, round_index)


def selector_seed(base: int | None, seed: int, round_index: int) -> int:
    entropy = [0 if base is None else int(base), int(seed), int(round_index)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _for_round(sel: SelectorConfig, seed: int, round_index: int) -> SelectorConfig:
    if sel.algorithm == "random":
        return replace(sel, seed=selector_seed(sel.seed, seed, round_index))
    return sel


def contiguous_sizes(n: int, parts: int) -> list[int]:
    """Sizes of ``parts`` contiguous pieces of a length-n stream, larger pieces first."""
    q, r = divmod(n, parts)
    return [q + 1 if i < r else q for i in range(parts)]


def divided_select(stream: Iterable[Sample], length: int, spec: ObjectiveSpec,
                   sel: SelectorConfig, parts: int, *, cache: bool = True,
                   latencies: list | None = None) -> tuple[SelectionResult, float]:
    """Run a fresh budget-K/parts selector on each contiguous piece; return (union, sum of part values)."""
    if parts < 1 or sel.k % parts:
        raise ConfigError(f"divide_k={parts} does not divide K={sel.k}")
    sub = replace(sel, k=sel.k // parts)
    it = iter(stream)
    chosen, part_sum = [], 0.0
    union = SelectionResult([], 0.0)
    for size in contiguous_sizes(length, parts):
        res = run_selector(islice(it, size), spec, sub, cache=cache, latencies=latencies)
        chosen.extend(res.chosen)
        part_sum += res.value
        union.samples_seen += res.samples_seen
        union.stored_peak = max(union.stored_peak, res.stored_peak)
        union.gain_evaluations += res.gain_evaluations
        union.kernel_evaluations += res.kernel_evaluations
        union.kernel_hits += res.kernel_hits
        union.distinct_peak = max(union.distinct_peak, res.distinct_peak)
        union.degenerate += res.degenerate
    union.chosen = chosen
    union.value = objective_value(chosen, spec) if chosen else 0.0
    return union, part_sum


def _report(cfg: ExperimentConfig, sel: SelectorConfig, seed: int, r: int, stream: list,
            by_id: dict, dataset: set) -> RoundReport:
    rsel = _for_round(sel, seed, r)
    latencies = [] if cfg.timing else None
    if cfg.divide_k > 1:
        res, part_sum = divided_select(stream, len(stream), cfg.objective, rsel, cfg.divide_k,
                                       cache=cfg.cache, latencies=latencies)
    else:
        res = run_selector(stream, cfg.objective, rsel, cache=cfg.cache, latencies=latencies)
        part_sum = res.value
    # metrics use the labelled originals, looked up after selection
    chosen = [by_id[s.id] for s in res.chosen]
    if cfg.world is not None:
        ev = evaluate_selection(chosen, replace(cfg.world, seed=seed))
        unique, nonobject = ev.unique, ev.nonobject
    else:
        unique, nonobject = len({s.group for s in chosen}), 0
    dataset.update(s.id for s in chosen)
    lat_mean, lat_err = mean_stderr(latencies) if latencies else (None, None)
    return RoundReport(
        algorithm=sel.label, seed=seed, round=r,
        selected_ids=[s.id for s in chosen], selected_count=len(chosen),
        unique_groups=unique, nonobject=nonobject,
        objective=res.value, objective_parts_sum=part_sum,
        latency_mean=lat_mean, latency_stderr=lat_err,
        stored_peak=res.stored_peak, gain_evaluations=res.gain_evaluations,
        kernel_evaluations=res.kernel_evaluations, samples_seen=res.samples_seen,
        dataset_size=len(dataset),
    )


def _run_seed(cfg: ExperimentConfig, seed: int) -> dict[str, list[RoundReport]]:
    """All rounds of one repeat; each round's stream is built once and shared by every algorithm."""
    out = {sel.label: [] for sel in cfg.algorithms}
    datasets = {sel.label: set() for sel in cfg.algorithms}
    for r in range(cfg.round_count):
        stream = round_stream(cfg, seed, r)
        by_id = {s.id: s for s in stream}
        for sel in cfg.algorithms:
            out[sel.label].append(_report(cfg, sel, seed, r, stream, by_id, datasets[sel.label]))
    return out


def _run_job(args):
    return _run_seed(*args)


def run_rounds(cfg: ExperimentConfig) -> dict[str, list[RoundReport]]:
    """Reports per algorithm label, ordered by (seed, round).

    Repeats (seeds) go to a process pool when SIEVESTREAM_THREADS > 1, except
    in timing mode which stays single-threaded.
    """
    labels = [a.label for a in cfg.algorithms]
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate algorithm configurations")
    jobs = [(cfg, seed) for seed in cfg.seeds]
    workers = 1 if cfg.timing else min(threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_job, jobs))
    else:
        outputs = [_run_seed(*job) for job in jobs]
    out: dict[str, list[RoundReport]] = {label: [] for label in labels}
    for per_seed in outputs:
        for label in labels:
            out[label].extend(per_seed[label])
    return out


def run_divided_k(cfg: ExperimentConfig) -> dict[str, list[RoundReport]]:
    if cfg.divide_k < 2:
        raise ConfigError("run_divided_k needs divide_k > 1")
    return run_rounds(cfg)


def summarize(reports: Sequence[RoundReport]) -> dict:
    """Means and standard errors over rounds and seeds, plus per-seed totals."""
    out = {"rounds": len(reports)}
    for key in ("selected_count", "unique_groups", "nonobject", "objective", "gain_evaluations",
                "kernel_evaluations", "stored_peak"):
        m, e = mean_stderr([getattr(r, key) for r in reports])
        out[key] = {"mean": m, "stderr": e}
    per_seed = {}
    for r in reports:
        per_seed.setdefault(r.seed, {"unique_groups": 0, "selected_count": 0, "dataset_size": 0})
        per_seed[r.seed]["unique_groups"] += r.unique_groups
        per_seed[r.seed]["selected_count"] += r.selected_count
        per_seed[r.seed]["dataset_size"] = max(per_seed[r.seed]["dataset_size"], r.dataset_size)
    out["per_seed_totals"] = {str(k): v for k, v in sorted(per_seed.items())}
    lat = [r.latency_mean for r in reports if r.latency_mean is not None]
    if lat:
        m, e = mean_stderr(lat)
        out["latency_mean"] = {"mean": m, "stderr": e}
    return out


# --- output --------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def reports_csv(results: dict[str, list[RoundReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for label, reports in results.items():
        for r in reports:
            w.writerow([FORMAT_VERSION, label, r.seed, r.round, r.selected_count, r.unique_groups,
                        _fmt(r.objective), _fmt(r.latency_mean), _fmt(r.latency_stderr),
                        r.stored_peak, r.gain_evaluations])
    return buf.getvalue()


def write_csv(results, path) -> None:
    Path(path).write_text(reports_csv(results), encoding="utf-8")


def write_manifest(path, payload: dict) -> None:
    payload = {"format_version": FORMAT_VERSION, **payload}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- timing ----------------------------------------------------------------------------


@dataclass
class SpeedCell:
    algorithm: str
    k: int
    epsilon: float | None
    mean: float
    stderr: float
    samples: int


def measure_speed(cfg: ExperimentConfig, iterations: int = 100) -> list[SpeedCell]:
    """Per-sample processing time for every configured algorithm on one fixed stream.

    Whole passes over the first round of the first seed are repeated until at
    least ``iterations`` samples have been timed per algorithm. Each algorithm
    gets one untimed warm-up pass, then passes are interleaved across
    algorithms so slow drift of the machine hits every cell alike. Always
    single-threaded.
    """
    if iterations < 100:
        raise ConfigError("iterations must be at least 100")
    stream = round_stream(cfg, cfg.seeds[0], 0)
    if not stream:
        raise ConfigError("empty stream, nothing to time")
    passes = math.ceil(iterations / len(stream))
    sels = [_for_round(sel, cfg.seeds[0], 0) for sel in cfg.algorithms]

    def one_pass(sel, lat):
        if cfg.divide_k > 1:
            divided_select(stream, len(stream), cfg.objective, sel, cfg.divide_k,
                           cache=cfg.cache, latencies=lat)
        else:
            run_selector(stream, cfg.objective, sel, cache=cfg.cache, latencies=lat)

    lat: list[list[float]] = [[] for _ in sels]
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for sel in sels:
            one_pass(sel, None)
        for _ in range(passes):
            for sel, out in zip(sels, lat):
                one_pass(sel, out)
                gc.collect()
    finally:
        if was_enabled:
            gc.enable()
    cells = []
    for sel, out in zip(cfg.algorithms, lat):
        m, e = mean_stderr(out)
        cells.append(SpeedCell(sel.label, sel.k, sel.epsilon, m, e, len(out)))
    return cells


def speed_trend_violations(cells: Sequence[SpeedCell], algorithm: str = "sieve-streaming-pp") -> list[str]:
    """Time must not increase with epsilon at fixed K, nor decrease with K at fixed epsilon."""
    table = {(c.k, c.epsilon): c.mean for c in cells if c.algorithm.startswith(algorithm + "[")}
    ks = sorted({k for k, _ in table})
    eps = sorted({e for _, e in table})
    bad = []
    for k in ks:
        row = [(e, table[k, e]) for e in eps if (k, e) in table]
        for (e1, t1), (e2, t2) in zip(row, row[1:]):
            if t2 > t1:
                bad.append(f"K={k}: eps={e2:g} took {t2:.3g}s > eps={e1:g} {t1:.3g}s")
    for e in eps:
        col = [(k, table[k, e]) for k in ks if (k, e) in table]
        for (k1, t1), (k2, t2) in zip(col, col[1:]):
            if t2 < t1:
                bad.append(f"eps={e:g}: K={k2} took {t2:.3g}s < K={k1} {t1:.3g}s")
    return bad


# --- guarantee verification --------------------------------------------------------------


@dataclass
class Instance:
    pool: list
    spec: ObjectiveSpec
    k: int
    index: int


@dataclass
class VerificationReport:
    instances: int
    min_ratio: dict
    violations: list
    max_logdet_error: float
    max_inverse_error: float
    worst: dict | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return (not self.violations and self.max_logdet_error <= 1e-8
                and self.max_inverse_error <= 1e-6)


def random_instance(rng: np.random.Generator, index: int = 0) -> Instance:
    """A small random problem: n <= 12, K <= 4, any kernel, lambdas in {0, .5, 1}."""
    n = int(rng.integers(1, 13))
    k = int(rng.integers(1, 5))
    classes = int(rng.integers(2, 7))
    dim = int(rng.integers(1, 7))
    while True:
        li, ld = rng.choice([0.0, 0.5, 1.0], size=2)
        if li + ld > 0:
            break
    spec = ObjectiveSpec(
        lambda_i=float(li), lambda_d=float(ld), alpha=float(rng.choice([0.5, 1.0, 2.0])),
        kernel=KernelSpec(KERNEL_KINDS[int(rng.integers(len(KERNEL_KINDS)))],
                          beta=float(rng.choice([0.5, 1.0, 2.0]))),
    )
    P = rng.dirichlet(np.full(classes, float(rng.choice([0.3, 1.0, 3.0]))), size=n)
    X = rng.normal(size=(n, dim)) * float(rng.choice([0.3, 1.0]))
    # occasional exact duplicates exercise degenerate candidates
    if n > 2 and rng.random() < 0.25:
        j, i = sorted(rng.choice(n, size=2, replace=False))
        P[i], X[i] = P[j], X[j]
    order = rng.permutation(n)
    pool = [Sample(id=f"i{index:05d}-{int(order[t]):02d}", seq=t, softmax=P[t], features=X[t])
            for t in range(n)]
    return Instance(pool, spec, k, index)


def _incremental_errors(inst: Instance) -> tuple[float, float]:
    """Commit the pool one by one; compare with dense log-det and inverse."""
    spec = inst.spec if inst.spec.uses_diversity else replace(inst.spec, lambda_d=1.0)
    state = DiversityState(2)
    ld_err = inv_err = 0.0
    for s in inst.pool:
        dg = diversity_gain(state, s, spec)
        if dg.degenerate:
            continue
        diversity_commit(state, s, dg)
        A = np.eye(len(state)) + spec.alpha * kernel_matrix(state.members, spec.kernel)
        _, ld = np.linalg.slogdet(A)
        ld_err = max(ld_err, abs(state.logdet - ld) / max(1.0, abs(ld)))
        inv_err = max(inv_err, float(np.max(np.abs(state.inv - np.linalg.inv(A)))))
    return ld_err, inv_err


def _dump(inst: Instance, opt: SelectionResult, name: str, res: SelectionResult, bound: float) -> dict:
    return {
        "instance": inst.index, "algorithm": name, "k": inst.k,
        "objective": {"lambda_i": inst.spec.lambda_i, "lambda_d": inst.spec.lambda_d,
                      "alpha": inst.spec.alpha, "kernel": inst.spec.kernel.kind,
                      "beta": inst.spec.kernel.beta},
        "opt_value": opt.value, "opt_ids": opt.ids,
        "value": res.value, "ids": res.ids, "required": bound,
        "pool": [{"id": s.id, "seq": s.seq, "softmax": s.softmax.tolist(),
                  "features": s.features.tolist()} for s in inst.pool],
    }


def verify_guarantees(suite_seed: int, instances: int, *, epsilons=(0.1, 0.01),
                      fault: bool = False) -> VerificationReport:
    """Compare streaming and greedy selectors with the exhaustive optimum on random instances.

    Checked bounds: sieve-streaming and sieve-streaming-pp reach (1/2 - eps) OPT,
    offline greedy reaches (1 - 1/e) OPT, and entropy top-K is exact when the
    diversity weight is zero. ``fault`` inflates the sieve acceptance thresholds
    so the checker can be seen to fail.
    """
    if not 1 <= instances <= 10**4:
        raise ConfigError("instances must lie in [1, 10000]")
    t0 = time.perf_counter()
    rng = np.random.default_rng([int(suite_seed), 0xC0FFEE])
    scale = FAULT_SCALE if fault else 1.0
    min_ratio: dict[str, float] = {}
    violations = []
    worst, worst_gap = None, -math.inf
    max_ld = max_inv = 0.0
    tol = 1e-9

    def check(inst, opt, name, res, factor):
        nonlocal worst, worst_gap
        ratio = res.value / opt.value if opt.value > 0 else 1.0
        min_ratio[name] = min(min_ratio.get(name, math.inf), ratio)
        bound = factor * opt.value
        gap = bound - res.value
        if gap > tol * max(1.0, opt.value):
            violations.append((inst.index, name, ratio))
            if gap > worst_gap:
                worst_gap, worst = gap, _dump(inst, opt, name, res, bound)

    for idx in range(instances):
        inst = random_instance(rng, idx)
        opt = brute_force(inst.pool, inst.spec, inst.k)
        for eps in epsilons:
            for name in ("sieve-streaming", "sieve-streaming-pp"):
                sel = SelectorConfig(name, inst.k, epsilon=eps, acceptance_scale=scale)
                check(inst, opt, sel.label.split("[")[0] + f"[eps={eps:g}]",
                      run_selector(inst.pool, inst.spec, sel), 0.5 - eps)
        check(inst, opt, "offline-greedy", offline_greedy(inst.pool, inst.spec, inst.k), 1 - 1 / math.e)
        if not inst.spec.uses_diversity:
            check(inst, opt, "entropy-topk",
                  run_selector(inst.pool, inst.spec, SelectorConfig("entropy-topk", inst.k)), 1.0)
        ld, iv = _incremental_errors(inst)
        max_ld, max_inv = max(max_ld, ld), max(max_inv, iv)
    return VerificationReport(instances, dict(sorted(min_ratio.items())), violations, max_ld,
                              max_inv, worst, time.perf_counter() - t0)


def report_dict(report: VerificationReport) -> dict:
    d = asdict(report)
    d["ok"] = report.ok
    d["violations"] = [list(v) for v in report.violations]
    return d

