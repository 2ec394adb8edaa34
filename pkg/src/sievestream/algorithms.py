"""One-pass selectors and offline oracles for the composite objective.

Streaming selectors expose ``process(sample)`` / ``result()``; the module-level
functions (``sieve_streaming`` etc.) drive a selector over an iterable.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetError, ConfigError, NumericError
from .objective import (
    S_FLOOR,
    DiversityGain,
    DiversityState,
    ObjectiveSpec,
    Sample,
    SelectionState,
    diversity_commit,
    informativeness,
    kernel_matrix,
    kernel_row,
    kernel_vector,
    objective_gain,
    objective_value,
    selection_commit,
)

SIEVE_ALGORITHMS = ("sieve-streaming", "sieve-streaming-pp", "three-sieves")
ALGORITHMS = SIEVE_ALGORITHMS + ("random", "entropy-topk")
DEFAULT_T = 500


@dataclass(frozen=True)
class SelectorConfig:
    """Algorithm choice and its knobs.

    ``acceptance_scale`` multiplies every sieve acceptance threshold. It exists
    so the guarantee checker can be shown to catch a broken selector; leave it
    at 1.0.
    """

    algorithm: str
    k: int
    epsilon: float | None = None
    t: int | None = None
    seed: int | None = None
    acceptance_scale: float = 1.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if int(self.k) < 1:
            raise ConfigError("K must be a positive integer")
        sieve = self.algorithm in SIEVE_ALGORITHMS
        if sieve and self.epsilon is None:
            raise ConfigError(f"{self.algorithm} needs epsilon")
        if not sieve and self.epsilon is not None:
            raise ConfigError(f"epsilon is only meaningful for sieve algorithms, not {self.algorithm}")
        if self.epsilon is not None and not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.algorithm == "three-sieves":
            if self.t is None:
                object.__setattr__(self, "t", DEFAULT_T)
            if int(self.t) < 1:
                raise ConfigError("T must be a positive integer")
        elif self.t is not None:
            raise ConfigError("T is only meaningful for three-sieves")
        if self.algorithm == "random" and self.seed is None:
            raise ConfigError("random baseline needs an explicit seed")

    @property
    def label(self) -> str:
        parts = [f"K={self.k}"]
        if self.epsilon is not None:
            parts.append(f"eps={self.epsilon:g}")
        if self.algorithm == "three-sieves":
            parts.append(f"T={self.t}")
        return f"{self.algorithm}[{','.join(parts)}]"


@dataclass
class SelectionResult:
    chosen: list[Sample]
    value: float
    samples_seen: int = 0
    stored_peak: int = 0
    gain_evaluations: int = 0
    kernel_evaluations: int = 0
    kernel_hits: int = 0
    distinct_peak: int = 0
    degenerate: int = 0

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.chosen]


def grid_indices(lo: float, hi: float, base: float) -> range:
    """Exponents i with lo <= base**i <= hi (relative slack 1e-12 at both ends)."""
    if not (lo > 0 and hi >= lo):
        return range(0)
    lb = math.log(base)
    i_lo = math.ceil(math.log(lo) / lb)
    while base ** (i_lo - 1) >= lo * (1 - 1e-12):
        i_lo -= 1
    while base ** i_lo < lo * (1 - 1e-12):
        i_lo += 1
    i_hi = math.floor(math.log(hi) / lb)
    while base ** (i_hi + 1) <= hi * (1 + 1e-12):
        i_hi += 1
    while base ** i_hi > hi * (1 + 1e-12):
        i_hi -= 1
    return range(i_lo, i_hi + 1)


class _Candidate:
    __slots__ = ("sample", "g", "x", "a", "singleton")

    def __init__(self, sample, g, x, a, singleton):
        self.sample = sample
        self.g = g
        self.x = x
        self.a = a  # 1 + alpha * k(e, e)
        self.singleton = singleton


class _SharedStore:
    """Samples held by any sieve, stored once, plus the kernel row memo.

    For the candidate currently being processed, k(candidate, stored) is
    computed at most once per stored sample and shared across sieves. With the
    memo disabled every request recomputes.
    """

    def __init__(self, spec: ObjectiveSpec, memo: bool):
        self.kspec = spec.kernel
        self.memo = memo
        self._X = None
        self._refs = np.zeros(0, dtype=np.int64)
        self._free: list[int] = []
        self._row = np.zeros(0)
        self._known = np.zeros(0, dtype=bool)
        self._x = None
        self._pending: dict[str, int] = {}
        self.live = 0
        self.hits = 0
        self.misses = 0

    def _grow(self, dim):
        cap = max(16, 2 * self._refs.shape[0])
        X = np.zeros((cap, dim))
        if self._X is not None:
            X[: self._X.shape[0]] = self._X
        self._free.extend(range(cap - 1, self._refs.shape[0] - 1, -1))
        refs = np.zeros(cap, dtype=np.int64)
        refs[: self._refs.shape[0]] = self._refs
        self._X, self._refs = X, refs
        self._row = np.zeros(cap)
        self._known = np.zeros(cap, dtype=bool)

    def begin(self, cand: _Candidate):
        self._x = cand.x
        self._known[:] = False
        self._pending.clear()

    def row(self, slots: np.ndarray) -> np.ndarray:
        if not self.memo:
            self.misses += slots.shape[0]
            return kernel_row(self._x, self._X[slots], self.kspec)
        need = slots[~self._known[slots]]
        if need.shape[0]:
            self._row[need] = kernel_row(self._x, self._X[need], self.kspec)
            self._known[need] = True
        self.misses += need.shape[0]
        self.hits += slots.shape[0] - need.shape[0]
        return self._row[slots]

    def acquire(self, cand: _Candidate) -> int:
        slot = self._pending.get(cand.sample.id)
        if slot is None:
            if not self._free:
                self._grow(cand.x.shape[0])
            slot = self._free.pop()
            self._X[slot] = cand.x
            self._pending[cand.sample.id] = slot
            self.live += 1
        self._refs[slot] += 1
        return slot

    def release(self, slots):
        for slot in slots:
            self._refs[slot] -= 1
            if self._refs[slot] == 0:
                self._free.append(int(slot))
                self.live -= 1


class Sieve:
    """A candidate set with its acceptance threshold on the (1 + eps) grid."""

    __slots__ = ("index", "threshold", "selection", "value", "info_sum", "diversity", "slots")

    def __init__(self, index: int, threshold: float, capacity: int):
        self.index = index
        self.threshold = threshold
        self.selection: list[Sample] = []
        self.value = 0.0
        self.info_sum = 0.0
        self.diversity = DiversityState(capacity)
        self.slots = np.zeros(capacity, dtype=np.int64)

    def __len__(self):
        return len(self.selection)

    def __repr__(self):
        return f"Sieve(threshold={self.threshold:.6g}, size={len(self)}, value={self.value:.6g})"


class StreamSelector:
    """Base class: counts samples, keeps the one-pass contract."""

    def __init__(self, spec: ObjectiveSpec, cfg: SelectorConfig):
        self.spec = spec
        self.cfg = cfg
        self.k = int(cfg.k)
        self.samples_seen = 0
        self.stored_peak = 0

    def process(self, sample: Sample) -> None:
        raise NotImplementedError

    def result(self) -> SelectionResult:
        raise NotImplementedError


class _SieveSelector(StreamSelector):
    def __init__(self, spec, cfg, memo=True, audit=False):
        super().__init__(spec, cfg)
        self.base = 1.0 + cfg.epsilon
        self.scale = cfg.acceptance_scale
        self.audit = audit
        self.store = _SharedStore(spec, memo)
        self.m = 0.0
        self.gain_evaluations = 0
        self.kernel_evaluations = 0
        self.distinct_peak = 0
        self.degenerate = 0

    def _prepare(self, sample: Sample) -> _Candidate:
        spec = self.spec
        g = informativeness(sample, spec) if spec.uses_informativeness else 0.0
        x, a, div = None, 1.0, 0.0
        if spec.uses_diversity:
            x = kernel_vector(sample, spec.kernel)
            kee = float(kernel_row(x, x[None, :], spec.kernel)[0])
            self.kernel_evaluations += 1
            a = 1.0 + spec.alpha * kee
            div = 0.5 * math.log(a)
        singleton = spec.lambda_i * g + spec.lambda_d * div
        if not math.isfinite(singleton):
            raise NumericError(f"non-finite singleton value for sample {sample.id!r}")
        return _Candidate(sample, g, x, a, singleton)

    def _gain(self, sieve: Sieve, cand: _Candidate):
        self.gain_evaluations += 1
        spec = self.spec
        if not spec.uses_diversity:
            return spec.lambda_i * cand.g, None
        n = len(sieve)
        if n:
            w = spec.alpha * self.store.row(sieve.slots[:n])
            u = sieve.diversity.inv @ w
            s = cand.a - float(w @ u)
        else:
            w = u = np.zeros(0)
            s = cand.a
        if not math.isfinite(s):
            raise NumericError(f"non-finite marginal gain for sample {cand.sample.id!r}")
        if s <= S_FLOOR:
            self.degenerate += 1
            return spec.lambda_i * cand.g, None
        dg = DiversityGain(0.5 * math.log(s), w, s, u, sieve.diversity.version, False)
        return spec.lambda_i * cand.g + spec.lambda_d * dg.gain, dg

    def _accept(self, sieve: Sieve, cand: _Candidate, total: float, dg):
        n = len(sieve)
        if dg is not None:
            diversity_commit(sieve.diversity, cand.sample, dg)
            if n + 1 > sieve.slots.shape[0]:
                sieve.slots = np.resize(sieve.slots, 2 * sieve.slots.shape[0])
            sieve.slots[n] = self.store.acquire(cand)
        sieve.selection.append(cand.sample)
        sieve.info_sum += cand.g
        sieve.value += total
        if self.audit:
            direct = objective_value(sieve.selection, self.spec)
            if abs(direct - sieve.value) > 1e-8 * max(1.0, abs(direct)):
                raise NumericError(
                    f"incremental value {sieve.value!r} drifted from direct {direct!r}")

    def _discard(self, sieve: Sieve):
        if self.spec.uses_diversity:
            self.store.release(sieve.slots[: len(sieve)])

    def _new_sieve(self, i: int) -> Sieve:
        return Sieve(i, self.base ** i, min(self.k, 16))

    def _offer(self, sieve: Sieve, cand: _Candidate, thr: float) -> bool:
        if cand.singleton < thr:
            return False  # submodularity: no gain exceeds the singleton value
        total, dg = self._gain(sieve, cand)
        if self.spec.uses_diversity and dg is None:
            return False
        if total >= thr:
            self._accept(sieve, cand, total, dg)
            return True
        return False

    def _finish(self, sieves) -> SelectionResult:
        best = None
        for sieve in sieves:
            if best is None or sieve.value > best.value:
                best = sieve
        chosen = list(best.selection) if best is not None else []
        value = best.value if best is not None else 0.0
        return SelectionResult(
            chosen=chosen,
            value=value,
            samples_seen=self.samples_seen,
            stored_peak=self.stored_peak,
            gain_evaluations=self.gain_evaluations,
            kernel_evaluations=self.kernel_evaluations + self.store.misses,
            kernel_hits=self.store.hits,
            distinct_peak=self.distinct_peak,
            degenerate=self.degenerate,
        )


class _MultiSieve(_SieveSelector):
    """Shared machinery for the two multi-sieve algorithms."""

    def __init__(self, spec, cfg, memo=True, audit=False):
        super().__init__(spec, cfg, memo, audit)
        self.sieves: list[Sieve] = []  # ascending grid index

    def _window(self) -> range:
        raise NotImplementedError

    def _threshold(self, sieve: Sieve) -> float:
        raise NotImplementedError

    def _after_accept(self, sieve: Sieve):
        pass

    def _update_sieves(self):
        window = self._window()
        keep = []
        for sieve in self.sieves:
            if sieve.index in window:
                keep.append(sieve)
            else:
                self._discard(sieve)
        # both window ends are non-decreasing, so new sieves only appear on top
        top = keep[-1].index if keep else None
        for i in window:
            if top is None or i > top:
                keep.append(self._new_sieve(i))
        self.sieves = keep

    def process(self, sample: Sample) -> None:
        self.samples_seen += 1
        cand = self._prepare(sample)
        if cand.singleton > self.m:
            self.m = cand.singleton
        if self.m <= 0:
            return
        self._update_sieves()
        if self.spec.uses_diversity:
            self.store.begin(cand)
        k = self.k
        for sieve in self.sieves:
            if len(sieve) >= k:
                continue
            if self._offer(sieve, cand, self._threshold(sieve) * self.scale):
                self._after_accept(sieve)
        stored = sum(len(s) for s in self.sieves)
        if stored > self.stored_peak:
            self.stored_peak = stored
        if self.store.live > self.distinct_peak:
            self.distinct_peak = self.store.live

    def result(self) -> SelectionResult:
        return self._finish(self.sieves)


class SieveStreaming(_MultiSieve):
    """Sieves over OPT estimates v in [m, 2Km]; accept when gain >= (v/2 - f(S)) / (K - |S|)."""

    def _window(self):
        return grid_indices(self.m, 2 * self.k * self.m, self.base)

    def _threshold(self, sieve):
        return (sieve.threshold / 2 - sieve.value) / (self.k - len(sieve))


class SieveStreamingPP(_MultiSieve):
    """Per-element thresholds tau in [max(LB, m) / (2K(1+eps)), m]; accept when gain >= tau.

    LB is the best sieve value so far; raising it prunes low sieves, which is
    what bounds memory by O(K / eps).
    """

    def __init__(self, spec, cfg, memo=True, audit=False):
        super().__init__(spec, cfg, memo, audit)
        self.lower_bound = 0.0

    def _window(self):
        tau_min = max(self.lower_bound, self.m) / (2 * self.k)
        return grid_indices(tau_min / self.base, self.m, self.base)

    def _threshold(self, sieve):
        return sieve.threshold

    def _after_accept(self, sieve):
        if sieve.value > self.lower_bound:
            self.lower_bound = sieve.value


class ThreeSieves(_SieveSelector):
    """Single candidate set with a threshold that steps down after T straight rejections.

    The threshold starts at the largest grid value not above m (and returns
    there whenever m reaches a new grid level). When a rejection exhausts the
    budget the threshold drops one level and the sample in hand is offered
    again. It never drops below m / (2K(1+eps)).
    """

    def __init__(self, spec, cfg, memo=True, audit=False):
        super().__init__(spec, cfg, memo, audit)
        self.t = int(cfg.t)
        self.sieve: Sieve | None = None
        self._top = None
        self.rejections = 0

    def process(self, sample: Sample) -> None:
        self.samples_seen += 1
        if self.sieve is not None and len(self.sieve) >= self.k:
            return
        cand = self._prepare(sample)
        if cand.singleton > self.m:
            self.m = cand.singleton
        if self.m <= 0:
            return
        top = grid_indices(self.m / self.base, self.m, self.base).stop - 1
        if self.sieve is None:
            self.sieve = self._new_sieve(top)
            self._top = top
        elif top > self._top:
            self._top = top
            self.sieve.index, self.sieve.threshold = top, self.base ** top
            self.rejections = 0
        floor = grid_indices(self.m / (2 * self.k * self.base), self.m, self.base).start
        if self.spec.uses_diversity:
            self.store.begin(cand)
        sieve = self.sieve
        while True:
            if self._offer(sieve, cand, sieve.threshold * self.scale):
                self.rejections = 0
                break
            self.rejections += 1
            if self.rejections >= self.t and sieve.index > floor:
                sieve.index -= 1
                sieve.threshold = self.base ** sieve.index
                self.rejections = 0
                continue
            break
        self.stored_peak = max(self.stored_peak, len(sieve))
        self.distinct_peak = self.stored_peak

    def result(self) -> SelectionResult:
        return self._finish([self.sieve] if self.sieve is not None else [])


class RandomReservoir(StreamSelector):
    """Uniform K-subset of the stream (reservoir sampling, Algorithm R)."""

    def __init__(self, spec, cfg, **_):
        super().__init__(spec, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.reservoir: list[Sample] = []

    def process(self, sample):
        n = self.samples_seen
        self.samples_seen += 1
        if n < self.k:
            self.reservoir.append(sample)
        else:
            j = int(self.rng.integers(0, n + 1))
            if j < self.k:
                self.reservoir[j] = sample
        self.stored_peak = len(self.reservoir)

    def result(self):
        chosen = sorted(self.reservoir, key=lambda s: s.seq)
        return SelectionResult(chosen, objective_value(chosen, self.spec),
                               samples_seen=self.samples_seen, stored_peak=self.stored_peak,
                               distinct_peak=self.stored_peak)


class EntropyTopK(StreamSelector):
    """The K samples with the largest informativeness g; ties keep the earlier seq."""

    def __init__(self, spec, cfg, **_):
        super().__init__(spec, cfg)
        self._heap: list = []
        self.gain_evaluations = 0

    def process(self, sample):
        self.samples_seen += 1
        g = informativeness(sample, self.spec)
        self.gain_evaluations += 1
        key = (g, -sample.seq, -self.samples_seen, sample)
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, key)
        elif key[:3] > self._heap[0][:3]:
            heapq.heapreplace(self._heap, key)
        self.stored_peak = len(self._heap)

    def result(self):
        chosen = sorted((item[3] for item in self._heap), key=lambda s: s.seq)
        return SelectionResult(chosen, objective_value(chosen, self.spec),
                               samples_seen=self.samples_seen, stored_peak=self.stored_peak,
                               gain_evaluations=self.gain_evaluations,
                               distinct_peak=self.stored_peak)


_SELECTORS = {
    "sieve-streaming": SieveStreaming,
    "sieve-streaming-pp": SieveStreamingPP,
    "three-sieves": ThreeSieves,
    "random": RandomReservoir,
    "entropy-topk": EntropyTopK,
}


def make_selector(spec: ObjectiveSpec, cfg: SelectorConfig, *, cache: bool = True,
                  audit: bool = False) -> StreamSelector:
    cls = _SELECTORS[cfg.algorithm]
    if cfg.algorithm in SIEVE_ALGORITHMS:
        return cls(spec, cfg, memo=cache, audit=audit)
    return cls(spec, cfg)


def run_selector(stream: Iterable[Sample], spec: ObjectiveSpec, cfg: SelectorConfig, *,
                 cache: bool = True, audit: bool = False,
                 latencies: list | None = None) -> SelectionResult:
    """Drive one selector over ``stream``. Labels are stripped before the selector sees a sample.

    If ``latencies`` is given, the per-sample processing time in seconds is
    appended to it.
    """
    selector = make_selector(spec, cfg, cache=cache, audit=audit)
    if latencies is None:
        for sample in stream:
            selector.process(sample.without_label())
    else:
        clock = time.perf_counter
        for sample in stream:
            sample = sample.without_label()
            t0 = clock()
            selector.process(sample)
            latencies.append(clock() - t0)
    return selector.result()


def _checked(cfg: SelectorConfig, algorithm: str):
    if cfg.algorithm != algorithm:
        raise ConfigError(f"config is for {cfg.algorithm!r}, not {algorithm!r}")


def sieve_streaming(stream, spec, cfg, **kw) -> SelectionResult:
    _checked(cfg, "sieve-streaming")
    return run_selector(stream, spec, cfg, **kw)


def sieve_streaming_pp(stream, spec, cfg, **kw) -> SelectionResult:
    _checked(cfg, "sieve-streaming-pp")
    return run_selector(stream, spec, cfg, **kw)


def three_sieves(stream, spec, cfg, **kw) -> SelectionResult:
    _checked(cfg, "three-sieves")
    return run_selector(stream, spec, cfg, **kw)


def random_baseline(stream, spec, cfg, **kw) -> SelectionResult:
    _checked(cfg, "random")
    return run_selector(stream, spec, cfg, **kw)


def entropy_topk(stream, spec, cfg, **kw) -> SelectionResult:
    _checked(cfg, "entropy-topk")
    return run_selector(stream, spec, cfg, **kw)


# --- offline oracles -----------------------------------------------------------


def offline_greedy(pool: Sequence[Sample], spec: ObjectiveSpec, k: int) -> SelectionResult:
    """Lazy greedy: stale upper bounds in a max-heap, re-evaluated on demand."""
    state = SelectionState(spec, capacity=max(1, min(k, len(pool))))
    heap = []
    for idx, sample in enumerate(pool):
        heap.append((-objective_gain(state, sample, spec), sample.seq, idx, 0))
    evaluations = len(heap)
    heapq.heapify(heap)
    version = 0
    while heap and len(state) < k:
        neg, seq, idx, ver = heapq.heappop(heap)
        if ver == version:
            selection_commit(state, pool[idx], spec)
            version += 1
            continue
        gain = objective_gain(state, pool[idx], spec)
        evaluations += 1
        heapq.heappush(heap, (-gain, seq, idx, version))
    return SelectionResult(list(state.members), state.value, samples_seen=len(pool),
                           stored_peak=len(pool), gain_evaluations=evaluations)


def subset_count(n: int, k: int) -> int:
    return sum(math.comb(n, r) for r in range(min(n, k) + 1))


def brute_force(pool: Sequence[Sample], spec: ObjectiveSpec, k: int,
                budget: int = 10**6) -> SelectionResult:
    """Exact maximizer over all subsets of size <= k.

    Ties go to the lexicographically smallest sorted id list.
    """
    n = len(pool)
    total = subset_count(n, k)
    if total > budget:
        raise BudgetError(f"{total} subsets exceed the budget of {budget}")
    ordered = sorted(pool, key=lambda s: s.id)
    ids = [s.id for s in ordered]
    if len(set(ids)) != n:
        raise ValueError("brute_force needs distinct ids")
    g = np.array([informativeness(s, spec) for s in ordered]) if spec.uses_informativeness else np.zeros(n)
    A = np.eye(n) + spec.alpha * kernel_matrix(ordered, spec.kernel) if spec.uses_diversity else None
    best_val, best_ids, best = 0.0, [], ()
    for r in range(1, min(n, k) + 1):
        combos = np.array(list(itertools.combinations(range(n), r)), dtype=np.int64)
        info = np.array([math.fsum(g[c]) for c in combos])
        vals = spec.lambda_i * info
        if A is not None:
            sub = A[combos[:, :, None], combos[:, None, :]]
            sign, logdet = np.linalg.slogdet(sub)
            if np.any(sign <= 0):
                raise NumericError("non-positive determinant in exhaustive search")
            vals = vals + spec.lambda_d * 0.5 * logdet
        j = int(np.argmax(vals))
        cand_ids = [ids[i] for i in combos[j]]
        if vals[j] > best_val or (vals[j] == best_val and cand_ids < best_ids):
            best_val, best_ids, best = float(vals[j]), cand_ids, tuple(combos[j])
    chosen = [ordered[i] for i in best]
    return SelectionResult(chosen, objective_value(chosen, spec) if chosen else 0.0,
                           samples_seen=n, stored_peak=n, gain_evaluations=total)
