"""Composite set function f(S) = lambda_i * sum g(x) + lambda_d * 1/2 log det(I + alpha M_S).

The diversity term is tracked incrementally on A_S = I + alpha * M_S. Appending
one sample borders A_S with a cross vector w and diagonal entry a; the Schur
complement s = a - w^T A_S^{-1} w gives det(A_{S+e}) = s * det(A_S) and the new
inverse follows from the block-inverse identity, so both cost O(|S|^2).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numba as nb
import numpy as np

from .errors import (
    DegenerateCandidateError,
    InputError,
    NumericError,
    StaleStateError,
    ValidationError,
)

KERNEL_KINDS = ("polynomial-features", "rbf-l1-raw", "rbf-l2-features", "rbf-jsd-softmax")
INFORMATIVENESS_MODES = ("softmax-entropy", "precomputed-score", "detection-combo")

# Schur complements at or below this are treated as exact duplicates.
S_FLOOR = 1e-12

_SOFTMAX_TOL = 1e-6


def _as_vector(value, name, sample_id):
    if value is None:
        return None
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"sample {sample_id!r}: {name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"sample {sample_id!r}: {name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Sample:
    """One stream item.

    ``label`` is ground truth for evaluation only; selectors receive samples
    with it stripped (see :meth:`without_label`). Unknown record keys are
    kept in ``extra`` and otherwise ignored.
    """

    id: str
    seq: int = 0
    group: str | None = None
    softmax: np.ndarray | None = None
    features: np.ndarray | None = None
    score: float | None = None
    label: str | None = None
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("sample id must be a non-empty string")
        if int(self.seq) < 0:
            raise ValidationError(f"sample {self.id!r}: seq must be non-negative")
        object.__setattr__(self, "seq", int(self.seq))
        if self.group is None:
            object.__setattr__(self, "group", self.id)
        softmax = _as_vector(self.softmax, "softmax", self.id)
        if softmax is not None:
            if np.any(softmax < 0) or abs(softmax.sum() - 1.0) > _SOFTMAX_TOL:
                raise ValidationError(f"sample {self.id!r}: softmax is not a probability vector")
        object.__setattr__(self, "softmax", softmax)
        object.__setattr__(self, "features", _as_vector(self.features, "features", self.id))
        if self.score is not None:
            score = float(self.score)
            if not math.isfinite(score) or score < 0:
                raise ValidationError(f"sample {self.id!r}: score must be finite and >= 0")
            object.__setattr__(self, "score", score)
        if self.softmax is None and self.features is None and self.score is None:
            raise InputError(f"sample {self.id!r} carries none of softmax, features, score")

    def without_label(self) -> "Sample":
        if self.label is None:
            return self
        return replace(self, label=None)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "polynomial-features"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValidationError("kernel beta must be positive")

    @property
    def field(self) -> str:
        return "softmax" if self.kind == "rbf-jsd-softmax" else "features"


@dataclass(frozen=True)
class ObjectiveSpec:
    lambda_i: float = 1.0
    lambda_d: float = 1.0
    alpha: float = 1.0
    informativeness: str = "softmax-entropy"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    detection_lambda: float = 0.5

    def __post_init__(self):
        if self.lambda_i < 0 or self.lambda_d < 0:
            raise ValidationError("lambda_i and lambda_d must be non-negative")
        if not self.lambda_i + self.lambda_d > 0:
            raise ValidationError("lambda_i + lambda_d must be positive")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValidationError("alpha must be positive")
        if self.informativeness not in INFORMATIVENESS_MODES:
            raise ValidationError(f"unknown informativeness {self.informativeness!r}")
        if not 0.0 <= self.detection_lambda <= 1.0:
            raise ValidationError("detection_lambda must lie in [0, 1]")

    @property
    def uses_diversity(self) -> bool:
        return self.lambda_d > 0

    @property
    def uses_informativeness(self) -> bool:
        return self.lambda_i > 0


def detection_score(stability: float, uncertainty: float, lam: float = 0.5) -> float:
    """Host-side helper: lam * (1 - S_I) + (1 - lam) * U_C, ready for ``Sample.score``."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError("lam must lie in [0, 1]")
    return lam * (1.0 - stability) + (1.0 - lam) * uncertainty


def entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return h if h > 0 else 0.0


def informativeness(sample: Sample, spec: ObjectiveSpec) -> float:
    if spec.informativeness == "softmax-entropy":
        if sample.softmax is None:
            raise InputError(f"sample {sample.id!r} has no softmax for entropy informativeness")
        return entropy(sample.softmax)
    # precomputed-score and detection-combo both ingest the host's score
    if sample.score is None:
        raise InputError(f"sample {sample.id!r} has no score for {spec.informativeness}")
    return sample.score


# --- kernels -----------------------------------------------------------------
# Explicit per-pair loops: each value depends only on the two vectors, never on
# batch shape, so memoized and direct evaluations agree bit for bit, and the
# loops are symmetric in their arguments.


@nb.njit(cache=True)
def _row_linear(x, Y, out):
    for i in range(Y.shape[0]):
        acc = 0.0
        for j in range(x.shape[0]):
            acc += x[j] * Y[i, j]
        out[i] = acc


@nb.njit(cache=True)
def _row_l1(x, Y, beta, out):
    for i in range(Y.shape[0]):
        acc = 0.0
        for j in range(x.shape[0]):
            acc += abs(x[j] - Y[i, j])
        out[i] = math.exp(-beta * acc)


@nb.njit(cache=True)
def _row_l2(x, Y, beta, out):
    for i in range(Y.shape[0]):
        acc = 0.0
        for j in range(x.shape[0]):
            d = x[j] - Y[i, j]
            acc += d * d
        out[i] = math.exp(-beta * math.sqrt(acc))


@nb.njit(cache=True)
def _row_jsd(x, Y, beta, out):
    for i in range(Y.shape[0]):
        ap = 0.0
        aq = 0.0
        for j in range(x.shape[0]):
            p = x[j]
            q = Y[i, j]
            m = 0.5 * (p + q)
            if p > 0.0:
                ap += p * math.log(p / m)
            if q > 0.0:
                aq += q * math.log(q / m)
        out[i] = math.exp(-beta * (0.5 * ap + 0.5 * aq))


def kernel_vector(sample: Sample, spec: KernelSpec) -> np.ndarray:
    vec = sample.softmax if spec.field == "softmax" else sample.features
    if vec is None:
        raise InputError(f"sample {sample.id!r} has no {spec.field} for kernel {spec.kind}")
    return vec


def kernel_row(x: np.ndarray, Y: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """k(x, y_i) for every row of ``Y``."""
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != x.shape[0]:
        raise InputError(f"kernel dimension mismatch: {x.shape} vs {Y.shape}")
    out = np.empty(Y.shape[0])
    if Y.shape[0] == 0:
        return out
    if spec.kind == "polynomial-features":
        _row_linear(x, Y, out)
    elif spec.kind == "rbf-l1-raw":
        _row_l1(x, Y, spec.beta, out)
    elif spec.kind == "rbf-l2-features":
        _row_l2(x, Y, spec.beta, out)
    else:
        _row_jsd(x, Y, spec.beta, out)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite kernel value")
    return out


def kernel(a: Sample, b: Sample, spec: KernelSpec) -> float:
    # canonical argument order; the loops are symmetric anyway
    if (b.seq, b.id) < (a.seq, a.id):
        a, b = b, a
    return float(kernel_row(kernel_vector(a, spec), kernel_vector(b, spec)[None, :], spec)[0])


def kernel_matrix(samples: Sequence[Sample], spec: KernelSpec) -> np.ndarray:
    n = len(samples)
    M = np.empty((n, n))
    if n == 0:
        return M
    X = np.stack([kernel_vector(s, spec) for s in samples])
    for i in range(n):
        row = kernel_row(X[i], X[i:], spec)
        M[i, i:] = row
        M[i:, i] = row
    return M


class KernelCache:
    """Memo of k(., .) keyed by unordered id pair.

    Lookups may run concurrently; inserts take a lock. Hit/miss counters are
    the only observable difference between enabled and disabled caches.
    """

    def __init__(self, spec: KernelSpec, enabled: bool = True):
        self.spec = spec
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self._pairs: dict[tuple[str, str], float] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(a: Sample, b: Sample) -> tuple[str, str]:
        return (a.id, b.id) if a.id <= b.id else (b.id, a.id)

    @property
    def evaluations(self) -> int:
        return self.misses

    def __len__(self):
        return len(self._pairs)

    def value(self, a: Sample, b: Sample) -> float:
        return float(self.row(a, [b])[0])

    def row(self, a: Sample, others: Sequence[Sample]) -> np.ndarray:
        out = np.empty(len(others))
        if not self.enabled:
            self.misses += len(others)
            if others:
                out[:] = kernel_row(kernel_vector(a, self.spec),
                                    np.stack([kernel_vector(b, self.spec) for b in others]),
                                    self.spec)
            return out
        missing = []
        for i, b in enumerate(others):
            v = self._pairs.get(self._key(a, b))
            if v is None:
                missing.append(i)
            else:
                out[i] = v
        self.hits += len(others) - len(missing)
        self.misses += len(missing)
        if missing:
            vals = kernel_row(kernel_vector(a, self.spec),
                              np.stack([kernel_vector(others[i], self.spec) for i in missing]),
                              self.spec)
            with self._lock:
                for i, v in zip(missing, vals):
                    self._pairs[self._key(a, others[i])] = float(v)
            out[missing] = vals
        return out

    def forget(self, sample_id: str) -> None:
        with self._lock:
            for key in [k for k in self._pairs if sample_id in k]:
                del self._pairs[key]

    def clear(self) -> None:
        with self._lock:
            self._pairs.clear()
        self.hits = self.misses = 0


# --- incremental diversity -------------------------------------------------------


class DiversityState:
    """Members of S with inv = (I + alpha M_S)^{-1} and logdet = log det(I + alpha M_S).

    The inverse lives in a preallocated square buffer; ``inv`` is a view of its
    leading block. ``version`` increments on every commit so that gains computed
    against an older state are rejected.
    """

    def __init__(self, capacity: int = 8):
        self.members: list[Sample] = []
        self._ids: set[str] = set()
        self._buf = np.zeros((max(capacity, 1),) * 2)
        self.logdet = 0.0
        self.version = 0

    def __len__(self):
        return len(self.members)

    def __contains__(self, sample_id):
        return sample_id in self._ids

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.members]

    @property
    def inv(self) -> np.ndarray:
        n = len(self.members)
        return self._buf[:n, :n]

    def copy(self) -> "DiversityState":
        other = DiversityState(self._buf.shape[0])
        other.members = list(self.members)
        other._ids = set(self._ids)
        other._buf[...] = self._buf
        other.logdet = self.logdet
        other.version = self.version
        return other

    def matrix(self, spec: ObjectiveSpec) -> np.ndarray:
        """A_S rebuilt from scratch, for audits."""
        n = len(self.members)
        return np.eye(n) + spec.alpha * kernel_matrix(self.members, spec.kernel)

    def _grow(self):
        n = self._buf.shape[0]
        buf = np.zeros((2 * n, 2 * n))
        buf[:n, :n] = self._buf
        self._buf = buf


class DiversityGain(NamedTuple):
    gain: float
    cross: np.ndarray  # w = alpha * (k(e, x_1), ..., k(e, x_n))
    schur: float
    inv_cross: np.ndarray  # inv @ w
    version: int
    degenerate: bool


def bordered_gain(inv: np.ndarray, w: np.ndarray, a: float) -> tuple[float, np.ndarray]:
    """Schur complement s = a - w^T inv w and u = inv @ w."""
    if w.shape[0] == 0:
        return a, w
    u = inv @ w
    return a - float(w @ u), u


def diversity_gain(state: DiversityState, candidate: Sample, spec: ObjectiveSpec,
                   cache: KernelCache | None = None) -> DiversityGain:
    """Marginal gain of the diversity term, 1/2 log s. Does not mutate ``state``."""
    if candidate.id in state:
        raise InputError(f"sample {candidate.id!r} is already a member")
    if cache is not None:
        kvals = cache.row(candidate, state.members)
        kee = cache.value(candidate, candidate)
    else:
        x = kernel_vector(candidate, spec.kernel)
        kvals = (kernel_row(x, np.stack([kernel_vector(m, spec.kernel) for m in state.members]),
                            spec.kernel) if state.members else np.empty(0))
        kee = float(kernel_row(x, x[None, :], spec.kernel)[0])
    w = spec.alpha * kvals
    s, u = bordered_gain(state.inv, w, 1.0 + spec.alpha * kee)
    if not math.isfinite(s):
        raise NumericError(f"non-finite Schur complement for sample {candidate.id!r}")
    if s <= S_FLOOR:
        return DiversityGain(0.0, w, s, u, state.version, True)
    return DiversityGain(0.5 * math.log(s), w, s, u, state.version, False)


def diversity_commit(state: DiversityState, candidate: Sample, result: DiversityGain) -> DiversityState:
    """Append ``candidate`` using the block-inverse identity; mutates and returns ``state``."""
    if result.version != state.version:
        raise StaleStateError("gain was computed against an older state")
    if result.degenerate:
        raise DegenerateCandidateError(f"sample {candidate.id!r} duplicates the current span")
    if candidate.id in state:
        raise InputError(f"sample {candidate.id!r} is already a member")
    n = len(state.members)
    if n + 1 > state._buf.shape[0]:
        state._grow()
    s = result.schur
    buf = state._buf
    if n:
        u = result.inv_cross
        buf[:n, :n] += np.outer(u, u) / s
        col = -u / s
        buf[:n, n] = col
        buf[n, :n] = col
    buf[n, n] = 1.0 / s
    state.members.append(candidate)
    state._ids.add(candidate.id)
    state.logdet += math.log(s)
    state.version += 1
    return state


# --- composite objective -------------------------------------------------------------


class SelectionState:
    """Running selection for the composite objective."""

    def __init__(self, spec: ObjectiveSpec, capacity: int = 8):
        self.spec = spec
        self.diversity = DiversityState(capacity)
        self.members: list[Sample] = []
        self._ids: set[str] = set()
        self.info_sum = 0.0

    def __len__(self):
        return len(self.members)

    def __contains__(self, sample_id):
        return sample_id in self._ids

    @property
    def value(self) -> float:
        return (self.spec.lambda_i * self.info_sum
                + self.spec.lambda_d * 0.5 * self.diversity.logdet)


def _evaluate(state: SelectionState, candidate: Sample, spec: ObjectiveSpec,
              cache: KernelCache | None):
    if candidate.id in state:
        raise InputError(f"sample {candidate.id!r} is already selected")
    g = informativeness(candidate, spec) if spec.uses_informativeness else 0.0
    dg = diversity_gain(state.diversity, candidate, spec, cache) if spec.uses_diversity else None
    total = spec.lambda_i * g + (spec.lambda_d * dg.gain if dg is not None else 0.0)
    return total, g, dg


def objective_gain(state: SelectionState, candidate: Sample, spec: ObjectiveSpec,
                   cache: KernelCache | None = None) -> float:
    return _evaluate(state, candidate, spec, cache)[0]


def selection_commit(state: SelectionState, candidate: Sample, spec: ObjectiveSpec,
                     cache: KernelCache | None = None) -> float:
    """Add ``candidate`` and return the gain it contributed."""
    total, g, dg = _evaluate(state, candidate, spec, cache)
    if dg is not None:
        diversity_commit(state.diversity, candidate, dg)
    state.members.append(candidate)
    state._ids.add(candidate.id)
    state.info_sum += g
    return total


def objective_value(samples: Sequence[Sample], spec: ObjectiveSpec) -> float:
    """Reference evaluator: direct dense determinant, members in id order."""
    ordered = sorted(samples, key=lambda s: s.id)
    if len({s.id for s in ordered}) != len(ordered):
        raise InputError("objective_value needs distinct ids")
    info = 0.0
    if spec.uses_informativeness:
        info = math.fsum(informativeness(s, spec) for s in ordered)
    div = 0.0
    if spec.uses_diversity and ordered:
        A = np.eye(len(ordered)) + spec.alpha * kernel_matrix(ordered, spec.kernel)
        sign, logdet = np.linalg.slogdet(A)
        if sign <= 0 or not math.isfinite(logdet):
            raise NumericError(f"log det(I + alpha M) unusable (sign={sign}, value={logdet})")
        div = 0.5 * float(logdet)
    return spec.lambda_i * info + spec.lambda_d * div
