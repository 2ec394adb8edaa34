"""Synthetic streams with imbalance, duplication and non-object fill.

Classes are Gaussian clusters in feature space. An extra centroid stands for
the non-object class (index C). Softmax outputs are a sharpness-scaled softmax
of negative mean squared distances to all C + 1 centroids, so entropy is high
between clusters and low for the tight non-object cluster.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .algorithms import SelectorConfig
from .errors import ConfigError
from .objective import Sample


@dataclass(frozen=True)
class WorldSpec:
    classes: int = 10
    feature_dim: int = 64
    centroid_spread: float = 1.0
    cluster_sigma: float = 1.0
    softmax_sharpness: float = 2.0
    seed: int = 0
    # non-object items scatter this much less than class clusters
    nonobject_shrink: float = 0.1
    nonobject_offset: float = 2.0

    def __post_init__(self):
        if self.classes < 1 or self.feature_dim < 1:
            raise ConfigError("classes and feature_dim must be positive")
        for name in ("centroid_spread", "cluster_sigma", "softmax_sharpness", "nonobject_shrink",
                     "nonobject_offset"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def nonobject_class(self) -> int:
        return self.classes


@dataclass(frozen=True)
class PeculiaritySpec:
    imbalance_factor: int = 10
    imbalanced_fraction: float = 0.5
    replication: int = 4
    noise_sigma: float = 0.01
    nonobject_count: int = 1408
    round_size: int = 2048
    rounds: int = 30

    def __post_init__(self):
        if self.imbalance_factor < 1:
            raise ConfigError("imbalance_factor must be a positive integer")
        if not 0.0 <= self.imbalanced_fraction <= 1.0:
            raise ConfigError("imbalanced_fraction must lie in [0, 1]")
        if self.replication < 0 or self.noise_sigma < 0 or self.nonobject_count < 0:
            raise ConfigError("replication, noise_sigma and nonobject_count must be non-negative")
        if self.round_size < 1 or self.rounds < 1:
            raise ConfigError("round_size and rounds must be positive")
        if self.round_size < self.nonobject_count:
            raise ConfigError("round_size must be at least nonobject_count")
        if (self.round_size - self.nonobject_count) % (self.replication + 1):
            raise ConfigError(
                f"{self.round_size - self.nonobject_count} object slots cannot hold "
                f"whole groups of {self.replication + 1} replicas")

    @property
    def groups_per_round(self) -> int:
        return (self.round_size - self.nonobject_count) // (self.replication + 1)


@dataclass
class EvaluationReport:
    selected: int = 0
    unique: int = 0
    nonobject: int = 0
    per_class: dict = field(default_factory=dict)


class World:
    """Centroids and class weights derived from a WorldSpec; cheap to rebuild."""

    def __init__(self, spec: WorldSpec, pec: PeculiaritySpec):
        self.spec = spec
        self.pec = pec
        rng = np.random.default_rng([spec.seed, 0x5EED])
        C, d = spec.classes, spec.feature_dim
        self.centroids = rng.normal(0.0, spec.centroid_spread, size=(C + 1, d))
        # the non-object centroid sits farther out, so its softmax is confident
        self.centroids[C] *= spec.nonobject_offset
        diffs = self.centroids[:, None, :] - self.centroids[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1)) + np.eye(C + 1)
        if np.any(dist <= 0):
            raise ConfigError("class centroids are not pairwise distinct")
        rare = rng.permutation(C)[: int(round(C * pec.imbalanced_fraction))]
        weights = np.ones(C)
        weights[rare] = 1.0 / pec.imbalance_factor
        self.rare_classes = np.sort(rare)
        self.class_probs = weights / weights.sum()

    def softmax(self, X: np.ndarray) -> np.ndarray:
        sq = ((X[:, None, :] - self.centroids[None, :, :]) ** 2).mean(-1)
        logits = -self.spec.softmax_sharpness * sq
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


@lru_cache(maxsize=8)
def build_world(world: WorldSpec, pec: PeculiaritySpec) -> World:
    return World(world, pec)


def generate_round(world: WorldSpec, pec: PeculiaritySpec, round_index: int) -> list[Sample]:
    """One round's ordered stream of exactly ``pec.round_size`` samples."""
    if not 0 <= round_index < pec.rounds:
        raise ConfigError(f"round_index {round_index} outside [0, {pec.rounds})")
    w = build_world(world, pec)
    rng = np.random.default_rng([world.seed, round_index])
    C, d = world.classes, world.feature_dim
    n_groups = pec.groups_per_round
    reps = pec.replication + 1

    classes = rng.choice(C, size=n_groups, p=w.class_probs)
    base = w.centroids[classes] + rng.normal(0.0, world.cluster_sigma, size=(n_groups, d))
    obj = np.repeat(base, reps, axis=0) + rng.normal(0.0, 1.0, size=(n_groups * reps, d)) * pec.noise_sigma
    non = (w.centroids[C] + rng.normal(0.0, world.cluster_sigma * world.nonobject_shrink,
                                       size=(pec.nonobject_count, d)))

    # shuffle group tokens and non-object tokens; groups stay contiguous
    tokens = np.concatenate([np.arange(n_groups), -1 - np.arange(pec.nonobject_count)])
    rng.shuffle(tokens)

    X = np.empty((pec.round_size, d))
    meta = []
    pos = 0
    for tok in tokens:
        if tok >= 0:
            X[pos:pos + reps] = obj[tok * reps:(tok + 1) * reps]
            group = f"r{round_index:03d}-g{tok:04d}"
            for r in range(reps):
                meta.append((f"{group}-{r}", group, int(classes[tok])))
            pos += reps
        else:
            j = -1 - tok
            X[pos] = non[j]
            ident = f"r{round_index:03d}-n{j:04d}"
            meta.append((ident, ident, C))
            pos += 1
    P = w.softmax(X)
    offset = round_index * pec.round_size
    return [
        Sample(id=ident, seq=offset + i, group=group, softmax=P[i], features=X[i], label=str(c))
        for i, (ident, group, c) in enumerate(meta)
    ]


def full_scale_preset() -> tuple[WorldSpec, PeculiaritySpec, SelectorConfig]:
    """2048 items per round, K = 128, 1408 non-object fill, x5 duplication, x10 imbalance, 30 rounds."""
    world = WorldSpec(classes=10, seed=0)
    pec = PeculiaritySpec(imbalance_factor=10, imbalanced_fraction=0.5, replication=4,
                          noise_sigma=0.01, nonobject_count=1408, round_size=2048, rounds=30)
    cfg = SelectorConfig("sieve-streaming-pp", k=128, epsilon=0.1)
    return world, pec, cfg


def is_nonobject(sample: Sample, world: WorldSpec) -> bool:
    return sample.label == str(world.nonobject_class)


def evaluate_selection(chosen, world: WorldSpec) -> EvaluationReport:
    """Unique counts distinct duplication groups among object samples; non-objects are counted apart."""
    report = EvaluationReport(selected=len(chosen))
    groups = set()
    per_class = Counter()
    for s in chosen:
        if is_nonobject(s, world):
            report.nonobject += 1
            continue
        groups.add(s.group)
        if s.label is not None:
            per_class[s.label] += 1
    report.unique = len(groups)
    report.per_class = dict(sorted(per_class.items(), key=lambda kv: int(kv[0])))
    return report
