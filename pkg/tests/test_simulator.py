from collections import Counter

import numpy as np
import pytest

from sievestream.errors import ConfigError
from sievestream.objective import entropy
from sievestream.simulator import (
    PeculiaritySpec,
    WorldSpec,
    build_world,
    evaluate_selection,
    generate_round,
    is_nonobject,
    full_scale_preset,
)

SMALL_WORLD = WorldSpec(classes=4, feature_dim=8, seed=5)
SMALL_PEC = PeculiaritySpec(imbalance_factor=10, replication=4, nonobject_count=40, round_size=140, rounds=3)


def test_preset_parameters():
    world, pec, cfg = full_scale_preset()
    assert (pec.round_size, pec.nonobject_count, pec.replication + 1, pec.imbalance_factor, pec.rounds) == \
        (2048, 1408, 5, 10, 30)
    assert cfg.k == 128 and cfg.epsilon == 0.1 and cfg.algorithm == "sieve-streaming-pp"
    assert pec.groups_per_round == 128


def test_round_shape_and_ordering():
    stream = generate_round(SMALL_WORLD, SMALL_PEC, 1)
    assert len(stream) == 140
    seqs = [s.seq for s in stream]
    assert seqs == list(range(140, 280))
    assert len({s.id for s in stream}) == 140
    assert sum(is_nonobject(s, SMALL_WORLD) for s in stream) == 40


def test_groups_are_contiguous_replicas():
    stream = generate_round(SMALL_WORLD, SMALL_PEC, 0)
    runs = []
    for s in stream:
        if runs and runs[-1][0] == s.group:
            runs[-1][1].append(s)
        else:
            runs.append((s.group, [s]))
    objects = [(g, members) for g, members in runs if not is_nonobject(members[0], SMALL_WORLD)]
    assert len(objects) == SMALL_PEC.groups_per_round
    for _, members in objects:
        assert len(members) == 5
        assert len({m.label for m in members}) == 1
        X = np.stack([m.features for m in members])
        assert np.abs(X - X[0]).max() < 0.1


def test_deterministic_per_seed():
    a = generate_round(SMALL_WORLD, SMALL_PEC, 2)
    b = generate_round(SMALL_WORLD, SMALL_PEC, 2)
    assert [s.id for s in a] == [s.id for s in b]
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
    c = generate_round(WorldSpec(classes=4, feature_dim=8, seed=6), SMALL_PEC, 2)
    assert not all(np.array_equal(x.features, y.features) for x, y in zip(a, c))


def test_no_duplication_no_fill_means_all_unique():
    pec = PeculiaritySpec(replication=0, nonobject_count=0, round_size=50, rounds=1)
    stream = generate_round(SMALL_WORLD, pec, 0)
    report = evaluate_selection(stream, SMALL_WORLD)
    assert report.selected == report.unique == 50 and report.nonobject == 0


def test_imbalance_ratio():
    pec = PeculiaritySpec(imbalance_factor=10, replication=0, nonobject_count=0, round_size=4000, rounds=1)
    world = WorldSpec(classes=4, feature_dim=4, seed=1)
    w = build_world(world, pec)
    counts = Counter(s.label for s in generate_round(world, pec, 0))
    rare = {str(c) for c in w.rare_classes}
    assert len(rare) == 2
    rare_mean = np.mean([counts[c] for c in rare])
    common_mean = np.mean([counts[str(c)] for c in range(4) if str(c) not in rare])
    assert 7 < common_mean / rare_mean < 14


def test_softmax_valid_and_nonobjects_confident():
    world, pec, _ = full_scale_preset()
    stream = generate_round(world, pec, 0)
    for s in stream[:50]:
        assert s.softmax.shape == (world.classes + 1,)
        assert abs(s.softmax.sum() - 1) < 1e-9
    h_non = np.mean([entropy(s.softmax) for s in stream if is_nonobject(s, world)])
    h_obj = np.mean([entropy(s.softmax) for s in stream if not is_nonobject(s, world)])
    assert h_non < 0.25 * h_obj


def test_evaluate_selection_counts():
    stream = generate_round(SMALL_WORLD, SMALL_PEC, 0)
    objects = [s for s in stream if not is_nonobject(s, SMALL_WORLD)]
    non = [s for s in stream if is_nonobject(s, SMALL_WORLD)]
    chosen = objects[:7] + non[:3]
    report = evaluate_selection(chosen, SMALL_WORLD)
    assert report.selected == 10 and report.nonobject == 3
    assert report.unique == len({s.group for s in objects[:7]})
    assert sum(report.per_class.values()) == 7


def test_spec_validation():
    with pytest.raises(ConfigError):
        PeculiaritySpec(round_size=100, nonobject_count=1, replication=4)
    with pytest.raises(ConfigError):
        PeculiaritySpec(imbalanced_fraction=1.5)
    with pytest.raises(ConfigError):
        PeculiaritySpec(nonobject_count=5000)
    with pytest.raises(ConfigError):
        WorldSpec(cluster_sigma=0)
    with pytest.raises(ConfigError):
        generate_round(SMALL_WORLD, SMALL_PEC, 3)
