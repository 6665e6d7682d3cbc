import json

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.augment import (
    EmptyPoolError,
    MissingClassCountError,
    RoiPool,
    RoiRecord,
    SamplerConfig,
    TrackletGenerator,
    class_marginal,
    concat_pools,
    generate_batch,
    generate_tracklet,
    mixture_probs,
    sample_stats,
    sampling_probs,
    soft_label,
)
from tests.conftest import DATA_DIR

P_GRID = [0.0, 0.25, 0.5, 0.75, 1.0]


def _record(category, identity=0, feature=(0.0, 0.0)):
    return RoiRecord(feature=np.asarray(feature), box=(0.0, 0.0, 1.0, 1.0), category=category, identity=identity)


def _pool(categories, counts, identities=None):
    identities = identities if identities is not None else list(range(len(categories)))
    records = [_record(c, i, (float(k), 1.0)) for k, (c, i) in enumerate(zip(categories, identities))]
    return RoiPool.from_records(records, counts)


def test_sampling_probs_hand_arithmetic():
    pool = _pool([0, 1], {0: 1, 1: 4})
    assert sampling_probs(pool, 0.5) == pytest.approx([2.0 / 3.0, 1.0 / 3.0], abs=1e-15)


def test_zero_exponent_is_uniform_over_records():
    pool = _pool([0, 0, 1, 2, 2, 2], {0: 7, 1: 1000, 2: 3})
    assert sampling_probs(pool, 0.0) == pytest.approx(np.full(6, 1.0 / 6.0))


def test_sampling_probs_match_recomputation(fixture_pool):
    probs = sampling_probs(fixture_pool, 0.75)
    raw = np.array([fixture_pool.class_counts[int(c)] ** -0.75 for c in fixture_pool.categories])
    assert np.allclose(probs, raw / raw.sum(), rtol=1e-14)
    assert probs.sum() == pytest.approx(1.0)


def test_sampling_probs_errors():
    with pytest.raises(MissingClassCountError):
        sampling_probs(_pool([0, 1], {0: 3}), 0.5)
    with pytest.raises(EmptyPoolError):
        sampling_probs(RoiPool.from_records([], {}), 0.5)
    with pytest.raises(ValueError):
        sampling_probs(_pool([0], {0: 1}), -0.1)


def test_rarest_class_mass_grows_with_exponent(fixture_pool):
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    rare = [class_marginal(fixture_pool, sampling_probs(fixture_pool, p))[0] for p in grid]
    assert all(a < b for a, b in zip(rare, rare[1:]))
    assert rare[0] == pytest.approx(0.1)


@pytest.mark.parametrize("categories, num_classes, expected", [
    ([0, 0, 1, 1], 3, [0.5, 0.5, 0.0]),
    ([2, 2, 2], 3, [0.0, 0.0, 1.0]),
    ([0, 1, 2, 3], 4, [0.25, 0.25, 0.25, 0.25]),
])
def test_soft_label(categories, num_classes, expected):
    items = [_record(c) for c in categories]
    assert soft_label(items, num_classes).tolist() == expected


def test_soft_label_rejects_out_of_range_and_empty():
    with pytest.raises(ValueError):
        soft_label([_record(3)], 3)
    with pytest.raises(ValueError):
        soft_label([], 3)


def test_single_record_pool():
    pool = RoiPool.from_records([_record(2, 5, (1.0, 2.0))], {2: 10}, num_classes=4)
    tracklet = generate_tracklet(pool, SamplerConfig(length_min=3, length_max_exclusive=6), np.random.default_rng(0))
    assert 3 <= tracklet.length < 6
    assert set(tracklet.indices) == {0}
    assert tracklet.soft_label.tolist() == [0.0, 0.0, 1.0, 0.0]


def test_lengths_stay_in_range(fixture_pool):
    cfg = SamplerConfig(length_min=2, length_max_exclusive=5, tracklets_per_batch=200)
    lengths = {t.length for t in generate_batch(fixture_pool, cfg, np.random.default_rng(3))}
    assert lengths == {2, 3, 4}


def test_single_class_restriction_gives_one_hot_labels(fixture_pool):
    cfg = SamplerConfig(allow_multi_class=False, tracklets_per_batch=50)
    for tracklet in generate_batch(fixture_pool, cfg, np.random.default_rng(8)):
        assert tracklet.soft_label.max() == 1.0
        assert len(set(tracklet.categories.tolist())) == 1


def test_single_identity_restriction(fixture_pool):
    cfg = SamplerConfig(allow_multi_identity=False, tracklets_per_batch=50)
    for tracklet in generate_batch(fixture_pool, cfg, np.random.default_rng(9)):
        assert len(set(tracklet.identities.tolist())) == 1


def test_unrestricted_tracklets_mix_identities(fixture_pool):
    batch = generate_batch(fixture_pool, SamplerConfig(tracklets_per_batch=20), np.random.default_rng(10))
    assert any(len(set(t.identities.tolist())) > 1 for t in batch)


def test_default_batch_size(fixture_pool):
    assert len(generate_batch(fixture_pool, SamplerConfig(), np.random.default_rng(0))) == 256


def test_same_seed_same_batch(fixture_pool):
    cfg = SamplerConfig(tracklets_per_batch=8)
    a = generate_batch(fixture_pool, cfg, np.random.default_rng(77))
    b = generate_batch(fixture_pool, cfg, np.random.default_rng(77))
    assert [t.indices for t in a] == [t.indices for t in b]


@pytest.mark.parametrize("exponent", P_GRID)
def test_empirical_class_marginal_matches_analytic(fixture_pool, exponent):
    generator = TrackletGenerator(fixture_pool, SamplerConfig(exponent=exponent))
    picks = generator.draw_records(1_000_000, np.random.default_rng(2024))
    empirical = np.bincount(fixture_pool.categories[picks], minlength=10) / 1_000_000
    analytic = class_marginal(fixture_pool, generator.probs)
    assert np.abs(empirical - analytic).sum() < 0.005


def test_tail_mass_rises_with_exponent_on_random_pools():
    rng = np.random.default_rng(31)
    for _ in range(20):
        classes = int(rng.integers(3, 12))
        counts = rng.choice(np.arange(1, 2000), size=classes, replace=False)
        categories = np.concatenate([np.arange(classes), rng.integers(0, classes, size=60)])
        pool = _pool(categories.tolist(), dict(enumerate(counts.tolist())))
        tail = counts < np.median(counts)
        masses = [class_marginal(pool, sampling_probs(pool, p))[tail].sum() for p in P_GRID]
        assert all(b > a for a, b in zip(masses, masses[1:]))


class _XorShiftRng:
    """32-bit xorshift stream offering the two Generator methods the sampler calls."""

    def __init__(self, seed: int):
        self.state = seed

    def _next(self) -> int:
        x = self.state
        x ^= (x << 13) & 0xFFFFFFFF
        x ^= x >> 17
        x ^= (x << 5) & 0xFFFFFFFF
        self.state = x
        return x

    def integers(self, low, high):
        return low + self._next() % (high - low)

    def random(self, size):
        return np.array([self._next() / 2.0**32 for _ in range(size)])


def test_generator_matches_golden_file(fixture_pool):
    free = SamplerConfig(exponent=1.0, length_min=2, length_max_exclusive=6, tracklets_per_batch=4)
    restricted = free.model_copy(update={"allow_multi_identity": False, "allow_multi_class": False})
    batch = TrackletGenerator(fixture_pool, free).generate_batch(_XorShiftRng(42))
    batch += TrackletGenerator(fixture_pool, restricted).generate_batch(_XorShiftRng(43))
    payload = "".join(
        json.dumps({"indices": list(t.indices), "soft_label": t.soft_label.tolist()}) + "\n" for t in batch
    )
    assert payload == (DATA_DIR / "golden_tracklets_seed42.jsonl").read_text(encoding="utf-8")


def test_both_restrictions_keep_one_identity_and_one_class():
    # identity 0 carries two categories
    pool = _pool([0, 1, 0, 1, 2], {0: 3, 1: 3, 2: 1}, identities=[0, 0, 0, 0, 1])
    cfg = SamplerConfig(allow_multi_identity=False, allow_multi_class=False, length_min=4,
                        length_max_exclusive=8, tracklets_per_batch=40)
    for tracklet in TrackletGenerator(pool, cfg).generate_batch(np.random.default_rng(6)):
        assert len(set(tracklet.identities.tolist())) == 1
        assert len(set(tracklet.categories.tolist())) == 1
        assert tracklet.soft_label.max() == 1.0


def test_sampler_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(length_min=16, length_max_exclusive=16)
    with pytest.raises(ValidationError):
        SamplerConfig(exponent=-1.0)


def test_concat_pools_keeps_identities_apart():
    a = _pool([0, 1], {0: 2, 1: 3}, identities=[0, 1])
    b = _pool([1, 2], {1: 4, 2: 5}, identities=[0, 0])
    merged, origin = concat_pools([a, b])
    assert len(merged) == 4
    assert merged.identities.tolist() == [0, 1, 2, 2]
    assert origin.tolist() == [0, 0, 1, 1]
    assert merged.class_counts == {0: 2, 1: 7, 2: 5}


def test_mixture_probs_split_mass_by_ratio():
    a = _pool([0, 0], {0: 1})
    b = _pool([1, 1, 1], {1: 1})
    probs = mixture_probs([a, b], [1.0, 3.0], 0.5)
    assert probs[:2].sum() == pytest.approx(0.25)
    assert probs[2:].sum() == pytest.approx(0.75)
    with pytest.raises(ValueError):
        mixture_probs([a, b], [1.0], 0.5)


def test_sample_stats_report(fixture_pool):
    stats = sample_stats(fixture_pool, 1.0, 200_000, np.random.default_rng(5))
    assert stats["draws"] == 200_000
    assert stats["class_l1"] < 0.02
    assert sum(stats["class_analytic"]) == pytest.approx(1.0)
    assert stats["rarest_class_mass"] == pytest.approx(stats["class_analytic"][0])
