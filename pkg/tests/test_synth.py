import numpy as np
import pytest
from scipy import stats

from dtcformer.events import N_RESERVED, Event, EventSequence
from dtcformer.synth import (
    GeneratorConfig, ResampleConfig, _contains_in_order, build_process, generate_fleet,
    inject_random_events, label_counts, resample_classes, simulate_hawkes,
)
from conftest import random_sequence


@pytest.fixture(scope="module")
def fleet():
    return generate_fleet(GeneratorConfig(seed=3), 1000)


class TestHawkes:
    def test_no_excitation_is_poisson(self):
        rng = np.random.default_rng(5)
        mu = np.array([0.0, 2.0, 1.0])
        empty = np.zeros(0, dtype=np.int64)
        times, kinds = simulate_hawkes(mu, empty, empty, np.zeros(0), np.zeros(0), 2000.0, rng)
        gaps = np.diff(np.concatenate([[0.0], times]))
        assert stats.kstest(gaps, "expon", args=(0, 1 / 3.0)).pvalue > 0.01
        assert times.size == pytest.approx(6000, abs=4 * np.sqrt(6000))
        # type shares follow mu
        assert np.mean(kinds == 1) == pytest.approx(2 / 3, abs=0.02)
        assert not np.any(kinds == 0)

    def test_self_excitation_raises_rate(self):
        rng = np.random.default_rng(6)
        mu = np.array([1.0])
        src = dst = np.array([0])
        times, _ = simulate_hawkes(mu, src, dst, np.array([0.5]), np.array([1.0]), 3000.0, rng)
        # stationary rate mu / (1 - branching) = 2
        assert times.size / 3000.0 == pytest.approx(2.0, rel=0.1)
        assert np.all(np.diff(times) >= 0)

    def test_explosive_excitation_rejected(self):
        cfg = GeneratorConfig(vocab_size=60, n_error_patterns=2, base_intensity=[0.01] * 60,
                              excitation=[(10, 11, 1.5, 1.0), (11, 10, 1.5, 1.0)])
        with pytest.raises(ValueError, match="spectral radius"):
            build_process(cfg)


class TestFleet:
    def test_mean_length_within_15_percent(self, fleet):
        lengths = np.array([len(s) for s in fleet.sequences])
        assert abs(lengths.mean() - 150.0) / 150.0 < 0.15

    def test_sequences_valid(self, fleet):
        for s in fleet.sequences[:200]:
            s.validate(len(fleet.vocab))
            assert np.all(s.tokens >= N_RESERVED)
            assert s.times[-1] <= 720.0 and s.mileage[-1] <= 300.0

    def test_labels_only_when_motif_present(self, fleet):
        labelled = 0
        for s in fleet.sequences:
            for k in s.labels or ():
                labelled += 1
                assert _contains_in_order(list(s.tokens), fleet.process.patterns[k].motif)
        assert labelled > 500

    def test_unlabelled_share(self, fleet):
        share = np.mean([s.labels is None for s in fleet.sequences])
        assert 0.1 < share < 0.35

    def test_patterns_use_disjoint_tokens(self, fleet):
        used = [t for p in fleet.process.patterns for t in p.motif + p.symptoms]
        assert len(used) == len(set(used))
        assert all(3 <= len(p.motif) <= 6 for p in fleet.process.patterns)

    def test_deterministic(self):
        a = generate_fleet(GeneratorConfig(seed=9, mean_length=30, calibration_sequences=20), 20)
        b = generate_fleet(GeneratorConfig(seed=9, mean_length=30, calibration_sequences=20), 20)
        assert a.sequences == b.sequences

    def test_max_events_crops_head(self):
        cfg = GeneratorConfig(seed=2, mean_length=40, calibration_sequences=20, max_events=12)
        f = generate_fleet(cfg, 30)
        assert max(len(s) for s in f.sequences) <= 12
        for s in f.sequences:
            s.validate()

    @pytest.mark.parametrize("kw", [dict(vocab_size=4), dict(motif_len=(2, 4)), dict(max_events=2),
                                    dict(horizon_hours=(10, 5)), dict(zero_dt_prob=1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            GeneratorConfig(**kw)

    def test_vocab_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            build_process(GeneratorConfig(vocab_size=40, n_error_patterns=12))


class TestInjection:
    def test_expected_count_and_monotone(self, rng):
        p, n = 0.1, 40
        seq = random_sequence(rng, n)
        counts = []
        for _ in range(2000):
            out = inject_random_events(seq, p, rng, 40)
            counts.append(int(out.injected.sum()))
            assert np.all(np.diff(out.times) >= 0) and np.all(np.diff(out.mileage) >= 0)
        expected = (n - 1) * p / (1 - p)
        se = np.std(counts) / np.sqrt(len(counts))
        assert abs(np.mean(counts) - expected) < 4 * se

    def test_original_events_preserved_in_order(self, rng):
        seq = random_sequence(rng, 20)
        out = inject_random_events(seq, 0.3, rng, 40)
        orig = [e for e in out.events if not e.injected]
        assert tuple(orig) == seq.events
        assert not out.events[-1].injected or out.events[-1] in seq.events

    def test_injected_inside_their_gap(self, rng):
        seq = random_sequence(rng, 15)
        out = inject_random_events(seq, 0.4, rng, 40)
        prev = None
        for e in out.events:
            if e.injected:
                assert prev is not None
                i = seq.events.index(prev)
                nxt = seq.events[i + 1]
                assert prev.t <= e.t <= nxt.t and prev.m <= e.m <= nxt.m
                assert N_RESERVED <= e.token < 40
            else:
                prev = e

    def test_no_injection_after_last_event(self, rng):
        seq = random_sequence(rng, 5)
        for _ in range(200):
            out = inject_random_events(seq, 0.5, rng, 40)
            assert out.events[-1] == seq.events[-1]

    def test_truncation_and_errors(self, rng):
        seq = random_sequence(rng, 10)
        out = inject_random_events(seq, 0.8, rng, 40, max_len=12)
        assert len(out) <= 12
        assert inject_random_events(seq, 0.0, rng, 40) is seq
        with pytest.raises(ValueError):
            inject_random_events(seq, 1.0, rng, 40)
        with pytest.raises(ValueError):
            inject_random_events(random_sequence(rng, 2), 0.1, rng, 40)


def _labelled(rng, counts):
    seqs = []
    for k, c in enumerate(counts):
        seqs += [random_sequence(rng, 6, labels=(k,), vid=f"k{k}-{i}") for i in range(c)]
    return seqs


class TestResample:
    def test_boundaries(self, rng):
        seqs = _labelled(rng, [2, 5, 30, 80])
        cfg = ResampleConfig(theta1=10, theta2=40, min_count=5, p=0.2)
        out, kept = resample_classes(seqs, cfg, 4, rng, 40)
        assert kept == [1, 2, 3]
        counts = label_counts(out, 3)
        np.testing.assert_array_equal(counts, [10, 30, 40])
        dups = [s for s in out if "#dup" in s.vehicle_id]
        assert len(dups) == 5
        assert all(s.injected.any() for s in dups)

    def test_exact_thresholds_untouched(self, rng):
        seqs = _labelled(rng, [10, 40])
        out, kept = resample_classes(seqs, ResampleConfig(10, 40, 1, 0.1), 2, rng, 40)
        assert len(out) == 50 and kept == [0, 1]

    def test_unlabelled_dropped_and_empty_error(self, rng):
        seqs = _labelled(rng, [3]) + [random_sequence(rng, 5)]
        with pytest.raises(ValueError, match="no labelled"):
            resample_classes(seqs, ResampleConfig(1, 2, 5, 0.1), 1, rng, 40)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ResampleConfig(theta1=10, theta2=5)
        with pytest.raises(ValueError):
            ResampleConfig(min_count=0)


def test_contains_in_order():
    assert _contains_in_order([1, 5, 2, 3], [1, 2, 3])
    assert not _contains_in_order([3, 2, 1], [1, 2, 3])
    assert _contains_in_order([1], [])


def test_event_sequence_equality_after_injection_zero(rng):
    s = EventSequence("x", (Event(4, 0, 0), Event(5, 1, 1), Event(6, 2, 2)))
    assert inject_random_events(s, 0.0, rng, 10) == s
