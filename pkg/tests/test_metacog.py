import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacritic.agent import ConfidenceRecord
from metacritic.errors import RejectedInputError
from metacritic.metacog import (ConfusionStats, TrialOutcome, accumulate, accumulate_arrays, confidence_histogram,
                                detection_by_policy_probability, detection_by_policy_probability_arrays,
                                detection_report, empirical_dprime)


def outcome(confidence, correct, prob=0.5):
    return TrialOutcome(ConfidenceRecord.from_values(0.0, confidence), prob, correct)


def test_detected_iff_negative_confidence():
    assert outcome(-1e-12, True).detected
    assert not outcome(0.0, True).detected


def test_all_correct_none_detected():
    stats = accumulate([outcome(1.0, True)] * 5)
    assert stats.frequencies == (0.0, 0.0, 0.0, 1.0)
    rep = detection_report(stats)
    assert rep.precision is None and rep.recall is None and rep.better_than_chance is None
    assert rep.accuracy == 1.0 and rep.base_error_rate == 0.0


def test_single_detected_error():
    stats = accumulate([outcome(-0.3, False)])
    assert stats.frequencies[0] == 1.0 and stats.n == 1


def test_precision_from_stated_joint_frequencies():
    # counts proportional to joint frequencies 0.15 and 0.092
    rep = detection_report(ConfusionStats(det_inc=1500, det_cor=920, nodet_inc=1600, nodet_cor=5980))
    assert rep.precision == pytest.approx(0.15 / (0.15 + 0.092))
    assert rep.precision == pytest.approx(0.6198, abs=1e-4)


def test_perfect_and_flag_everything_detectors():
    rng = np.random.default_rng(0)
    correct = rng.random(1000) < 0.7
    perfect = detection_report(accumulate_arrays(~correct, correct))
    assert perfect.precision == 1.0 and perfect.recall == 1.0
    flag_all = detection_report(accumulate_arrays(np.ones(1000, bool), correct))
    assert flag_all.precision == pytest.approx(flag_all.base_error_rate) and flag_all.recall == 1.0


def test_report_matches_raw_recount():
    rng = np.random.default_rng(1)
    det, cor = rng.random(500) < 0.3, rng.random(500) < 0.6
    rep = detection_report(accumulate_arrays(det, cor))
    assert rep.precision == np.sum(det & ~cor) / np.sum(det)
    assert rep.recall == np.sum(det & ~cor) / np.sum(~cor)
    assert rep.base_error_rate == np.mean(~cor)


def test_chance_floor_for_random_detector():
    rng = np.random.default_rng(2)
    n = 100_000
    rep = detection_report(accumulate_arrays(rng.random(n) < 0.2, rng.random(n) < 0.69))
    assert abs(rep.precision - rep.base_error_rate) < 3 / math.sqrt(n)


def test_synthetic_joint_rates_recovered():
    rng = np.random.default_rng(3)
    n = 200_000
    probs = np.array([0.15, 0.092, 0.3, 1 - 0.15 - 0.092 - 0.3])
    cell = rng.choice(4, size=n, p=probs)
    det = cell < 2
    cor = (cell == 1) | (cell == 3)
    freqs = accumulate_arrays(det, cor).frequencies
    assert sum(freqs) == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.abs(np.array(freqs) - probs) < 1 / math.sqrt(n))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60), st.randoms())
def test_accumulate_is_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = accumulate_arrays(*zip(*pairs))
    assert a == accumulate_arrays(*zip(*shuffled))
    assert detection_report(a) == detection_report(accumulate_arrays(*zip(*pairs)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=3, max_size=60), st.data())
def test_merge_is_associative_and_matches_whole(pairs, data):
    i = data.draw(st.integers(0, len(pairs)))
    j = data.draw(st.integers(i, len(pairs)))
    parts = [accumulate_arrays(*zip(*p)) if p else ConfusionStats() for p in (pairs[:i], pairs[i:j], pairs[j:])]
    whole = accumulate_arrays(*zip(*pairs))
    assert (parts[0] + parts[1]) + parts[2] == parts[0] + (parts[1] + parts[2]) == whole
    assert parts[2] + parts[0] + parts[1] == whole


def test_misaligned_arrays_rejected():
    with pytest.raises(RejectedInputError):
        accumulate_arrays([True], [True, False])


def test_probability_bins_edge_cases():
    bins = detection_by_policy_probability([outcome(-1.0, False, 1.0)] * 3)
    assert len(bins) == 10 and bins[-1].total == 3 and bins[-1].detected == 3
    assert sum(b.total for b in bins[:-1]) == 0
    assert all(b.total == 0 and b.detected == 0 for b in detection_by_policy_probability([]))
    assert bins[0].low == 0.0 and bins[-1].high == 1.0


def test_probability_bins_match_brute_force_tally():
    rng = np.random.default_rng(4)
    probs, det = rng.random(2000), rng.random(2000) < 0.4
    bins = detection_by_policy_probability_arrays(probs, det)
    for k, b in enumerate(bins):
        in_bin = [(p, d) for p, d in zip(probs, det) if k / 10 <= p < (k + 1) / 10]
        assert b.total == len(in_bin) and b.detected == sum(d for _, d in in_bin)


def test_confidence_histogram_splits_by_correctness():
    rows = confidence_histogram([-0.5, -0.1, 0.2, 0.7], [False, True, True, False], [-1.0, 0.0, 1.0])
    assert rows == [(-1.0, 0.0, 1, 1), (0.0, 1.0, 1, 1)]


def test_empirical_dprime_examples():
    base = np.array([-1.0, 0.0, 1.0])
    assert empirical_dprime(base + 1, base) == pytest.approx(1.0)
    assert empirical_dprime(base, base) == 0.0
    rng = np.random.default_rng(5)
    assert empirical_dprime(rng.normal(1, 1, 1_000_000), rng.normal(0, 1, 1_000_000)) == pytest.approx(1.0, abs=0.01)


def test_empirical_dprime_degenerate():
    with pytest.raises(RejectedInputError):
        empirical_dprime([1.0, 1.0], [0.0, 0.0])
    with pytest.raises(RejectedInputError):
        empirical_dprime([1.0], [0.0, 1.0])
