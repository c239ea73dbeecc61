"""Error-detection statistics over per-trial confidence records."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .agent import ConfidenceRecord
from .errors import RejectedInputError

N_PROB_BINS = 10


@dataclass(frozen=True)
class TrialOutcome:
    record: ConfidenceRecord
    policy_prob: float
    correct: bool

    @property
    def detected(self) -> bool:
        return self.record.confidence < 0


@dataclass(frozen=True)
class ConfusionStats:
    """Counts over {detected, not detected} x {incorrect, correct}.

    Stored as counts so partial results from separate workers add exactly.
    """

    det_inc: int = 0
    det_cor: int = 0
    nodet_inc: int = 0
    nodet_cor: int = 0

    @property
    def n(self) -> int:
        return self.det_inc + self.det_cor + self.nodet_inc + self.nodet_cor

    @property
    def frequencies(self) -> tuple[float, float, float, float]:
        """Joint frequencies in the order (det&inc, det&cor, nodet&inc, nodet&cor)."""
        n = self.n
        if n == 0:
            return (0.0, 0.0, 0.0, 0.0)
        return (self.det_inc / n, self.det_cor / n, self.nodet_inc / n, self.nodet_cor / n)

    def __add__(self, other: "ConfusionStats") -> "ConfusionStats":
        return ConfusionStats(self.det_inc + other.det_inc, self.det_cor + other.det_cor,
                              self.nodet_inc + other.nodet_inc, self.nodet_cor + other.nodet_cor)


def accumulate_arrays(detected, correct) -> ConfusionStats:
    detected = np.asarray(detected, dtype=bool)
    correct = np.asarray(correct, dtype=bool)
    if detected.shape != correct.shape:
        raise RejectedInputError("detected and correct must align")
    return ConfusionStats(int(np.sum(detected & ~correct)), int(np.sum(detected & correct)),
                          int(np.sum(~detected & ~correct)), int(np.sum(~detected & correct)))


def accumulate(outcomes: Iterable[TrialOutcome]) -> ConfusionStats:
    outcomes = list(outcomes)
    return accumulate_arrays([o.detected for o in outcomes], [o.correct for o in outcomes])


@dataclass(frozen=True)
class DetectionReport:
    """Rates are ``None`` when their denominator is zero."""

    precision: float | None
    recall: float | None
    accuracy: float | None
    base_error_rate: float | None
    better_than_chance: bool | None
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def detection_report(stats: ConfusionStats) -> DetectionReport:
    n = stats.n
    detected = stats.det_inc + stats.det_cor
    incorrect = stats.det_inc + stats.nodet_inc
    precision = _ratio(stats.det_inc, detected)
    base = _ratio(incorrect, n)
    better = None if precision is None or base is None else precision > base
    return DetectionReport(precision, _ratio(stats.det_inc, incorrect),
                           _ratio(stats.det_cor + stats.nodet_cor, n), base, better, n)


@dataclass(frozen=True)
class ProbabilityBin:
    low: float
    high: float
    detected: int
    total: int


def detection_by_policy_probability_arrays(probs, detected, n_bins: int = N_PROB_BINS) -> list[ProbabilityBin]:
    probs = np.asarray(probs, dtype=np.float64)
    detected = np.asarray(detected, dtype=bool)
    # probability 1.0 lands in the last bin
    idx = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    out = []
    for k in range(n_bins):
        in_bin = idx == k
        out.append(ProbabilityBin(k / n_bins, (k + 1) / n_bins,
                                  int(np.sum(detected & in_bin)), int(np.sum(in_bin))))
    return out


def detection_by_policy_probability(outcomes: Iterable[TrialOutcome], n_bins: int = N_PROB_BINS):
    """Detected-error counts and totals binned by the chosen action's policy probability."""
    outcomes = list(outcomes)
    return detection_by_policy_probability_arrays(
        [o.policy_prob for o in outcomes], [o.detected for o in outcomes], n_bins)


def confidence_histogram(confidence, correct, edges) -> list[tuple[float, float, int, int]]:
    """Rows ``(low, high, n_correct, n_incorrect)`` of confidence counts split by correctness."""
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    edges = np.asarray(edges, dtype=np.float64)
    hc, _ = np.histogram(confidence[correct], bins=edges)
    hi, _ = np.histogram(confidence[~correct], bins=edges)
    return [(float(edges[k]), float(edges[k + 1]), int(hc[k]), int(hi[k])) for k in range(len(edges) - 1)]


def empirical_dprime(signal, noise) -> float:
    """(mean_s - mean_n) / sqrt(0.5 (var_s + var_n)) from sample moments."""
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if signal.size < 2 or noise.size < 2:
        raise RejectedInputError("need at least two samples per class")
    pooled = 0.5 * (np.var(signal, ddof=1) + np.var(noise, ddof=1))
    if pooled <= 0:
        raise RejectedInputError("pooled variance is zero; d' undefined")
    return float((signal.mean() - noise.mean()) / math.sqrt(pooled))
