"""Calibration error, adversarial accuracy at a query budget, average queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aaalab.numkit import InvalidInputError


@dataclass(frozen=True)
class EceReport:
    bins: int
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray
    ece: float


def ece(confidences, correct, bins: int = 15) -> EceReport:
    """Expected calibration error with equal-mass bins.

    Samples are sorted by confidence and cut into ``bins`` contiguous groups
    whose sizes differ by at most one (the extra samples go to the
    lowest-confidence bins). The scalar is
    ``sum_m |sum_{B_m} correct - sum_{B_m} conf| / N``.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=bool).astype(np.float64)
    n = conf.size
    if conf.shape != hit.shape or conf.ndim != 1:
        raise InvalidInputError("confidences and correct flags must be equal-length vectors")
    if bins < 1 or n < bins:
        raise InvalidInputError(f"need N >= M >= 1, got N={n}, M={bins}")
    if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
        raise InvalidInputError("confidences must lie in [0, 1]")
    order = np.argsort(conf, kind="stable")
    base, extra = divmod(n, bins)
    sizes = np.full(bins, base)
    sizes[:extra] += 1
    edges = np.concatenate([[0], np.cumsum(sizes)])
    conf_sorted, hit_sorted = conf[order], hit[order]
    conf_sum = np.add.reduceat(conf_sorted, edges[:-1])
    hit_sum = np.add.reduceat(hit_sorted, edges[:-1])
    value = float(np.sum(np.abs(hit_sum - conf_sum)) / n)
    return EceReport(bins, sizes, conf_sum / sizes, hit_sum / sizes, min(max(value, 0.0), 1.0))


def _survival(trace, budget: int) -> bool:
    if not trace.clean_correct:
        return False
    k = trace.first_success
    return k is None or k > budget


def adversarial_accuracy(traces, budget: int) -> float:
    """Share of samples not yet broken after ``budget`` queries.

    A sample counts as broken from the first query whose current best
    candidate the undefended model gets wrong; clean mistakes count as broken
    at every budget.
    """
    if budget < 0:
        raise InvalidInputError("budget must be non-negative")
    traces = list(traces)
    if not traces:
        raise InvalidInputError("no traces given")
    return sum(_survival(t, budget) for t in traces) / len(traces)


def average_queries(traces) -> float:
    """Mean queries spent: first-success index, or the budget for survivors.

    Clean-misclassified samples are never attacked and contribute 0.
    """
    traces = list(traces)
    if not traces:
        raise InvalidInputError("no traces given")
    total = 0
    for t in traces:
        if not t.clean_correct:
            continue
        total += t.first_success if t.first_success is not None else t.budget
    return total / len(traces)
