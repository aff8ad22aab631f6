"""AUC-ROC for binary tasks and Harrell's concordance index for hazard tasks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import NoComparablePairs, SingleClass


def auc_roc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present", n_pos=n_pos, n_neg=n_neg)
    ranks = rankdata(scores)  # average ranks give ties half credit
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Concordance:
    index: float
    comparable: int
    concordant: int
    tied_risk: int


def concordance(risks, times, events):
    """Harrell's C. Pair (i, j) is comparable when T_i < T_j and subject i had
    the event; it is concordant when risk_i > risk_j (higher risk, earlier event)."""
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    order = np.argsort(times, kind="stable")
    risks, times, events = risks[order], times[order], events[order]
    comparable = concordant = tied = 0
    m = len(times)
    # subjects sorted by time; for each event, compare against strictly later times
    later_start = np.searchsorted(times, times, side="right")
    for i in np.flatnonzero(events):
        rest = risks[later_start[i]:]
        if rest.size == 0:
            continue
        comparable += rest.size
        concordant += int(np.count_nonzero(risks[i] > rest))
        tied += int(np.count_nonzero(risks[i] == rest))
    if comparable == 0:
        raise NoComparablePairs("no comparable pairs (need an event before some later time)", m=m)
    return Concordance((concordant + 0.5 * tied) / comparable, comparable, concordant, tied)


def c_index(risks, times, events):
    return concordance(risks, times, events).index


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    comparable_pairs: dict = field(default_factory=dict)
    tied_pairs: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metrics": self.metrics,
            "comparable_pairs": self.comparable_pairs,
            "tied_pairs": self.tied_pairs,
            "attention": self.attention,
            "timings": self.timings,
            "scores": self.scores,
        }
