"""Bag-level cleanup of per-segment predictions.

Segment predictions are noisy around event boundaries. Group the predicted
non-background segments into maximal contiguous runs (bags); when a strict
majority of a bag votes for one class, relabel the whole bag to it.
Background predictions are never touched, probabilities are never touched,
and the pass is idempotent.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PredictionSequence:
    """Hard per-segment labels, optionally with the posteriors they came from."""

    hard: np.ndarray
    probs: np.ndarray | None = None

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "PredictionSequence":
        p = np.asarray(probs, dtype=np.float64)
        return cls(hard=np.argmax(p, axis=1).astype(np.int64), probs=p)


@dataclass(frozen=True)
class Bag:
    """One maximal run of non-background predictions, inclusive bounds."""

    start: int
    end: int
    counts: tuple[tuple[int, int], ...]  # (class, votes), descending votes

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def form_bags(preds: PredictionSequence, background_index: int) -> list[Bag]:
    labels = np.asarray(preds.hard)
    bags: list[Bag] = []
    n = len(labels)
    t = 0
    while t < n:
        if labels[t] == background_index:
            t += 1
            continue
        start = t
        while t < n and labels[t] != background_index:
            t += 1
        votes = Counter(int(c) for c in labels[start:t])
        counts = tuple(sorted(votes.items(), key=lambda kv: (-kv[1], kv[0])))
        bags.append(Bag(start=start, end=t - 1, counts=counts))
    return bags


def witness_rate(bag: Bag) -> tuple[int | None, float]:
    """(dominant class, its vote share); dominant is None on a tie for the top."""
    top_class, top_votes = bag.counts[0]
    rate = top_votes / bag.length
    if len(bag.counts) > 1 and bag.counts[1][1] == top_votes:
        return None, rate
    return top_class, rate


def correct(
    preds: PredictionSequence,
    background_index: int,
    wr_threshold: float = 0.5,
) -> PredictionSequence:
    """Relabel each bag to its dominant class when the vote share exceeds the threshold.

    The comparison is strict, so a 50/50 bag stays untouched at the default
    threshold. Returns a new sequence; posteriors pass through unchanged.
    """
    if not 0 <= wr_threshold <= 1:
        raise ValueError(f"wr_threshold must lie in [0, 1], got {wr_threshold}")
    hard = np.array(preds.hard, copy=True)
    for bag in form_bags(preds, background_index):
        dominant, rate = witness_rate(bag)
        if dominant is not None and rate > wr_threshold:
            hard[bag.start : bag.end + 1] = dominant
    return PredictionSequence(hard=hard, probs=preds.probs)
