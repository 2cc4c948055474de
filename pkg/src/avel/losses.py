"""Objectives: segment cross entropy and the patch-contrast regularizer.

The label track of a video splits into maximal constant-label "patches":
foreground runs (lands) and background runs (seas). The regularizer pushes
each patch toward internal homogeneity (the two halves of a patch should
have equal mean features) and sharpens boundaries with a triplet term on the
last foreground segment before a background run (the shore): it should sit
closer to the rest of its land than to the adjacent sea.

All gradient functions return (value, d_value/d_features) pairs with exact
subgradients at the hinge/clamp corners, so finite differences agree off the
corner set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Span:
    """Inclusive index range [start, end] of one constant-label patch."""

    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def indices(self) -> range:
        return range(self.start, self.end + 1)


@dataclass(frozen=True)
class Shore:
    """Boundary foreground segment with its land and the adjacent sea."""

    index: int
    land: Span
    sea: Span


@dataclass(frozen=True)
class PatchPartition:
    lands: tuple[Span, ...]
    seas: tuple[Span, ...]
    shores: tuple[Shore, ...]


def partition_patches(seg_labels: np.ndarray, background_index: int) -> PatchPartition:
    """Partition a label track into lands, seas, and shores.

    Shores are enumerated land by land, left boundary before right. A land
    whose neighbour is another land (different class, no sea in between)
    contributes no shore on that side.
    """
    labels = np.asarray(seg_labels)
    n = len(labels)
    runs: list[tuple[int, int, int]] = []
    start = 0
    for i in range(1, n + 1):
        if i == n or labels[i] != labels[start]:
            runs.append((start, i - 1, int(labels[start])))
            start = i
    lands = [Span(s, e) for s, e, v in runs if v != background_index]
    seas = [Span(s, e) for s, e, v in runs if v == background_index]

    def sea_at(idx: int) -> Span | None:
        for sea in seas:
            if sea.start <= idx <= sea.end:
                return sea
        return None

    shores = []
    for land in lands:
        if land.start > 0:
            sea = sea_at(land.start - 1)
            if sea is not None:
                shores.append(Shore(land.start, land, sea))
        if land.end < n - 1:
            sea = sea_at(land.end + 1)
            if sea is not None:
                shores.append(Shore(land.end, land, sea))
    return PatchPartition(tuple(lands), tuple(seas), tuple(shores))


# ---------------------------------------------------------------------------
# cross entropy


def seg_ce_loss(seg_probs: np.ndarray, seg_labels: np.ndarray) -> float:
    """Mean negative log probability of the true segment classes.

    Probabilities are floored at 1e-12 before the log; a perfect one-hot
    prediction scores 0 and an impossible one stays finite.
    """
    probs = np.asarray(seg_probs, dtype=np.float64)
    labels = np.asarray(seg_labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def seg_ce_loss_grad(
    seg_probs: np.ndarray, seg_labels: np.ndarray
) -> tuple[float, np.ndarray]:
    probs = np.asarray(seg_probs, dtype=np.float64)
    labels = np.asarray(seg_labels)
    n = len(labels)
    picked = probs[np.arange(n), labels]
    loss = float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))
    dprobs = np.zeros_like(probs)
    live = picked > PROB_FLOOR  # below the floor the clamp kills the slope
    dprobs[np.arange(n)[live], labels[live]] = -1.0 / (n * picked[live])
    return loss, dprobs


def video_ce_loss(video_probs: np.ndarray, video_label: int) -> float:
    p = float(np.asarray(video_probs, dtype=np.float64)[video_label])
    return float(-np.log(max(p, PROB_FLOOR)))


def video_ce_loss_grad(
    video_probs: np.ndarray, video_label: int
) -> tuple[float, np.ndarray]:
    probs = np.asarray(video_probs, dtype=np.float64)
    p = float(probs[video_label])
    loss = float(-np.log(max(p, PROB_FLOOR)))
    dprobs = np.zeros_like(probs)
    if p > PROB_FLOOR:
        dprobs[video_label] = -1.0 / p
    return loss, dprobs


# ---------------------------------------------------------------------------
# patch-contrast terms


def _half_split(
    features: np.ndarray, spans: tuple[Span, ...]
) -> tuple[float, np.ndarray]:
    """Mean over eligible patches of || mean(first half) - mean(second half) ||.

    The first half takes floor(length/2) segments. Length-1 patches carry no
    split and are skipped (and excluded from the averaging count).
    """
    eligible = [s for s in spans if s.length >= 2]
    dfeat = np.zeros_like(features)
    if not eligible:
        return 0.0, dfeat
    total = 0.0
    for span in eligible:
        half = span.length // 2
        first = features[span.start : span.start + half]
        second = features[span.start + half : span.end + 1]
        delta = first.mean(axis=0) - second.mean(axis=0)
        norm = float(np.linalg.norm(delta))
        total += norm
        if norm > 0:
            unit = delta / norm
            dfeat[span.start : span.start + half] += unit / (half * len(eligible))
            dfeat[span.start + half : span.end + 1] -= unit / (
                (span.length - half) * len(eligible)
            )
    return total / len(eligible), dfeat


def land_loss(features: np.ndarray, partition: PatchPartition) -> float:
    return _half_split(np.asarray(features, np.float64), partition.lands)[0]


def land_loss_grad(
    features: np.ndarray, partition: PatchPartition
) -> tuple[float, np.ndarray]:
    return _half_split(np.asarray(features, np.float64), partition.lands)


def sea_loss(features: np.ndarray, partition: PatchPartition) -> float:
    return _half_split(np.asarray(features, np.float64), partition.seas)[0]


def sea_loss_grad(
    features: np.ndarray, partition: PatchPartition
) -> tuple[float, np.ndarray]:
    return _half_split(np.asarray(features, np.float64), partition.seas)


def shore_loss(
    features: np.ndarray, partition: PatchPartition, margin: float = 0.2
) -> float:
    return shore_loss_grad(features, partition, margin)[0]


def shore_loss_grad(
    features: np.ndarray, partition: PatchPartition, margin: float = 0.2
) -> tuple[float, np.ndarray]:
    """Triplet hinge: shore near its land's remainder, far from the sea.

    Per eligible shore, [ ||f_sh - mean(land minus shore)|| -
    ||f_sh - mean(sea)|| + margin ]_+ averaged over shores. Shores on
    length-1 lands have no remainder and are skipped.
    """
    feats = np.asarray(features, dtype=np.float64)
    dfeat = np.zeros_like(feats)
    eligible = [sh for sh in partition.shores if sh.land.length >= 2]
    if not eligible:
        return 0.0, dfeat
    total = 0.0
    for sh in eligible:
        anchor = feats[sh.index]
        land_rows = [i for i in sh.land.indices() if i != sh.index]
        sea_rows = list(sh.sea.indices())
        land_mean = feats[land_rows].mean(axis=0)
        sea_mean = feats[sea_rows].mean(axis=0)
        d_land = anchor - land_mean
        d_sea = anchor - sea_mean
        n_land = float(np.linalg.norm(d_land))
        n_sea = float(np.linalg.norm(d_sea))
        value = n_land - n_sea + margin
        if value <= 0:
            continue
        total += value
        scale = 1.0 / len(eligible)
        if n_land > 0:
            u = d_land / n_land
            dfeat[sh.index] += scale * u
            for i in land_rows:
                dfeat[i] -= scale * u / len(land_rows)
        if n_sea > 0:
            v = d_sea / n_sea
            dfeat[sh.index] -= scale * v
            for i in sea_rows:
                dfeat[i] += scale * v / len(sea_rows)
    return total / len(eligible), dfeat


def lss_loss(
    features: np.ndarray, partition: PatchPartition, margin: float = 0.2
) -> float:
    return lss_loss_grad(features, partition, margin)[0]


def lss_loss_grad(
    features: np.ndarray, partition: PatchPartition, margin: float = 0.2
) -> tuple[float, np.ndarray]:
    l, dl = land_loss_grad(features, partition)
    s, ds = sea_loss_grad(features, partition)
    sh, dsh = shore_loss_grad(features, partition, margin)
    return l + s + sh, dl + ds + dsh


# ---------------------------------------------------------------------------
# combined objectives


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    margin: float = 0.2

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "margin"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def sel_objective(
    seg_probs: np.ndarray,
    seg_labels: np.ndarray,
    features: np.ndarray,
    weights: LossWeights,
    background_index: int,
) -> float:
    """lambda1 * segment CE + lambda2 * patch-contrast on the fused features."""
    partition = partition_patches(seg_labels, background_index)
    return weights.lambda1 * seg_ce_loss(seg_probs, seg_labels) + weights.lambda2 * lss_loss(
        features, partition, weights.margin
    )


def sel_objective_grad(
    seg_probs: np.ndarray,
    seg_labels: np.ndarray,
    features: np.ndarray,
    weights: LossWeights,
    background_index: int,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Returns (value, d/d seg_probs, d/d features)."""
    partition = partition_patches(seg_labels, background_index)
    ce, dprobs = seg_ce_loss_grad(seg_probs, seg_labels)
    reg, dfeat = lss_loss_grad(features, partition, weights.margin)
    value = weights.lambda1 * ce + weights.lambda2 * reg
    return value, weights.lambda1 * dprobs, weights.lambda2 * dfeat


def wsel_objective(video_probs: np.ndarray, video_label: int) -> float:
    """Video-level CE on the pooled posterior (weak supervision)."""
    return video_ce_loss(video_probs, video_label)


def wsel_objective_grad(
    video_probs: np.ndarray, video_label: int
) -> tuple[float, np.ndarray]:
    return video_ce_loss_grad(video_probs, video_label)
