"""Clip-level data augmentation via a segment-label state machine.

Every video's label track is a word over {foreground, background}. Each
one- or two-segment window that matches one of eight context patterns (pure
background, event start, event continuation, event end; one- and two-segment
variants) is harvested as a reusable clip. New videos are fused by sampling
a path through the transition relation below until exactly N segments are
emitted, then drawing a random stored clip for each state. Fusion never
crosses classes and never fabricates background videos.

States and their label patterns ([] marks the harvested span, context shown
around it):

    BG_1        [BG]
    BG_2        [BG BG]
    START_1     [FG] at position 0
    START_2     [BG FG]
    CONTINUE_1  FG [FG] FG
    CONTINUE_2  FG [FG FG] FG
    END_1       [FG] at position N-1
    END_2       [FG BG]

A sequence starts with START_1, BG_1, BG_2 or START_2; background states
chain among themselves or hand over to START_2; once an event is open only
continuation or an end state may follow; END_2 may re-enter background (or
stop), END_1 only stops. Candidate moves are filtered so the remaining
budget is always completable, which makes generation total: any available
state set either yields a sequence or fails up front.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .avedata import Dataset, VideoRecord

logger = logging.getLogger(__name__)


class SmbError(ValueError):
    """Raised when no valid sequence or clip exists for a request."""


class State(Enum):
    BG_1 = "BG_1"
    BG_2 = "BG_2"
    START_1 = "START_1"
    START_2 = "START_2"
    CONTINUE_1 = "CONTINUE_1"
    CONTINUE_2 = "CONTINUE_2"
    END_1 = "END_1"
    END_2 = "END_2"

    @property
    def pattern(self) -> tuple[bool, ...]:
        """Foreground flags of the harvested segments."""
        return _PATTERNS[self]

    @property
    def length(self) -> int:
        return len(_PATTERNS[self])


_PATTERNS: dict[State, tuple[bool, ...]] = {
    State.BG_1: (False,),
    State.BG_2: (False, False),
    State.START_1: (True,),
    State.START_2: (False, True),
    State.CONTINUE_1: (True,),
    State.CONTINUE_2: (True, True),
    State.END_1: (True,),
    State.END_2: (True, False),
}

INITIAL_STATES: tuple[State, ...] = (
    State.START_1,
    State.BG_1,
    State.BG_2,
    State.START_2,
)

_IN_EVENT = (State.CONTINUE_1, State.CONTINUE_2, State.END_1, State.END_2)

TRANSITIONS: dict[State, tuple[State, ...]] = {
    State.BG_1: (State.BG_1, State.BG_2, State.START_2),
    State.BG_2: (State.BG_1, State.BG_2, State.START_2),
    State.START_1: _IN_EVENT,
    State.START_2: _IN_EVENT,
    State.CONTINUE_1: _IN_EVENT,
    State.CONTINUE_2: _IN_EVENT,
    State.END_1: (),
    State.END_2: (State.BG_1, State.BG_2, State.START_2),
}

# states at which a sequence may stop
TERMINAL_STATES: frozenset[State] = frozenset({State.END_1, State.END_2})


@dataclass(frozen=True)
class StateSequence:
    states: tuple[State, ...]
    event_class: int | None = None

    @property
    def total_segments(self) -> int:
        return sum(s.length for s in self.states)

    def label_pattern(self) -> tuple[bool, ...]:
        flags: list[bool] = []
        for s in self.states:
            flags.extend(s.pattern)
        return tuple(flags)


@dataclass(frozen=True)
class StateClip:
    """Harvested segments plus where they came from."""

    state: State
    source_video: str
    seg_range: tuple[int, int]  # inclusive
    audio: np.ndarray
    visual: np.ndarray


@dataclass(frozen=True)
class SlotProvenance:
    state: State
    source_video: str
    seg_range: tuple[int, int]


# ---------------------------------------------------------------------------
# harvesting


def extract_states(record: VideoRecord, background_index: int) -> list[StateClip]:
    """All pattern occurrences in one video, overlapping windows included.

    A two-segment event yields START and END clips but no CONTINUE; a pure
    background video yields only BG clips.
    """
    fg = np.asarray(record.seg_labels) != background_index
    n = len(fg)
    clips: list[StateClip] = []

    def take(state: State, start: int, end: int) -> None:
        clips.append(
            StateClip(
                state=state,
                source_video=record.id,
                seg_range=(start, end),
                audio=np.array(record.audio[start : end + 1], copy=True),
                visual=np.array(record.visual[start : end + 1], copy=True),
            )
        )

    for t in range(n):
        if not fg[t]:
            take(State.BG_1, t, t)
            if t + 1 < n and not fg[t + 1]:
                take(State.BG_2, t, t + 1)
        else:
            if t == 0:
                take(State.START_1, t, t)
            if t > 0 and not fg[t - 1]:
                take(State.START_2, t - 1, t)
            if 0 < t < n - 1 and fg[t - 1] and fg[t + 1]:
                take(State.CONTINUE_1, t, t)
            if 0 < t and t + 2 < n and fg[t - 1] and fg[t + 1] and fg[t + 2]:
                take(State.CONTINUE_2, t, t + 1)
            if t == n - 1:
                take(State.END_1, t, t)
            if t + 1 < n and not fg[t + 1]:
                take(State.END_2, t, t + 1)
    return clips


def build_databases(dataset: Dataset, event_class: int) -> dict[State, list[StateClip]]:
    """Pool the clips of every video labelled ``event_class``."""
    dbs: dict[State, list[StateClip]] = {state: [] for state in State}
    for rec in dataset.records:
        if rec.video_label != event_class:
            continue
        for clip in extract_states(rec, dataset.background_index):
            dbs[clip.state].append(clip)
    return dbs


# ---------------------------------------------------------------------------
# sequence generation


def generate_state_sequence(
    n: int,
    available: set[State] | frozenset[State],
    rng: np.random.Generator,
    event_class: int | None = None,
) -> StateSequence:
    """Sample a uniform random admissible walk emitting exactly ``n`` segments.

    Only states in ``available`` are used. Every prefix is extended uniformly
    among the moves that keep the remaining budget completable, so the walk
    never dead-ends. Raises SmbError when no admissible sequence exists at
    all (e.g. no end state is available).
    """
    avail = frozenset(available)
    memo: dict[tuple[State, int], bool] = {}

    def completable(state: State, remaining: int) -> bool:
        key = (state, remaining)
        if key not in memo:
            if remaining == 0:
                memo[key] = state in TERMINAL_STATES
            else:
                memo[key] = any(
                    nxt in avail and nxt.length <= remaining and completable(nxt, remaining - nxt.length)
                    for nxt in TRANSITIONS[state]
                )
        return memo[key]

    starts = [
        s
        for s in INITIAL_STATES
        if s in avail and s.length <= n and completable(s, n - s.length)
    ]
    if not starts:
        names = sorted(s.value for s in avail)
        raise SmbError(f"no admissible length-{n} sequence from states {names}")
    current = starts[int(rng.integers(len(starts)))]
    states = [current]
    remaining = n - current.length
    while remaining > 0:
        moves = [
            s
            for s in TRANSITIONS[current]
            if s in avail and s.length <= remaining and completable(s, remaining - s.length)
        ]
        if not moves:  # unreachable by construction; guard anyway
            raise SmbError(f"dead end after {[s.value for s in states]}")
        current = moves[int(rng.integers(len(moves)))]
        states.append(current)
        remaining -= current.length
    return StateSequence(tuple(states), event_class)


# ---------------------------------------------------------------------------
# fusion


def fuse_video(
    seq: StateSequence,
    databases: dict[State, list[StateClip]],
    rng: np.random.Generator,
    new_id: str,
    background_index: int,
) -> tuple[VideoRecord, list[SlotProvenance]]:
    """Materialize a sequence by drawing one stored clip per slot (with replacement).

    Segment labels follow the slot patterns: foreground flags become the
    sequence's event class, the rest background. Features are copied verbatim
    from the source videos, so provenance is byte-exact.
    """
    if seq.event_class is None:
        raise SmbError("sequence carries no event class")
    clips: list[StateClip] = []
    for state in seq.states:
        pool = databases.get(state, [])
        if not pool:
            raise SmbError(f"no stored clips for state {state.value}")
        clips.append(pool[int(rng.integers(len(pool)))])
    audio = np.concatenate([c.audio for c in clips], axis=0)
    visual = np.concatenate([c.visual for c in clips], axis=0)
    flags = seq.label_pattern()
    labels = np.where(flags, seq.event_class, background_index).astype(np.int64)
    record = VideoRecord(
        id=new_id,
        audio=audio,
        visual=visual,
        seg_labels=labels,
        video_label=int(seq.event_class),
    )
    provenance = [
        SlotProvenance(c.state, c.source_video, c.seg_range) for c in clips
    ]
    return record, provenance


@dataclass(frozen=True)
class AugmentResult:
    dataset: Dataset
    provenance: dict[str, list[SlotProvenance]]


def augment_dataset(
    train: Dataset, samples_per_class: int, seed: int
) -> AugmentResult:
    """Fuse ``samples_per_class`` new videos for every foreground class present.

    The background class is never augmented. Each class draws from its own
    child RNG stream (indexed by class id), so adding or removing a class
    does not disturb the others. A class whose clip pools cannot complete any
    sequence is skipped with a warning.
    """
    if samples_per_class < 0:
        raise SmbError(f"samples_per_class must be non-negative, got {samples_per_class}")
    background = train.background_index
    present = sorted({r.video_label for r in train.records if r.video_label != background})
    segments = train.records[0].segments if train.records else 0
    streams = np.random.SeedSequence(seed).spawn(train.num_classes)
    records: list[VideoRecord] = []
    provenance: dict[str, list[SlotProvenance]] = {}
    for cls in present:
        databases = build_databases(train, cls)
        available = frozenset(s for s, pool in databases.items() if pool)
        rng = np.random.default_rng(streams[cls])
        try:
            for i in range(samples_per_class):
                seq = generate_state_sequence(segments, available, rng, event_class=cls)
                rec, prov = fuse_video(
                    seq, databases, rng, f"fused_{cls:02d}_{i:04d}", background
                )
                records.append(rec)
                provenance[rec.id] = prov
        except SmbError as exc:
            logger.warning("class %d cannot be augmented, skipping: %s", cls, exc)
            records = [r for r in records if r.video_label != cls]
            provenance = {k: v for k, v in provenance.items() if not k.startswith(f"fused_{cls:02d}_")}
            continue
    fused = Dataset(records=tuple(records), class_names=train.class_names, split=train.split)
    return AugmentResult(dataset=fused, provenance=provenance)
