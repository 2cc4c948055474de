"""Stitch new training videos out of clips from existing ones.

Every video is scanned for eight clip shapes keyed to event phases: pure
background (1 or 2 segments), an event start (first segment, or background
then first), continuation (inside segments), and an end (last segment, or
last then background). A state machine then samples label-legal sequences of
those shapes that add up to exactly 10 segments, and each slot is filled with
a stored clip of the same class.
"""

import collections

import numpy as np

from avel.avedata import SynthConfig, synth_dataset, validate_record
from avel.smbfuse import (
    State,
    augment_dataset,
    build_databases,
    extract_states,
    fuse_video,
    generate_state_sequence,
)

ds = synth_dataset(SynthConfig(classes=4, videos_per_class=6, seed=7))
rec = next(r for r in ds.records if r.video_label == 1)
print(f"video {rec.id}, labels {rec.seg_labels}")
for clip in extract_states(rec, ds.background_index):
    print(f"  {clip.state.value:<10} segments {clip.seg_range}")

dbs = build_databases(ds, event_class=1)
print("\nclip pool for class 1:")
for state in State:
    print(f"  {state.value:<10} {len(dbs[state])} clips")

# admissible walks: start at a start-or-background state, end at an end
# state, keep each transition legal, and spend exactly the 10-segment budget
rng = np.random.default_rng(0)
counter = collections.Counter()
for _ in range(2000):
    seq = generate_state_sequence(10, set(State), rng)
    counter[len(seq.states)] += 1
print("\nwalk lengths over 2000 samples:", dict(sorted(counter.items())))

seq = generate_state_sequence(10, set(State), rng, event_class=1)
print("one walk:", " -> ".join(s.value for s in seq.states))

fused, provenance = fuse_video(seq, dbs, rng, "fused_000", ds.background_index)
print(f"\nfused video labels: {fused.seg_labels}")
print("slot provenance:")
for slot in provenance:
    print(f"  {slot.state.value:<10} from {slot.source_video} segments {slot.seg_range}")
print("valid record:", validate_record(fused, ds.num_classes) == [])

# the convenience wrapper does this per foreground class with its own
# random stream, so classes do not perturb each other
result = augment_dataset(ds, samples_per_class=5, seed=1)
print(f"\naugmented corpus: {len(result.dataset)} new videos "
      f"({sorted({r.video_label for r in result.dataset.records})} classes)")
