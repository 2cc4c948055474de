"""Walk through the temporal encoder/decoder one stage at a time.

Three branches (audio, visual, joint) each run a stack of valid 1-d
convolutions that shrink the track by k-1 segments per layer, then mirrored
transpose convolutions grow it back, re-adding the stored encoder levels on
the way up. A sigmoid gate blends the audio and visual reconstructions.
"""

import dataclasses

import numpy as np

from avel import edrnet
from avel.avedata import SynthConfig, synth_dataset
from avel.edrnet import EdrConfig

# admissible depth is bounded: the innermost track must keep at least one
# row but fewer than k (otherwise one more layer would still fit)
print("deepest stack for a 10-segment video:")
for k in range(2, 6):
    print(f"  kernel {k}: {edrnet.max_layers(k, 10)} layers")

cfg = EdrConfig(k=3, layers=4, width=16, segments=10, classes=6,
                audio_dim=8, visual_dim=16, spatial_size=4, seed=0)
params = edrnet.init_params(cfg)
print(f"\nparameters: {edrnet.count_parameters(cfg)} floats in {len(params)} arrays")
for branch in ("A", "V", "AV"):
    print(f"  {branch} encoder stack: {edrnet.decomposition_param_count(cfg, branch)}")

ds = synth_dataset(SynthConfig(classes=6, videos_per_class=1, seed=1))
rec = ds.records[0]
acts = edrnet.forward(rec, cfg, params)

print(f"\nencoder lengths (video {rec.id}):")
for branch, levels in acts.dec.items():
    print(f"  {branch}: {[x.shape[0] for x in levels]}")
print("decoder lengths:")
for branch, levels in acts.rec.items():
    print(f"  {branch}: {[x.shape[0] for x in levels]}")

print(f"\ngate range: [{acts.gate.min():.3f}, {acts.gate.max():.3f}]")
print(f"fused features: {acts.features.shape}")
print(f"segment probabilities: {acts.seg_probs.shape}, rows sum to "
      f"{acts.seg_probs.sum(axis=1).mean():.6f}")
print(f"video probabilities (mean pooled): {np.round(acts.video_probs, 3)}")

# the positional table interleaves sine and cosine columns over a geometric
# frequency ladder; zeroing it reproduces the positional-off network exactly
pe = edrnet.positional_encoding(10, 8)
print(f"\npositional table 10x8, first row: {np.round(pe[0], 4)}")
off = edrnet.forward(rec, dataclasses.replace(cfg, positional=False), params)
print(f"positional flag changes logits: {not np.array_equal(acts.logits, off.logits)}")
