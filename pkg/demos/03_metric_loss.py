"""The land-shore-sea loss on a worked label track.

A segment track splits into contiguous foreground patches (lands), contiguous
background patches (seas), and the foreground segments sitting at a
foreground/background border (shores). The loss pulls each patch together by
penalizing the distance between its half means, and pushes every shore closer
to its own sea than to the rest of its land, with a hinge margin.
"""

import numpy as np

from avel import losses
from avel.losses import LossWeights, PatchPartition, Shore, Span

BG = 5
labels = np.array([BG, 2, 2, 2, BG, BG, 2, 2, BG, BG])
part = losses.partition_patches(labels, BG)
print("labels:", labels)
print("lands: ", [(s.start, s.end) for s in part.lands])
print("seas:  ", [(s.start, s.end) for s in part.seas])
print("shores:", [(s.index, (s.land.start, s.land.end), (s.sea.start, s.sea.end))
                  for s in part.shores])

# hand-checkable patch case: halves average to 1 and 3, distance 2
feats = np.array([[1.0], [1.0], [3.0], [3.0]])
one_land = PatchPartition(lands=(Span(0, 3),), seas=(), shores=())
print(f"\nland loss on [1,1,3,3]: {losses.land_loss(feats, one_land)}")

# shore sits 1.2 from the land remainder and 0.4 from the sea; with margin
# 0.2 the hinge is 1.2 - 0.4 + 0.2 = 1.0
feats = np.array([[1.2], [0.0], [0.4], [0.4]])
shore_part = PatchPartition(
    lands=(Span(0, 1),), seas=(Span(2, 3),),
    shores=(Shore(1, Span(0, 1), Span(2, 3)),),
)
print(f"shore hinge: {losses.shore_loss(feats, shore_part, margin=0.2)}")

# full objective on random features for the track above
rng = np.random.default_rng(0)
feats = rng.standard_normal((10, 16))
probs = rng.dirichlet(np.ones(6), size=10)
weights = LossWeights(lambda1=1.0, lambda2=0.1, margin=0.2)
value, dprobs, dfeat = losses.sel_objective_grad(probs, labels, feats, weights, BG)
print(f"\ncombined objective: {value:.4f}")
print(f"  cross entropy  {losses.seg_ce_loss(probs, labels):.4f}")
print(f"  land           {losses.land_loss(feats, part):.4f}")
print(f"  sea            {losses.sea_loss(feats, part):.4f}")
print(f"  shore          {losses.shore_loss(feats, part, 0.2):.4f}")

# the analytic feature gradient agrees with central differences
def value_at(f):
    return losses.sel_objective(probs, labels, f, weights, BG)

for idx in [(1, 3), (6, 10), (9, 0)]:
    step = 1e-5
    bumped, dimmed = feats.copy(), feats.copy()
    bumped[idx] += step
    dimmed[idx] -= step
    fd = (value_at(bumped) - value_at(dimmed)) / (2 * step)
    print(f"  d/dfeat{idx}: analytic {dfeat[idx]:+.6f}, finite diff {fd:+.6f}")
