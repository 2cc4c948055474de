"""Clean up segment predictions by majority vote inside predicted events.

Maximal runs of non-background predictions form bags. When one label holds a
strict majority of a bag (witness rate above the threshold), every segment in
the bag is relabeled to it. Ties and weak majorities leave the bag alone, and
background predictions are never touched, so the operation is idempotent.
"""

import numpy as np

from avel.b2ilc import PredictionSequence, correct, form_bags, witness_rate

BG = 3
preds = np.array([BG, 1, 2, 1, 1, BG, 2, 1, BG, BG])
print("raw predictions:", preds)

seq = PredictionSequence(hard=preds)
for bag in form_bags(seq, BG):
    dominant, rate = witness_rate(bag)
    print(f"  bag [{bag.start},{bag.end}] counts {dict(bag.counts)} "
          f"dominant {dominant} witness rate {rate:.2f}")

fixed = correct(seq, BG, wr_threshold=0.5)
print("corrected:      ", fixed.hard)
again = correct(fixed, BG, wr_threshold=0.5)
print("idempotent:", np.array_equal(fixed.hard, again.hard))

# a simulated noisy predictor: the true label plus a sprinkle of confusions
rng = np.random.default_rng(4)
truth = np.array([BG, BG, 0, 0, 0, 0, 0, 0, BG, BG])
hits_before = hits_after = 0
for _ in range(500):
    noisy = truth.copy()
    inside = np.flatnonzero(truth != BG)
    flip = rng.choice(inside, size=2, replace=False)  # minority of the run
    noisy[flip] = (truth[flip] + 1 + rng.integers(0, BG - 1)) % BG
    cleaned = correct(PredictionSequence(hard=noisy), BG).hard
    hits_before += int((noisy == truth).sum())
    hits_after += int((cleaned == truth).sum())
total = 500 * truth.size
print(f"\nnoisy accuracy {hits_before / total:.3f} "
      f"-> corrected {hits_after / total:.3f} over 500 trials")

# a 50/50 bag has no strict majority, so nothing moves
tied = np.array([1, 1, 2, 2, BG, BG, BG, BG, BG, BG])
print("\ntied bag:", tied, "->", correct(PredictionSequence(hard=tied), BG).hard)
