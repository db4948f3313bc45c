# coding: utf-8

# # The mismatch bound
#
# For a statistic bounded by B, the difference between its mean under the
# source and under a surrogate is at most 2 B TV, which is at most
# B sqrt(2 KL).  Here both sides are computed exactly by enumeration.

import math

import numpy as np

from surroute.bound import (detector_statistic, empirical_gaps, finite_sample_bound,
                            kl_categorical, mismatch_gap, pinsker_check, tv_distance)
from surroute.textmodel import MarkovModel, Vocabulary

p, q = [0.5, 0.5], [0.9, 0.1]
print("TV", tv_distance(p, q), " KL", round(kl_categorical(p, q), 4),
      " Pinsker holds:", pinsker_check(p, q))


# ## Sequences
#
# Two order-0 coins, length-4 sequences, clipped likelihood statistic.

vocab = Vocabulary(("h", "t"))
src = MarkovModel(vocab, 0, 1e-12, {(): np.array(p) * 1e12})
sur = MarkovModel(vocab, 0, 1e-12, {(): np.array(q) * 1e12})
T = detector_statistic(sur, "likelihood", B=1.0, scale=math.log(10))
rep = mismatch_gap(T, src, sur, horizon=4)
print(f"gap {rep.gap:.4f} <= 2B*TV {rep.tv_bound:.4f} <= B*sqrt(2KL) {rep.bound:.4f}")


# ## Finite samples
#
# With n samples from each side the empirical gap stays under the bound
# plus a Hoeffding term.

values = np.array([1.0, -1.0])
rng = np.random.default_rng(0)
for n in (100, 1000, 10000):
    g = empirical_gaps(values, p, q, n, 200, rng)
    b = finite_sample_bound(1.0, kl_categorical(p, q), n, 0.05)
    print(f"n={n:6d} max gap {g.max():.3f} bound {b:.3f} exceed {int((g > b).sum())}/200")
