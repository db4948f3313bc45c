# coding: utf-8

# # Source/surrogate affinity
#
# Build a small synthetic suite and tabulate AUROC for every source x
# surrogate pair.  The diagonal (surrogate = source) dominates.

import numpy as np

from surroute.harness import (ExperimentConfig, affinity_matrix, build_suite,
                              matched_cross_summary, score_suite)

config = ExperimentConfig(n_generators=4, samples_per_cell=150, stage1_per_class=60,
                          stage2_per_source=60, eval_per_source=60, seed=1)
suite = build_suite(config)
table = score_suite(suite, criteria=["likelihood", "logrank", "fastdetectgpt"])

np.set_printoptions(precision=3, suppress=True)
for crit in ("likelihood", "fastdetectgpt"):
    M = affinity_matrix(table, crit, suite.pool_ids, suite.pool_ids)
    print(crit)
    print(M.values)


# ## Matched vs cross

mats = [affinity_matrix(table, c, suite.pool_ids, suite.pool_ids)
        for c in ("likelihood", "logrank", "fastdetectgpt")]
for row in matched_cross_summary(mats):
    print(f"{row['criterion']:14s} matched {row['matched']:.3f} cross {row['cross']:.3f} "
          f"gap {row['gap']:.3f}")
