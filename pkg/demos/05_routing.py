# coding: utf-8

# # Routing texts to surrogates
#
# Stage 1 learns an embedding where each pool generator owns a few
# prototypes.  Stage 2 adapts it to unseen black-box variants using the
# detector scores as soft targets.  Each held-out text is then scored by
# the surrogate whose prototype is nearest.

import numpy as np

from surroute.harness import (ExperimentConfig, build_suite, kl_agreement, kl_oracle,
                              routed_vs_fixed, routing_distribution, routing_table, score_suite,
                              train_router)
from surroute.router import TrainConfig

suite = build_suite(ExperimentConfig(n_generators=4, samples_per_cell=100, seed=2))
table = score_suite(suite, criteria=["fastdetectgpt"])
cfg = TrainConfig(seed=2)
stage1 = train_router(suite, table, cfg, stage="1")
router = train_router(suite, table, cfg, stage="2", model=stage1)

for h in router.history:
    print(f"stage {h['stage']} epoch {h['epoch']} loss {h['loss']:.4f}")


# ## Where do held-out texts go?

routes = routing_table(suite, router)
for src, counts in routing_distribution(routes, list(suite.blackbox_eval_ids)).items():
    print(src, dict(zip(router.class_ids, counts.tolist())))


# ## Routed vs fixed surrogates

rep = routed_vs_fixed(table, routes, suite.blackbox_eval_ids, "fastdetectgpt")
print(f"routed {rep['routed']:.3f}  best fixed {rep['best_fixed']:.3f} "
      f"({rep['best_fixed_id']})  mean fixed {rep['mean_fixed']:.3f}")


# ## Agreement with the KL-nearest surrogate

agree = kl_agreement(routes, kl_oracle(suite, suite.pool_ids + suite.blackbox_eval_ids))
print("agreement", round(agree["agreement"], 3))
