# coding: utf-8

# # Markov text models
#
# Train a small character model, sample from it, and compare two models
# by their per-token KL rate.

import numpy as np

from surroute.textmodel import (Vocabulary, detokenize, exact_kl, kl_rate, sample,
                                sequence_log_probs, tokenize, train_from_corpus)

vocab = Vocabulary.characters()
text = "the cat sat on the mat and the dog sat on the log " * 20
other = "a quick brown fox jumps over the lazy dog while birds sing " * 20

m1 = train_from_corpus([tokenize(text, vocab)], vocab, order=2, alpha=0.1, model_id="cats")
m2 = train_from_corpus([tokenize(other, vocab)], vocab, order=2, alpha=0.1, model_id="foxes")


# ## Sampling
#
# Nucleus sampling with the default top_p of 0.96.  The prompt is not
# repeated in the output.

prompt = tokenize("the ", vocab)
for seed in range(3):
    cont = sample(m1, prompt, length=40, seed=seed)
    print(repr("the " + detokenize(cont, vocab)))


# ## Log-probabilities
#
# Each model finds its own style more likely.

probe = tokenize("the cat sat on the log", vocab)
for m in (m1, m2):
    lp, _ = sequence_log_probs(m, probe)
    print(m.model_id, "mean log-prob", round(float(lp.mean()), 3))


# ## KL rate
#
# kl_rate uses the chain rule; exact_kl enumerates all sequences and is only
# feasible for short horizons over this 28-token vocabulary.

print("KL(cats || foxes) per token, horizon 8:", round(kl_rate(m1, m2, 8), 4))
print("KL(foxes || cats) per token, horizon 8:", round(kl_rate(m2, m1, 8), 4))
print("enumerated, horizon 3:", round(exact_kl(m1, m2, 3), 6),
      " chain rule:", round(kl_rate(m1, m2, 3), 6))
