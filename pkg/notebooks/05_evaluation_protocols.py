# %% [markdown]
# # Evaluation protocols
#
# Verification accuracy (k-fold best threshold), TAR at a fixed FAR,
# closed-set rank-k identification and the matched / best-unmatched
# similarity gap, shown on hand-made embeddings.

# %%
import numpy as np

from qgface.evaluation import (pair_scores, rank_k_identification, similarity_gap, tar_at_far,
                               verification_accuracy)

rng = np.random.default_rng(0)
centers = rng.normal(size=(10, 16))
gallery = centers + 0.1 * rng.normal(size=centers.shape)
g_lab = np.arange(10)
clean = np.repeat(centers, 3, axis=0) + 0.3 * rng.normal(size=(30, 16))
noisy = np.repeat(centers, 3, axis=0) + 1.5 * rng.normal(size=(30, 16))
p_lab = np.repeat(np.arange(10), 3)

# %%
for name, probes in (("clean", clean), ("noisy", noisy)):
    r1 = rank_k_identification(gallery, g_lab, probes, p_lab, k=1)
    r5 = rank_k_identification(gallery, g_lab, probes, p_lab, k=5)
    gap = similarity_gap(gallery, g_lab, probes, p_lab)
    print(f"{name}: rank-1 {r1:.2f} rank-5 {r5:.2f} matched {gap.mean_matched:.3f} "
          f"best unmatched {gap.mean_best_unmatched:.3f} gap {gap.summary:+.3f}")

# %%
emb = np.concatenate([gallery, noisy])
pairs = [(p_lab[i] + 0, 10 + i, True) for i in range(30)] + [((p_lab[i] + 1) % 10, 10 + i, False) for i in range(30)]
scores, same = pair_scores(emb, pairs)
print(f"verification accuracy {verification_accuracy(emb, pairs, folds=10):.3f}")
for far in (0.5, 0.1, 1 / 30):
    print(f"TAR@FAR={far:.3f}: {tar_at_far(scores, same, far):.3f}")
