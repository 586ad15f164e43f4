# %% [markdown]
# # Proxy-compensated negative queue and the contrastive branch
#
# Low-quality pairs are trained contrastively: the augmented view is the
# anchor, the original view is the (stop-gradient) positive, and negatives
# come from a FIFO queue of past features.  Stored features drift as the
# classifier moves, so each is shifted by how far its class proxy moved
# since it was stored.

# %%
import torch

from qgface.classification import ClassifierProxies
from qgface.contrastive import ProxyQueue, compensate, contrastive_loss, enqueue, scm_mask

torch.manual_seed(0)
proxies = ClassifierProxies(embedding_dim=4, num_classes=5).double()
queue = ProxyQueue(capacity=8, dim=4, dtype=torch.float64)
enqueue(queue, torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64), [0, 1, 2], proxies)
print("filled", queue.filled, "labels", queue.labels.tolist())

# %% [markdown]
# With frozen proxies compensation is the identity.  Moving one proxy moves
# exactly the slots of that class.

# %%
print("identity:", torch.equal(compensate(queue, proxies), queue.features[: queue.filled]))
with torch.no_grad():
    proxies.W[:, 1] += 0.5
shift = compensate(queue, proxies) - queue.features[: queue.filled]
print("per-slot shift norm:", [round(float(v), 3) for v in shift.norm(dim=1)])

# %% [markdown]
# ## Same-class masking
#
# Queue entries sharing the anchor's identity never enter the denominator.

# %%
print("mask for anchor of class 1:", scm_mask(queue.labels, 1).tolist())
h_q = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
h_k = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
out = contrastive_loss(h_q, h_k, [1, 3], queue, torch.tensor([True, True]), s=8.0, proxies=proxies)
out.loss.backward()
print(f"loss={float(out.loss.detach()):.4f} pairs={out.num_pairs} pos={out.mean_pos_sim:.3f} neg={out.mean_neg_sim:.3f}")
print("key branch gradient is None (stop-gradient):", h_k.grad is None)
