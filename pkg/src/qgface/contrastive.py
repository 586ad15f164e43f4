"""Supervised-contrastive-masked loss against a proxy-updated feature queue."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError


class ProxyQueue:
    """Fixed-capacity FIFO of (raw feature, raw proxy snapshot, label).

    Slots fill from index 0; once full the cursor wraps and overwrites the
    oldest entry.  Unfilled slots carry the label -1.
    """

    def __init__(self, capacity, dim, dtype=torch.float32):
        if capacity < 1:
            raise InvalidInputError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.features = torch.zeros(self.capacity, self.dim, dtype=dtype)
        self.proxy_snapshots = torch.zeros(self.capacity, self.dim, dtype=dtype)
        self.labels = torch.full((self.capacity,), -1, dtype=torch.long)
        self.cursor = 0
        self.filled = 0

    def __len__(self):
        return self.filled

    def push(self, features, labels, proxy_columns):
        """Append rows one slot at a time; everything stored is detached."""
        features = features.detach().to(self.features.dtype)
        proxy_columns = proxy_columns.detach().to(self.features.dtype)
        labels = torch.as_tensor(labels, dtype=torch.long)
        for row in range(features.shape[0]):
            self.features[self.cursor] = features[row]
            self.proxy_snapshots[self.cursor] = proxy_columns[row]
            self.labels[self.cursor] = labels[row]
            self.cursor = (self.cursor + 1) % self.capacity
            self.filled = min(self.filled + 1, self.capacity)
        return self

    def state_dict(self):
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "features": self.features.clone(),
            "proxy_snapshots": self.proxy_snapshots.clone(),
            "labels": self.labels.clone(),
            "cursor": self.cursor,
            "filled": self.filled,
        }

    @classmethod
    def from_state_dict(cls, state):
        q = cls(state["capacity"], state["dim"], dtype=state["features"].dtype)
        q.features = state["features"].clone()
        q.proxy_snapshots = state["proxy_snapshots"].clone()
        q.labels = state["labels"].clone()
        q.cursor = int(state["cursor"])
        q.filled = int(state["filled"])
        return q


@dataclass
class ContrastiveOutput:
    loss: torch.Tensor
    num_pairs: int
    mean_pos_sim: float
    mean_neg_sim: float


def enqueue(queue, features_q, features_k, labels, proxies):
    """Push both streams with the current raw proxy column of each label."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = proxies.num_classes
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise InvalidInputError(f"queue labels must lie in [0, {n})")
    for feats in (features_q, features_k):
        if feats.shape[1] != queue.dim:
            raise InvalidInputError(f"feature dim {feats.shape[1]} != queue dim {queue.dim}")
    W = proxies.W.detach()
    both = torch.cat([features_q, features_k])
    both_labels = torch.cat([labels, labels])
    return queue.push(both, both_labels, W[:, both_labels].T)


def compensate(queue, proxies):
    """Queued features shifted by (current proxy - proxy at enqueue time).

    Reads only; the queue storage is left untouched.
    """
    if queue.filled == 0:
        return torch.zeros(0, queue.dim, dtype=queue.features.dtype)
    with torch.no_grad():
        labels = queue.labels[: queue.filled]
        current = proxies.W.detach().T[labels].to(queue.features.dtype)
        return queue.features[: queue.filled] + (current - queue.proxy_snapshots[: queue.filled])


def scm_mask(queue_labels, anchor_label):
    queue_labels = torch.as_tensor(queue_labels, dtype=torch.long)
    return (queue_labels != int(anchor_label)) & (queue_labels >= 0)


def contrastive_loss(h_q, h_k, labels, queue, contra_mask, s=64.0, proxies=None,
                     include_positive_in_denominator=False, reduction="masked"):
    """Mean contrastive loss over the pairs selected by ``contra_mask``.

    ``h_q`` is the query (augmented) stream and carries the gradient; ``h_k``
    is the key (original) stream and is detached.  Negatives are the queue
    entries, compensated with ``proxies`` when given, minus every entry that
    shares the anchor's identity.  By default the positive term is left out
    of the denominator.  Anchors left without a single negative are skipped.

    ``reduction="masked"`` averages over the contributing pairs;
    ``reduction="batch"`` divides their sum by the number of pairs in the
    batch, i.e. the batch mean of the gated per-pair loss.
    """
    if reduction not in ("masked", "batch"):
        raise InvalidInputError(f"unknown reduction {reduction!r}")
    contra_mask = torch.as_tensor(contra_mask, dtype=torch.bool)
    labels = torch.as_tensor(labels, dtype=torch.long)
    zero = torch.zeros((), dtype=h_q.dtype)
    if not contra_mask.any():
        return ContrastiveOutput(zero, 0, math.nan, math.nan)
    if queue.filled == 0:
        raise ConfigurationError("contrastive pairs were selected but the negative queue is empty")

    if proxies is not None:
        keys = compensate(queue, proxies)
    else:
        keys = queue.features[: queue.filled]
    keys = F.normalize(keys.to(h_q.dtype), dim=1)
    key_labels = queue.labels[: queue.filled]

    q = F.normalize(h_q[contra_mask], dim=1)
    k_pos = F.normalize(h_k[contra_mask].detach(), dim=1)
    anchor_labels = labels[contra_mask]

    pos = (q * k_pos).sum(dim=1)
    neg = q @ keys.T
    valid = (key_labels[None, :] != anchor_labels[:, None]) & (key_labels[None, :] >= 0)

    neg_logits = (s * neg).masked_fill(~valid, -math.inf)
    if include_positive_in_denominator:
        denom_logits = torch.cat([(s * pos)[:, None], neg_logits], dim=1)
        usable = torch.ones_like(pos, dtype=torch.bool)
    else:
        denom_logits = neg_logits
        usable = valid.any(dim=1)
    if not usable.any():
        return ContrastiveOutput(zero, 0, math.nan, math.nan)

    per_pair = torch.logsumexp(denom_logits[usable], dim=1) - s * pos[usable]
    with torch.no_grad():
        mean_pos = float(pos[usable].mean())
        kept = valid[usable]
        mean_neg = float(neg[usable][kept].mean()) if kept.any() else math.nan
    loss = per_pair.mean() if reduction == "masked" else per_pair.sum() / len(contra_mask)
    return ContrastiveOutput(loss, int(usable.sum()), mean_pos, mean_neg)
