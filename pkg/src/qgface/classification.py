"""Adaptive-margin (AdaFace-style) softmax head and its gradient scaling term."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError

_SIN_EPS = 1e-12


class ClassifierProxies(nn.Module):
    """Proxy matrix ``W`` of shape (d, n); column j represents identity j.

    Columns are stored unnormalised and normalised only when cosines are
    taken, so the raw columns can also be used to compensate queued features.
    """

    def __init__(self, embedding_dim, num_classes, s=64.0, m=0.4, generator=None):
        super().__init__()
        w = torch.empty(embedding_dim, num_classes)
        # same scale as nn.Linear's default init; the generator keeps it seedable
        bound = 1.0 / math.sqrt(embedding_dim)
        w.uniform_(-bound, bound, generator=generator)
        self.W = nn.Parameter(w)
        self.s = float(s)
        self.m = float(m)

    @property
    def embedding_dim(self):
        return self.W.shape[0]

    @property
    def num_classes(self):
        return self.W.shape[1]

    def normalized(self):
        return F.normalize(self.W, dim=0)

    def cosines(self, features):
        return cosine_matrix(features, self.W)


@dataclass
class ClassificationOutput:
    loss: torch.Tensor
    logits: torch.Tensor
    p_target: torch.Tensor
    gst: torch.Tensor


def adaface_margins(z_hat, m):
    z_hat = torch.as_tensor(z_hat)
    g_angle = -m * z_hat
    g_add = m * z_hat + m
    return g_angle, g_add


def cosine_matrix(features, W):
    """Cosine between each feature row and each column of ``W``."""
    norms = features.norm(dim=1)
    if (norms == 0).any():
        bad = torch.nonzero(norms == 0).flatten().tolist()
        raise InvalidInputError(f"zero-norm feature rows at indices {bad}")
    return (features / norms[:, None]) @ F.normalize(W, dim=0)


def margin_target(cos_theta, g_angle, g_add):
    """cos(theta + g_angle) - g_add, expanded so no arccos is needed."""
    sin_theta = torch.sqrt((1.0 - cos_theta * cos_theta).clamp_min(_SIN_EPS))
    return cos_theta * torch.cos(g_angle) - sin_theta * torch.sin(g_angle) - g_add


def _check_labels(labels, n):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise InvalidInputError(f"labels must lie in [0, {n}), got range "
                                f"[{int(labels.min())}, {int(labels.max())}]")
    return labels


def adaface_logits(features, labels, proxies, z_hat):
    """Cosine logits with the adaptive margin applied to the target column.

    Non-target entries are the plain cosines.  The scale ``s`` is not applied
    here.
    """
    labels = _check_labels(labels, proxies.num_classes)
    cos = proxies.cosines(features)
    z_hat = torch.as_tensor(z_hat, dtype=cos.dtype).detach()
    g_angle, g_add = adaface_margins(z_hat, proxies.m)
    idx = torch.arange(cos.shape[0])
    target = margin_target(cos[idx, labels], g_angle, g_add)
    one_hot = F.one_hot(labels, proxies.num_classes).to(torch.bool)
    return torch.where(one_hot, target[:, None], cos)


def gst(p_target, cos_theta, g_angle, return_flags=False):
    """Gradient scaling term (P - 1) * d f / d cos(theta) for the adaptive margin.

    Where sin(theta) < 1e-6 the derivative is ill-conditioned and the
    g_angle = 0 limit (P - 1) is returned; ``return_flags`` exposes which
    entries took that branch.
    """
    p = torch.as_tensor(p_target, dtype=torch.float64)
    cos_theta = torch.as_tensor(cos_theta, dtype=torch.float64)
    g_angle = torch.as_tensor(g_angle, dtype=torch.float64)
    p, cos_theta, g_angle = torch.broadcast_tensors(p, cos_theta, g_angle)
    sin_theta = torch.sqrt((1.0 - cos_theta**2).clamp_min(0.0))
    flags = sin_theta < 1e-6
    safe_sin = torch.where(flags, torch.ones_like(sin_theta), sin_theta)
    dfdcos = torch.cos(g_angle) + torch.sin(g_angle) * cos_theta / safe_sin
    g = (p - 1.0) * torch.where(flags, torch.ones_like(dfdcos), dfdcos)
    if return_flags:
        return g, flags
    return g


def classification_loss(features, labels, proxies, z_hat, class_mask, step=None, reduction="masked"):
    """Scaled cross-entropy over the features selected by ``class_mask``.

    ``reduction="masked"`` averages over the selected features,
    ``reduction="batch"`` divides their summed loss by the batch size.  With
    an empty mask the loss is a constant 0 outside the autograd graph.
    """
    if reduction not in ("masked", "batch"):
        raise InvalidInputError(f"unknown reduction {reduction!r}")
    labels = _check_labels(labels, proxies.num_classes)
    class_mask = torch.as_tensor(class_mask, dtype=torch.bool)
    z_hat = torch.as_tensor(z_hat, dtype=features.dtype).detach()
    modulated = adaface_logits(features, labels, proxies, z_hat)
    logits = proxies.s * modulated
    if torch.isnan(logits).all():
        raise NumericError("all classification logits are NaN", {"step": step})

    with torch.no_grad():
        idx = torch.arange(logits.shape[0])
        p_all = torch.softmax(logits.detach(), dim=1)[idx, labels]
        cos_t = proxies.cosines(features.detach())[idx, labels]
        g_angle, _ = adaface_margins(z_hat, proxies.m)
        g_all = gst(p_all, cos_t, g_angle).to(logits.dtype)
        nan = torch.full_like(p_all, float("nan"))
        p_target = torch.where(class_mask, p_all, nan)
        g_out = torch.where(class_mask, g_all, nan)

    if not class_mask.any():
        loss = torch.zeros((), dtype=features.dtype)
    else:
        if reduction == "masked":
            loss = F.cross_entropy(logits[class_mask], labels[class_mask])
        else:
            loss = F.cross_entropy(logits[class_mask], labels[class_mask], reduction="sum") / len(class_mask)
    return ClassificationOutput(loss=loss, logits=logits, p_target=p_target, gst=g_out)
