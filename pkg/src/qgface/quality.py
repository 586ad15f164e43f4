"""Feature-norm quality indicator and quality partitioning.

The norm of the raw embedding is used as a proxy for image quality.  Norms are
standardised with running statistics, scaled by ``c`` and clipped to [-1, 1].
The indicator is always detached, so nothing downstream can optimise the norm
through it.
"""

from dataclasses import dataclass, replace

import torch

from .errors import InvalidInputError, StateError

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class QualityState:
    mu_z: float = 0.0
    sigma_z: float = 1.0
    momentum: float = 0.01
    c: float = 0.33
    b: float = 0.2
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise InvalidInputError(f"momentum must lie in [0, 1], got {self.momentum}")
        # 0 and 1 are the degenerate "everything HQ" / "everything LQ" settings.
        if not 0.0 <= self.b <= 1.0:
            raise InvalidInputError(f"threshold b must lie in [0, 1], got {self.b}")
        if self.c <= 0:
            raise InvalidInputError(f"scale c must be positive, got {self.c}")
        if self.sigma_z < SIGMA_FLOOR:
            object.__setattr__(self, "sigma_z", SIGMA_FLOOR)

    def to_dict(self):
        return {
            "mu_z": self.mu_z,
            "sigma_z": self.sigma_z,
            "momentum": self.momentum,
            "c": self.c,
            "b": self.b,
            "initialized": self.initialized,
        }


@dataclass
class PartitionResult:
    z_hat: torch.Tensor
    z_unit: torch.Tensor
    class_mask: torch.Tensor
    pair_quality: torch.Tensor
    contra_mask: torch.Tensor

    @property
    def frac_lq(self):
        if self.contra_mask.numel() == 0:
            return 0.0
        return float(self.contra_mask.float().mean())


def _as_norms(norms):
    norms = torch.as_tensor(norms).detach()
    if norms.ndim != 1:
        norms = norms.reshape(-1)
    return norms


def update_stats(norms, state):
    """Fold a batch of feature norms into the running mean/std.

    The first batch initialises the statistics; later batches use an
    exponential update with ``state.momentum``.
    """
    norms = _as_norms(norms).double()
    if norms.numel() == 0:
        raise InvalidInputError("update_stats received an empty batch of norms")
    if not torch.isfinite(norms).all():
        raise InvalidInputError("update_stats received non-finite norms")
    if (norms < 0).any():
        raise InvalidInputError("feature norms must be non-negative")

    batch_mu = float(norms.mean())
    # population std; a single-sample batch has std 0 and hits the floor
    batch_sigma = float(norms.std(unbiased=False))
    if not state.initialized:
        mu, sigma = batch_mu, batch_sigma
    else:
        a = state.momentum
        mu = (1.0 - a) * state.mu_z + a * batch_mu
        sigma = (1.0 - a) * state.sigma_z + a * batch_sigma
    return replace(state, mu_z=mu, sigma_z=max(sigma, SIGMA_FLOOR), initialized=True)


def quality_indicator(norms, state):
    """Clipped, standardised norm in [-1, 1] with gradient flow stopped."""
    if not state.initialized:
        raise StateError("quality statistics are not initialised; call update_stats first")
    norms = _as_norms(norms)
    if not torch.isfinite(norms).all():
        raise InvalidInputError("quality_indicator received non-finite norms")
    z_hat = (norms - state.mu_z) / (state.sigma_z / state.c)
    return z_hat.clamp(-1.0, 1.0)


def to_unit(z_hat):
    return (torch.as_tensor(z_hat) + 1.0) / 2.0


def partition(z_unit_orig, z_unit_aug, b):
    """Route features to classification and pairs to contrastive learning.

    ``class_mask`` covers the 2B features ordered [original stream,
    augmented stream].  A pair goes to contrastive learning when the lower of
    its two unit qualities is <= b.  ``b == 0`` disables partitioning: every
    feature is classified and no pair is contrastive.
    """
    z_unit_orig = torch.as_tensor(z_unit_orig).detach()
    z_unit_aug = torch.as_tensor(z_unit_aug).detach()
    if z_unit_orig.shape != z_unit_aug.shape or z_unit_orig.ndim != 1:
        raise InvalidInputError(
            f"stream qualities must be 1-D and equal length, got "
            f"{tuple(z_unit_orig.shape)} and {tuple(z_unit_aug.shape)}"
        )
    z_unit = torch.cat([z_unit_orig, z_unit_aug])
    pair_quality = torch.minimum(z_unit_orig, z_unit_aug)
    if b <= 0.0:
        class_mask = torch.ones_like(z_unit, dtype=torch.bool)
        contra_mask = torch.zeros_like(pair_quality, dtype=torch.bool)
    else:
        class_mask = z_unit > b
        contra_mask = pair_quality <= b
    return PartitionResult(
        z_hat=z_unit * 2.0 - 1.0,
        z_unit=z_unit,
        class_mask=class_mask,
        pair_quality=pair_quality,
        contra_mask=contra_mask,
    )
