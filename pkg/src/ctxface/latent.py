"""Diagonal Gaussian latents and the closed-form math on them.

Everything here works on torch tensors whose last axis is the latent
dimension, so a batch of latents is just a ``(B, d)`` pair.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionError, NumericError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass(frozen=True)
class GaussianLatent:
    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise DimensionError(
                f"mean {tuple(self.mean.shape)} vs log_variance {tuple(self.log_variance.shape)}"
            )

    @classmethod
    def create(cls, mean: torch.Tensor, log_variance: torch.Tensor) -> "GaussianLatent":
        """Build a latent, clamping the log-variance into the allowed range.

        The clamp passes gradients straight through, so a unit that hits a
        bound during training can still be pulled back.
        """
        clamped = log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)
        if log_variance.requires_grad:
            clamped = log_variance + (clamped - log_variance).detach()
        return cls(mean, clamped)

    @classmethod
    def standard(cls, d: int, dtype=torch.float32) -> "GaussianLatent":
        return cls(torch.zeros(d, dtype=dtype), torch.zeros(d, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> torch.Tensor:
        return self.log_variance.exp()

    def detach(self) -> "GaussianLatent":
        return GaussianLatent(self.mean.detach(), self.log_variance.detach())

    def __getitem__(self, idx) -> "GaussianLatent":
        return GaussianLatent(self.mean[idx], self.log_variance[idx])

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.mean).all() and torch.isfinite(self.log_variance).all())


def _check_same_dim(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"{what}: dimension {a.shape[-1]} vs {b.shape[-1]}")


def _check_finite(lat: GaussianLatent):
    if not lat.is_finite():
        raise NumericError("latent contains non-finite entries")


def reparameterize(lat: GaussianLatent, noise: torch.Tensor) -> torch.Tensor:
    """Return ``mean + exp(log_variance / 2) * noise``."""
    if noise.shape[-1] != lat.dim:
        raise DimensionError(f"noise length {noise.shape[-1]} != latent dim {lat.dim}")
    return lat.mean + torch.exp(0.5 * lat.log_variance) * noise


def kl_to_standard_normal(lat: GaussianLatent) -> torch.Tensor:
    """KL(q || N(0, I)), summed over the last axis."""
    _check_finite(lat)
    m, lv = lat.mean, lat.log_variance
    return 0.5 * (m.pow(2) + lv.exp() - lv - 1.0).sum(-1)


def kl_between(p: GaussianLatent, q: GaussianLatent) -> torch.Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    _check_same_dim(p.mean, q.mean, "kl_between")
    _check_finite(p)
    _check_finite(q)
    diff = p.mean - q.mean
    log_ratio = p.log_variance - q.log_variance
    # written so that p == q gives exactly 1 - 0 - 1 + 0 per coordinate
    terms = log_ratio.exp() - log_ratio - 1.0 + diff.pow(2) * torch.exp(-q.log_variance)
    return 0.5 * terms.sum(-1)


def sample_prior(d: int, seed: int, n: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Draw from N(0, I) with a private generator so the result depends only on ``seed``."""
    if d <= 0:
        raise ValueError(f"latent dimension must be positive, got {d}")
    gen = torch.Generator().manual_seed(int(seed))
    shape = (d,) if n is None else (n, d)
    return torch.randn(shape, generator=gen, dtype=dtype)
