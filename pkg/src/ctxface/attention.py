"""Context-attention network: shift a face latent using a context latent.

The attention map is the row-softmaxed outer product of a context-derived
query vector and a face-derived key vector. Rows are indexed by query
entries, so each output coordinate attends over all face coordinates with
weights set by one context coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import DimensionError, NumericError
from .latent import GaussianLatent


def attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T)`` row-wise; batched over leading axes."""
    if q.shape != k.shape:
        raise DimensionError(f"query {tuple(q.shape)} vs key {tuple(k.shape)}")
    logits = q.unsqueeze(-1) * k.unsqueeze(-2)
    logits = logits - logits.amax(dim=-1, keepdim=True)
    w = logits.exp()
    return w / w.sum(dim=-1, keepdim=True)


@dataclass(frozen=True)
class ShiftResult:
    shifted: GaussianLatent
    offset_mean: torch.Tensor
    offset_logvar: torch.Tensor
    attention_map_mean: torch.Tensor


class ContextAttention(nn.Module):
    """Six square projections: query/key/value for the mean and for the log-variance."""

    def __init__(self, d: int, init_std: float | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.d = d
        names = ("q_mu", "k_mu", "v_mu", "q_var", "k_var", "v_var")
        self.proj = nn.ModuleDict({n: nn.Linear(d, d) for n in names})
        std = init_std if init_std is not None else d**-0.5
        with torch.no_grad():
            for lin in self.proj.values():
                lin.weight.normal_(0.0, std, generator=generator)
                lin.bias.zero_()

    def matrices(self) -> dict[str, torch.Tensor]:
        return {n: lin.weight for n, lin in self.proj.items()}

    def _offset(self, ctx_vec, face_vec, which: str):
        p = self.proj
        q = p["q_" + which](ctx_vec)
        k = p["k_" + which](face_vec)
        v = p["v_" + which](face_vec)
        a = attention_map(q, k)
        return (a @ v.unsqueeze(-1)).squeeze(-1), a

    def forward(self, face: GaussianLatent, ctx: GaussianLatent, gamma: float = 1.0) -> ShiftResult:
        return compute_shift(face, ctx, self, gamma)


def compute_shift(face: GaussianLatent, ctx: GaussianLatent, params: ContextAttention, gamma: float = 1.0) -> ShiftResult:
    """Shift ``face`` toward ``ctx``: mean += gamma * offset, log-variance likewise.

    ``gamma`` scales the offset at inference; training uses 1.
    """
    if face.dim != params.d or ctx.dim != params.d:
        raise DimensionError(f"latents {face.dim}/{ctx.dim} vs attention dim {params.d}")
    if face.mean.shape != ctx.mean.shape:
        raise DimensionError(f"face {tuple(face.mean.shape)} vs context {tuple(ctx.mean.shape)}")
    off_mu, a_mu = params._offset(ctx.mean, face.mean, "mu")
    off_lv, _ = params._offset(ctx.log_variance, face.log_variance, "var")
    if not (torch.isfinite(off_mu).all() and torch.isfinite(off_lv).all()):
        raise NumericError("non-finite attention offset")
    shifted = GaussianLatent.create(gamma * off_mu + face.mean, gamma * off_lv + face.log_variance)
    return ShiftResult(shifted, off_mu, off_lv, a_mu)


def self_shift(face: GaussianLatent, params: ContextAttention, gamma: float = 1.0) -> ShiftResult:
    """Shift with the face latent standing in for the missing context."""
    return compute_shift(face, face, params, gamma)
