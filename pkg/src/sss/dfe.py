"""Discriminative feature enhancement across two augmented views.

Per pyramid scale: pool both views, take the cosine similarity ``s`` of the
pooled vectors, turn it into a fusion weight ``w = sigmoid(s)``, fuse the two
MLP-transformed maps convexly, and add the gated residual
``(1 - s) * (F2 - F1)``. The result is concatenated with a view's own features
and projected back to the level width before the decoder.

Feature maps are ``B x C x H x W`` tensors; scalars per scale are ``(B,)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

COSINE_EPS = 1e-12


def global_average_pool(feature_map: torch.Tensor) -> torch.Tensor:
    """Mean over the two trailing spatial axes."""
    if feature_map.shape[-1] < 1 or feature_map.shape[-2] < 1:
        raise ValueError(f"empty spatial extent {tuple(feature_map.shape[-2:])}")
    return feature_map.mean(dim=(-2, -1))


def cosine_similarity(u: torch.Tensor, v: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Cosine along the last axis; 0 when either vector has norm below ``eps``."""
    if u.shape != v.shape:
        raise ValueError(f"vector shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    ok = (nu >= eps) & (nv >= eps)
    denom = torch.where(ok, nu * nv, torch.ones_like(nu))
    s = (u * v).sum(dim=-1) / denom
    s = torch.where(ok, s, torch.zeros_like(s))
    return s.clamp(-1.0, 1.0)


def fusion_weight(similarity: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(similarity)


def _bcast(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=like.dtype, device=like.device)
    return x.reshape(x.shape + (1,) * (like.dim() - x.dim()))


def fuse(f1: torch.Tensor, f2: torch.Tensor, w, mlp: nn.Module) -> torch.Tensor:
    """``w * mlp(f1) + (1 - w) * mlp(f2)`` with one scalar ``w`` per sample.

    Evaluated as ``m2 + w * (m1 - m2)`` so equal inputs give ``mlp(f)`` bit for bit.
    """
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    w = _bcast(w, f1)
    m1, m2 = mlp(f1), mlp(f2)
    return m2 + w * (m1 - m2)


def residual_delta(f1: torch.Tensor, f2: torch.Tensor, similarity) -> torch.Tensor:
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    return (1 - _bcast(similarity, f1)) * (f2 - f1)


class ChannelMLP(nn.Sequential):
    """Two pointwise linear layers with a SiLU in between (hidden width = C)."""

    def __init__(self, channels: int):
        super().__init__(
            nn.Conv2d(channels, channels, 1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 1),
        )


@dataclass
class ScaleStats:
    pooled_1: torch.Tensor
    pooled_2: torch.Tensor
    similarity: torch.Tensor
    weight: torch.Tensor


@dataclass
class FusedPyramid:
    fused: list[torch.Tensor]
    delta: list[torch.Tensor]
    adjusted: list[torch.Tensor]


class DFE(nn.Module):
    """Per-scale MLP fusion plus the ``[own || adjusted] -> C`` re-injection projection."""

    def __init__(self, widths):
        super().__init__()
        self.widths = tuple(widths)
        self.mlps = nn.ModuleList(ChannelMLP(c) for c in self.widths)
        self.proj = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in self.widths)
        self.reset_projection()

    @torch.no_grad()
    def reset_projection(self, adjusted_gain: float = 0.0):
        """Identity on the original features, ``adjusted_gain * I`` on the adjusted ones."""
        for c, conv in zip(self.widths, self.proj):
            eye = torch.eye(c, dtype=conv.weight.dtype)
            conv.weight.copy_(torch.cat([eye, adjusted_gain * eye], dim=1)[:, :, None, None])
            conv.bias.zero_()

    def forward(self, pyramid_1, pyramid_2):
        if len(pyramid_1) != len(pyramid_2) or len(pyramid_1) != len(self.mlps):
            raise ValueError(
                f"level count mismatch: {len(pyramid_1)}, {len(pyramid_2)}, expected {len(self.mlps)}")
        fused, delta, adjusted, stats = [], [], [], []
        for f1, f2, mlp in zip(pyramid_1, pyramid_2, self.mlps):
            p1, p2 = global_average_pool(f1), global_average_pool(f2)
            s = cosine_similarity(p1, p2)
            w = fusion_weight(s)
            fz = fuse(f1, f2, w, mlp)
            d = residual_delta(f1, f2, s)
            fused.append(fz)
            delta.append(d)
            adjusted.append(fz + d)
            stats.append(ScaleStats(p1, p2, s, w))
        return FusedPyramid(fused, delta, adjusted), stats

    def inject(self, pyramid, adjusted):
        """Concatenate each level with its adjusted counterpart and project back to C."""
        return [proj(torch.cat([f, a], dim=1)) for f, a, proj in zip(pyramid, adjusted, self.proj)]

    def single_view(self, pyramid):
        """Inference path: both views equal, so adjusted collapses to ``MLP(F)``."""
        return self.inject(pyramid, [mlp(f) for f, mlp in zip(pyramid, self.mlps)])


def dfe_forward(pyramid_s1, pyramid_s2, block: DFE):
    """Adjusted pyramid and per-scale statistics for two views."""
    return block(pyramid_s1, pyramid_s2)


def pooled_similarity(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    return cosine_similarity(global_average_pool(f1), global_average_pool(f2))

