"""Tri-level style mapper turning (w, text embedding) into a W+ offset."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import LatentSplit, merge_latent, split_latent

GROUPS = ("coarse", "middle", "fine")
DEFAULT_EDIT_SCALE = 0.1


class StyleMapper(nn.Module):
    """One affine layer per layer group, shared by all attributes.

    For a layer ``l`` in group ``g`` the offset is
    ``s * (W_g @ [w_l, dv] + b_g)``.
    """

    def __init__(self, latent_dim: int, embed_dim: int, edit_scale: float = DEFAULT_EDIT_SCALE):
        super().__init__()
        if latent_dim < 1 or embed_dim < 1:
            raise ValueError(f"dims must be positive, got latent_dim={latent_dim}, embed_dim={embed_dim}")
        if not edit_scale > 0:
            raise ValueError(f"edit scale must be positive, got {edit_scale}")
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.edit_scale = float(edit_scale)
        self.coarse = nn.Linear(latent_dim + embed_dim, latent_dim)
        self.middle = nn.Linear(latent_dim + embed_dim, latent_dim)
        self.fine = nn.Linear(latent_dim + embed_dim, latent_dim)

    def layers(self) -> tuple[nn.Linear, nn.Linear, nn.Linear]:
        return (self.coarse, self.middle, self.fine)

    def forward(self, w: torch.Tensor, dv: torch.Tensor, split: LatentSplit) -> torch.Tensor:
        return map_edit(w, dv, self, split)


def init_mapper(
    latent_dim: int, embed_dim: int, rng: np.random.Generator, edit_scale: float = DEFAULT_EDIT_SCALE
) -> StyleMapper:
    mapper = StyleMapper(latent_dim, embed_dim, edit_scale)
    std = 1.0 / np.sqrt(latent_dim + embed_dim)
    with torch.no_grad():
        for layer in mapper.layers():
            w = rng.normal(0.0, std, size=tuple(layer.weight.shape)).astype(np.float32)
            layer.weight.copy_(torch.from_numpy(w))
            layer.bias.zero_()
    return mapper


def map_edit(w: torch.Tensor, dv: torch.Tensor, mapper: StyleMapper, split: LatentSplit) -> torch.Tensor:
    """Edit direction with the same shape as ``w``.

    ``w`` is ``(..., n_layers, D_w)``; ``dv`` is ``(..., d_e)`` and
    broadcasts against the leading dims of ``w``.
    """
    if w.shape[-1] != mapper.latent_dim:
        raise ValueError(f"latent dim {w.shape[-1]} != mapper latent dim {mapper.latent_dim}")
    if dv.shape[-1] != mapper.embed_dim:
        raise ValueError(f"embedding dim {dv.shape[-1]} != mapper embed dim {mapper.embed_dim}")
    lead = torch.broadcast_shapes(w.shape[:-2], dv.shape[:-1])
    out = []
    for group, layer in zip(split_latent(w, split), mapper.layers()):
        n = group.shape[-2]
        g = group.expand(*lead, n, group.shape[-1])
        text = dv.unsqueeze(-2).expand(*lead, n, dv.shape[-1])
        out.append(mapper.edit_scale * F.linear(torch.cat([g, text], dim=-1), layer.weight, layer.bias))
    delta = merge_latent(*out)
    if not torch.isfinite(delta).all():
        raise ValueError("mapper produced non-finite edit")
    return delta
