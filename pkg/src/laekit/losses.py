"""Editing and preservation losses.

Cosine terms are computed as ``0.5 * |a/|a| - b/|b||^2``, which equals
``1 - cos(a, b)`` and is exactly zero for bit-identical inputs.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Callable, Mapping, Sequence

import torch

from .core import LatentSplit
from .errors import DegenerateEmbeddingError
from .mapper import StyleMapper, map_edit

TERMS = ("dclip", "sc", "id", "idvc", "latent", "alpha")


@dataclass(frozen=True)
class LossWeights:
    dclip: float = 1.0
    sc: float = 0.8
    id: float = 0.8
    idvc: float = 0.5
    latent: float = 0.5
    alpha: float = 0.5

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name}={getattr(self, name)} is negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Unweighted terms plus their weighted total."""

    dclip: torch.Tensor | float
    sc: torch.Tensor | float
    id: torch.Tensor | float
    idvc: torch.Tensor | float
    latent: torch.Tensor | float
    alpha: torch.Tensor | float
    total: torch.Tensor | float

    def to_dict(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}

    def detach(self) -> "LossBreakdown":
        return LossBreakdown(**self.to_dict())


def _unit(x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    bad = ~torch.isfinite(norm) | (norm <= 0)
    if bad.any():
        raise DegenerateEmbeddingError(f"{int(bad.sum())} embedding(s) with zero or non-finite norm")
    return x / norm


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - cos(a, b)`` along the last dim."""
    d = _unit(a) - _unit(b)
    return 0.5 * (d * d).sum(-1)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return 1.0 - cosine_distance(a, b)


def directional_clip_loss(
    edited_images: torch.Tensor,
    source_images: torch.Tensor,
    prompt_embeddings: torch.Tensor,
    source_text_embedding: torch.Tensor,
    image_encoder: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Sum over attributes of ``1 - cos(dI_i, dT_i)``.

    ``edited_images`` and ``source_images`` are ``(K, ..., H, W, 3)``,
    ``prompt_embeddings`` is ``(K, d_e)``. Extra batch dims between ``K``
    and the image dims are averaged.
    """
    if edited_images.shape != source_images.shape:
        raise ValueError("edited and source image stacks differ in shape")
    k = edited_images.shape[0]
    if prompt_embeddings.shape[0] != k:
        raise ValueError(f"{prompt_embeddings.shape[0]} prompt embeddings for {k} attributes")
    d_img = _unit(image_encoder(edited_images)) - _unit(image_encoder(source_images))
    d_txt = _unit(prompt_embeddings) - _unit(source_text_embedding)
    d_txt = d_txt.view(k, *([1] * (d_img.ndim - 2)), d_txt.shape[-1])
    per = cosine_distance(d_img, d_txt.expand_as(d_img))
    return per.reshape(k, -1).mean(-1).sum()


def token_contrastive_loss(prompt_embeddings: torch.Tensor) -> torch.Tensor:
    """Sum of cosine similarities over unordered attribute pairs."""
    k = prompt_embeddings.shape[0]
    if k < 2:
        _unit(prompt_embeddings)
        return prompt_embeddings.sum() * 0.0
    i, j = torch.triu_indices(k, k, offset=1)
    return cosine_similarity(prompt_embeddings[i], prompt_embeddings[j]).sum()


def identity_loss(
    edited_frontal: torch.Tensor,
    source_frontal: torch.Tensor,
    id_encoder: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """``1 - cos(AF(edited), AF(source))``, averaged over any batch dims."""
    if edited_frontal.shape[-3:] != source_frontal.shape[-3:]:
        raise ValueError("identity loss images differ in size")
    a, b = id_encoder(edited_frontal), id_encoder(source_frontal)
    a, b = torch.broadcast_tensors(a, b)
    return cosine_distance(a, b).mean()


def view_consistency_identity_loss(
    edited_codes: torch.Tensor,
    pose_pairs: Sequence[tuple],
    render: Callable[[torch.Tensor, object], torch.Tensor],
    id_encoder: Callable[[torch.Tensor], torch.Tensor],
    reference_codes: torch.Tensor | None = None,
    reference_render: Callable[[torch.Tensor, object], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Identity agreement between pairs of edits seen from two poses.

    ``edited_codes`` is ``(K, ..., n_layers, D_w)``; ``render(codes, pose)``
    returns images for a stack of codes. ``pose_pairs`` holds one
    ``(pose_1, pose_2)`` per unordered pair ``i < j`` in lexicographic
    order. With ``reference_codes`` set, the second image of each pair is
    rendered from the reference (unedited) code instead of edit ``j``.
    """
    k = edited_codes.shape[0]
    pairs = list(itertools.combinations(range(k), 2))
    if k < 2:
        warnings.warn("view-consistency identity loss needs two edits; returning 0", stacklevel=2)
        return edited_codes.sum() * 0.0
    if len(pose_pairs) != len(pairs):
        raise ValueError(f"expected {len(pairs)} pose pairs for K={k}, got {len(pose_pairs)}")
    reference_render = reference_render or render
    total = edited_codes.new_zeros(())
    for (i, j), (p1, p2) in zip(pairs, pose_pairs):
        a = id_encoder(render(edited_codes[i], p1))
        if reference_codes is None:
            b = id_encoder(render(edited_codes[j], p2))
        else:
            b = id_encoder(reference_render(reference_codes, p2))
        total = total + cosine_distance(a, b).mean()
    return total


def edit_norm(delta: torch.Tensor) -> torch.Tensor:
    """Frobenius norm of each ``(n_layers, D_w)`` edit, shape ``delta.shape[:-2]``."""
    return torch.linalg.vector_norm(delta.flatten(-2), dim=-1)


def latent_reg_loss(w: torch.Tensor, dv: torch.Tensor, mapper: StyleMapper, split: LatentSplit) -> torch.Tensor:
    """``|w_hat - w|_2``, averaged over batch dims."""
    return edit_norm(map_edit(w, dv, mapper, split)).mean()


def alpha_reg_loss(alpha_logits: torch.Tensor) -> torch.Tensor:
    """L2 norm of the alpha branch output ``(..., L, H, W, 1)``, averaged over batch dims."""
    if not torch.isfinite(alpha_logits).all():
        raise ValueError("alpha branch output has non-finite values")
    return torch.linalg.vector_norm(alpha_logits.flatten(-4), dim=-1).mean()


def total_loss(terms: Mapping[str, torch.Tensor | float], weights: LossWeights = LossWeights()) -> LossBreakdown:
    missing = [t for t in TERMS if t not in terms]
    if missing:
        raise KeyError(f"missing loss terms {missing}")
    total = 0.0
    for name in TERMS:
        total = total + getattr(weights, name) * terms[name]
    return LossBreakdown(**{name: terms[name] for name in TERMS}, total=total)
