"""Learnable style tokens and prompt assembly for a frozen text encoder."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

DEFAULT_SYSTEM_PROMPT = "a photo of a face with"
SOURCE_TEXT = "face"
TOKEN_INIT_STD = 0.02


class TextEncoder(Protocol):
    """What the prompt machinery needs from a text encoder adapter."""

    token_dim: int
    embed_dim: int
    context_length: int
    sos: torch.Tensor
    eos: torch.Tensor

    def embed_words(self, text: str) -> torch.Tensor: ...

    def __call__(self, sequence: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class Attribute:
    name: str
    prompt_text: str


def parse_attributes(items: Sequence[dict | str | Attribute]) -> list[Attribute]:
    attrs = []
    for item in items:
        if isinstance(item, Attribute):
            attrs.append(item)
        elif isinstance(item, str):
            attrs.append(Attribute(item, item))
        else:
            try:
                attrs.append(Attribute(str(item["name"]), str(item.get("prompt_text", item["name"]))))
            except (KeyError, TypeError) as e:
                raise ConfigError(f"bad attribute entry {item!r}") from e
    names = [a.name for a in attrs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate attribute names in {names}")
    return attrs


def load_attributes(path: str | Path) -> list[Attribute]:
    """Read a JSON array of ``{"name": ..., "prompt_text": ...}`` objects."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ConfigError("attribute file must hold a JSON array")
    return parse_attributes(data)


class StyleTokenTable(nn.Module):
    """``n x m x d`` learnable token vectors, one row per attribute."""

    def __init__(self, tokens: torch.Tensor, attribute_names: Sequence[str]):
        super().__init__()
        if tokens.ndim != 3:
            raise ValueError(f"tokens must be (n, m, d), got {tuple(tokens.shape)}")
        if tokens.shape[0] != len(attribute_names):
            raise ValueError(f"{tokens.shape[0]} token rows for {len(attribute_names)} attributes")
        self.tokens = nn.Parameter(tokens)
        self.attribute_names = list(attribute_names)

    @property
    def n_attributes(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    def index(self, name: str) -> int:
        return self.attribute_names.index(name)


def init_style_tokens(
    attribute_names: Sequence[str], m: int, d_l: int, rng: np.random.Generator
) -> StyleTokenTable:
    names = list(attribute_names)
    if not names:
        raise ConfigError("need at least one attribute")
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate attribute names in {names}")
    if m < 1:
        raise ConfigError(f"need at least one style token per attribute, got m={m}")
    values = rng.normal(0.0, TOKEN_INIT_STD, size=(len(names), m, d_l)).astype(np.float32)
    return StyleTokenTable(torch.from_numpy(values), names)


@dataclass(frozen=True)
class SystemPrompt:
    """Frozen instruction words shared by every attribute prompt."""

    words: tuple[str, ...]
    embedded: torch.Tensor

    @classmethod
    def from_text(cls, text: str, encoder: TextEncoder) -> "SystemPrompt":
        return cls(tuple(text.split()), encoder.embed_words(text).detach())


@dataclass
class PromptAssembly:
    """``[SOS, V_1..V_m, system words, attribute words, EOS]`` as embeddings."""

    sequence: torch.Tensor
    trainable: torch.Tensor  # bool mask over sequence positions
    attribute_index: int

    def __len__(self) -> int:
        return self.sequence.shape[0]


def assemble_prompt(
    table: StyleTokenTable,
    attribute_index: int,
    system: SystemPrompt,
    attribute_text_embeddings: torch.Tensor,
    sos: torch.Tensor,
    eos: torch.Tensor,
) -> PromptAssembly:
    if not 0 <= attribute_index < table.n_attributes:
        raise IndexError(f"attribute index {attribute_index} out of range for {table.n_attributes}")
    d = table.tokens.shape[-1]
    parts = {
        "system": system.embedded,
        "attribute": attribute_text_embeddings,
        "sos": sos.reshape(1, -1),
        "eos": eos.reshape(1, -1),
    }
    for name, t in parts.items():
        if t.shape[-1] != d:
            raise ValueError(f"{name} embeddings have dim {t.shape[-1]}, style tokens have {d}")
    v = table.tokens[attribute_index]
    seq = torch.cat([parts["sos"], v, parts["system"], parts["attribute"], parts["eos"]], dim=0)
    mask = torch.zeros(seq.shape[0], dtype=torch.bool)
    mask[1 : 1 + table.n_tokens] = True
    return PromptAssembly(seq, mask, attribute_index)


def encode_prompt(assembly: PromptAssembly, text_encoder: TextEncoder) -> torch.Tensor:
    """Pooled text embedding of the assembled prompt (gradients reach the V slots)."""
    if len(assembly) > text_encoder.context_length:
        raise ValueError(
            f"prompt of {len(assembly)} tokens exceeds encoder context {text_encoder.context_length}"
        )
    if not torch.isfinite(assembly.sequence).all():
        raise ValueError("prompt embeddings contain non-finite values")
    return text_encoder(assembly.sequence)


def encode_text(text: str, text_encoder: TextEncoder) -> torch.Tensor:
    """Embedding of a plain prompt with no learnable tokens."""
    seq = torch.cat(
        [text_encoder.sos.reshape(1, -1), text_encoder.embed_words(text), text_encoder.eos.reshape(1, -1)]
    )
    return text_encoder(seq)


class PromptBank:
    """Frozen pieces needed to rebuild every attribute prompt from a token table."""

    def __init__(
        self,
        attributes: Sequence[Attribute],
        text_encoder: TextEncoder,
        system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    ):
        self.attributes = list(attributes)
        self.encoder = text_encoder
        self.system = SystemPrompt.from_text(system_prompt, text_encoder)
        with torch.no_grad():
            self.attribute_embeddings = [text_encoder.embed_words(a.prompt_text) for a in self.attributes]

    def assemble(self, table: StyleTokenTable, i: int) -> PromptAssembly:
        return assemble_prompt(
            table, i, self.system, self.attribute_embeddings[i], self.encoder.sos, self.encoder.eos
        )

    def encode_all(self, table: StyleTokenTable) -> torch.Tensor:
        """Stacked ``(n, d_e)`` prompt embeddings in attribute order."""
        return torch.stack([encode_prompt(self.assemble(table, i), self.encoder) for i in range(len(self.attributes))])
