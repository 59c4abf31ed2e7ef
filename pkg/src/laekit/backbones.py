"""Backbone and encoder adapters.

The toy bundle is a small, deterministic, fully differentiable stand-in for
a 3D-aware generator (mapping network, RGB-alpha generator, MPI renderer)
and for the text, image and identity encoders. Every random quantity comes
from a named stream of one integer seed, so two loads with the same seed
are bit-identical.

Real backbones (GMPI, EG3D, StyleNeRF, CIPS-3D) plug in through
:func:`register_adapter`; their internals are not part of this package.
"""
from __future__ import annotations

import copy
import hashlib
import zipfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    DEFAULT_PARALLAX,
    FAR_DEPTH,
    NEAR_DEPTH,
    MultiplaneImage,
    RenderedImage,
    composite_mpi,
    plane_depths,
)
from .errors import BackboneKindError, BackboneUnavailableError, CorruptCheckpointError

KINDS = ("toy", "gmpi", "eg3d", "stylenerf", "cips3d")
TOY_FORMAT_VERSION = 1
WORD_STD = 0.02


@dataclass(frozen=True)
class ToyDims:
    latent_dim: int = 32
    n_layers: int = 12
    image_size: int = 32
    n_planes: int = 4
    token_dim: int = 32
    embed_dim: int = 64
    identity_dim: int = 64
    context_length: int = 77


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component of a seeded bundle."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _normal(rng: np.random.Generator, shape, std: float) -> torch.Tensor:
    return torch.from_numpy(rng.normal(0.0, std, size=shape).astype(np.float32))


def _smooth_normal(rng: np.random.Generator, lead: tuple[int, ...], size: int, std: float, coarse: int = 8) -> torch.Tensor:
    """Gaussian field drawn on a ``coarse`` grid and bilinearly upsampled to ``size``."""
    low = _normal(rng, (int(np.prod(lead)), 1, coarse, coarse), std)
    up = F.interpolate(low, size=(size, size), mode="bilinear", align_corners=True)
    return up.reshape(*lead, size, size).contiguous()


# ---------------------------------------------------------------------------
# generator side
# ---------------------------------------------------------------------------


class ToyMappingNetwork(nn.Module):
    """``z -> w``, broadcast to every W+ layer."""

    def __init__(self, dims: ToyDims, seed: int):
        super().__init__()
        rng = stream(seed, "mapping")
        d = dims.latent_dim
        self.n_layers = dims.n_layers
        self.register_buffer("fc1", _normal(rng, (d, d), 1.0 / np.sqrt(d)))
        self.register_buffer("fc2", _normal(rng, (d, d), 1.0 / np.sqrt(d)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(z @ self.fc1.T, 0.2)
        w = h @ self.fc2.T
        return w.unsqueeze(-2).expand(*w.shape[:-1], self.n_layers, w.shape[-1]).contiguous()


class ToyAlphaBranch(nn.Module):
    """Per-plane alpha logits as an affine map of the layer-mean latent."""

    def __init__(self, dims: ToyDims, seed: int):
        super().__init__()
        rng = stream(seed, "alpha_branch")
        s, n, d = dims.image_size, dims.n_planes, dims.latent_dim
        self.shape = (n, s, s, 1)
        weight = _smooth_normal(rng, (n, d), s, 0.5 / np.sqrt(d))  # (n, d, s, s)
        bias = _smooth_normal(rng, (n,), s, 1.0)
        self.weight = nn.Parameter(weight.permute(0, 2, 3, 1).reshape(n * s * s, d).contiguous())
        self.bias = nn.Parameter(bias.reshape(n * s * s).contiguous())

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        logits = F.linear(w.mean(-2), self.weight, self.bias)
        return logits.reshape(*w.shape[:-2], *self.shape)


class ToyGenerator(nn.Module):
    """RGB-alpha generator: shared color texture plus alpha maps per plane.

    Only ``alpha_branch`` is trainable; ``original_alpha_branch`` is a frozen
    copy used to render the unedited model.
    """

    def __init__(self, dims: ToyDims, seed: int):
        super().__init__()
        rng = stream(seed, "color")
        s, d = dims.image_size, dims.latent_dim
        self.image_size = s
        weight = _smooth_normal(rng, (3, d), s, 1.5 / np.sqrt(d))  # (3, d, s, s)
        self.register_buffer("color_weight", weight.permute(2, 3, 0, 1).reshape(s * s * 3, d).contiguous())
        self.register_buffer("color_bias", _smooth_normal(rng, (3,), s, 0.5).permute(1, 2, 0).reshape(-1).contiguous())
        self.register_buffer("depths", plane_depths(dims.n_planes))
        self.alpha_branch = ToyAlphaBranch(dims, seed)
        self.original_alpha_branch = copy.deepcopy(self.alpha_branch).requires_grad_(False)

    def color(self, w: torch.Tensor) -> torch.Tensor:
        s = self.image_size
        logits = F.linear(w.mean(-2), self.color_weight, self.color_bias)
        return torch.sigmoid(logits).reshape(*w.shape[:-2], s, s, 3)

    def forward(self, w: torch.Tensor, original: bool = False) -> MultiplaneImage:
        branch = self.original_alpha_branch if original else self.alpha_branch
        return MultiplaneImage(self.color(w), torch.sigmoid(branch(w)), self.depths)


def toy_generate_mpi(w: torch.Tensor, generator: ToyGenerator, alpha_branch: ToyAlphaBranch | None = None) -> MultiplaneImage:
    """MPI for ``w`` using ``alpha_branch`` (the generator's trainable branch by default)."""
    branch = generator.alpha_branch if alpha_branch is None else alpha_branch
    return MultiplaneImage(generator.color(w), torch.sigmoid(branch(w)), generator.depths)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class ToyTextEncoder(nn.Module):
    """Word-hash embeddings and ``tanh(P @ mean(tokens) + b)`` pooling."""

    def __init__(self, dims: ToyDims, seed: int):
        super().__init__()
        rng = stream(seed, "text")
        self.seed = seed
        self.token_dim = dims.token_dim
        self.embed_dim = dims.embed_dim
        self.context_length = dims.context_length
        self.register_buffer("sos", _normal(rng, (dims.token_dim,), WORD_STD))
        self.register_buffer("eos", _normal(rng, (dims.token_dim,), WORD_STD))
        self.register_buffer("proj", _normal(rng, (dims.embed_dim, dims.token_dim), 8.0 / (WORD_STD * dims.token_dim)))
        self.register_buffer("bias", _normal(rng, (dims.embed_dim,), 0.1))

    def embed_words(self, text: str) -> torch.Tensor:
        words = text.lower().split()
        if not words:
            raise ValueError("cannot embed empty text")
        return torch.stack([_normal(stream(self.seed, "word:" + w), (self.token_dim,), WORD_STD) for w in words])

    def forward(self, sequence: torch.Tensor) -> torch.Tensor:
        if sequence.shape[-2] == 0:
            raise ValueError("empty token sequence")
        return torch.tanh(F.linear(sequence.mean(-2), self.proj, self.bias))


class ToyImageEncoder(nn.Module):
    """``tanh`` of a fixed projection of centered, flattened pixels."""

    def __init__(self, dims: ToyDims, seed: int):
        super().__init__()
        rng = stream(seed, "image")
        s = dims.image_size
        self.image_size = s
        self.register_buffer("proj", _normal(rng, (dims.embed_dim, s * s * 3), 4.0 / np.sqrt(s * s * 3)))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        s = self.image_size
        if image.shape[-3:] != (s, s, 3):
            raise ValueError(f"expected (..., {s}, {s}, 3) images, got {tuple(image.shape)}")
        return torch.tanh(F.linear(image.flatten(-3) - 0.5, self.proj))


class ToyIdentityEncoder(nn.Module):
    """Unit-norm projection of 4x4 average-pooled, centered pixels."""

    pool = 4

    def __init__(self, dims: ToyDims, seed: int):
        super().__init__()
        rng = stream(seed, "identity")
        s = dims.image_size
        if s % self.pool:
            raise ValueError(f"image size {s} not divisible by pool {self.pool}")
        self.image_size = s
        n_in = (s // self.pool) ** 2 * 3
        self.register_buffer("proj", _normal(rng, (dims.identity_dim, n_in), 1.0 / np.sqrt(n_in)))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        s, p = self.image_size, self.pool
        if image.shape[-3:] != (s, s, 3):
            raise ValueError(f"expected (..., {s}, {s}, 3) images, got {tuple(image.shape)}")
        lead = image.shape[:-3]
        x = image.reshape(*lead, s // p, p, s // p, p, 3).mean(dim=(-4, -2))
        e = F.linear(x.flatten(-3) - 0.5, self.proj)
        return e / torch.linalg.vector_norm(e, dim=-1, keepdim=True)


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------


@dataclass
class BackboneBundle:
    """Mapping network, RGB-alpha generator and renderer behind one contract.

    ``generator(w)`` returns a :class:`MultiplaneImage` using the trainable
    alpha branch; ``generator(w, original=True)`` uses the frozen original.
    """

    kind: str
    mapping_network: nn.Module
    generator: nn.Module
    latent_dim: int
    n_layers: int
    image_size: int
    n_planes: int
    n_planes_train: int = 32
    n_planes_infer: int = 96
    near: float = NEAR_DEPTH
    far: float = FAR_DEPTH
    parallax: float = DEFAULT_PARALLAX
    seed: int | None = None
    renderer: Callable[..., RenderedImage] | None = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.latent_dim, self.n_layers, self.image_size, self.n_planes)

    @property
    def alpha_branch(self) -> nn.Module:
        return self.generator.alpha_branch

    def trainable_parameters(self) -> list[nn.Parameter]:
        return list(self.generator.alpha_branch.parameters())

    def frozen_tensors(self) -> dict[str, torch.Tensor]:
        trainable = {id(p) for p in self.trainable_parameters()}
        out = {}
        for prefix, module in (("mapping", self.mapping_network), ("generator", self.generator)):
            for name, t in list(module.named_parameters()) + list(module.named_buffers()):
                if id(t) not in trainable:
                    out[f"{prefix}.{name}"] = t
        return out

    def map(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping_network(z)

    def generate(self, w: torch.Tensor, original: bool = False) -> MultiplaneImage:
        return self.generator(w, original=original)

    def render(self, mpi: MultiplaneImage, pose) -> RenderedImage:
        if self.renderer is not None:
            return self.renderer(mpi, pose)
        return composite_mpi(mpi, pose, parallax=self.parallax, far=self.far)

    def render_codes(self, w: torch.Tensor, pose, original: bool = False) -> torch.Tensor:
        """Pixels for a stack of codes; ``pose`` is one pose or one per code."""
        return self.render(self.generate(w, original=original), pose).pixels


@dataclass
class EncoderBundle:
    text: nn.Module
    image: nn.Module
    identity: nn.Module
    kind: str = "toy"

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, module in (("text", self.text), ("image", self.image), ("identity", self.identity)):
            for name, t in list(module.named_parameters()) + list(module.named_buffers()):
                out[f"{prefix}.{name}"] = t
        return out


def fingerprint(tensors: dict[str, torch.Tensor]) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def frozen_fingerprint(backbone: BackboneBundle, encoders: EncoderBundle) -> str:
    return fingerprint({**{"backbone." + k: v for k, v in backbone.frozen_tensors().items()},
                        **{"encoders." + k: v for k, v in encoders.tensors().items()}})


def toy_backbone(seed: int = 7, dims: ToyDims = ToyDims()) -> BackboneBundle:
    return BackboneBundle(
        kind="toy",
        mapping_network=ToyMappingNetwork(dims, seed),
        generator=ToyGenerator(dims, seed),
        latent_dim=dims.latent_dim,
        n_layers=dims.n_layers,
        image_size=dims.image_size,
        n_planes=dims.n_planes,
        n_planes_train=dims.n_planes,
        n_planes_infer=dims.n_planes,
        seed=seed,
    )


def toy_encoders(seed: int = 7, dims: ToyDims = ToyDims()) -> EncoderBundle:
    return EncoderBundle(ToyTextEncoder(dims, seed), ToyImageEncoder(dims, seed), ToyIdentityEncoder(dims, seed))


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

_ADAPTERS: dict[str, Callable[[dict], BackboneBundle]] = {}


def register_adapter(kind: str, factory: Callable[[dict], BackboneBundle]) -> None:
    """Install the factory that wraps a real backbone's state dict."""
    if kind not in KINDS or kind == "toy":
        raise ValueError(f"unknown backbone kind {kind!r}")
    _ADAPTERS[kind] = factory


def save_toy_backbone(bundle: BackboneBundle, path: str | Path, dims: ToyDims = ToyDims()) -> Path:
    """Write the toy bundle's weights to an ``.npz`` file."""
    if bundle.kind != "toy":
        raise ValueError("only toy bundles can be exported")
    arrays = {
        "kind": np.array("toy"),
        "format_version": np.array(TOY_FORMAT_VERSION),
        "seed": np.array(bundle.seed),
        "dims": np.array([getattr(dims, f) for f in ToyDims.__dataclass_fields__]),
    }
    state = {**{"mapping." + k: v for k, v in bundle.mapping_network.state_dict().items()},
             **{"generator." + k: v for k, v in bundle.generator.state_dict().items()}}
    for k, v in state.items():
        arrays["w:" + k] = v.detach().cpu().numpy()
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def _read_npz(path: Path) -> dict[str, np.ndarray] | None:
    """Arrays of a toy export, or None if the file is not a zip archive."""
    if not zipfile.is_zipfile(path):
        return None
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: data[k] for k in data.files}
    except Exception as e:  # truncated members surface as assorted errors
        raise CorruptCheckpointError(f"cannot read backbone file {path}: {e}") from e


def load_backbone(kind: str, checkpoint_path: str | Path | None = None, seed: int = 7) -> BackboneBundle:
    """Build a bundle for ``kind``; the toy kind needs no checkpoint."""
    if kind not in KINDS:
        raise ValueError(f"unknown backbone kind {kind!r}; expected one of {KINDS}")
    if kind == "toy" and checkpoint_path is None:
        return toy_backbone(seed)
    if checkpoint_path is None:
        raise FileNotFoundError(f"backbone kind {kind!r} needs a checkpoint file")
    path = Path(checkpoint_path)
    if not path.is_file():
        raise FileNotFoundError(f"backbone checkpoint {path} does not exist")

    arrays = _read_npz(path)
    if arrays is not None and "kind" in arrays and "w:generator.depths" in arrays:
        file_kind = str(arrays["kind"])
        if file_kind != kind:
            raise BackboneKindError(f"{path} holds a {file_kind!r} backbone, asked for {kind!r}")
        version = int(arrays["format_version"])
        if version != TOY_FORMAT_VERSION:
            raise BackboneKindError(f"unsupported toy backbone version {version}")
        dims = ToyDims(*[int(v) for v in arrays["dims"]])
        bundle = toy_backbone(int(arrays["seed"]), dims)
        try:
            bundle.mapping_network.load_state_dict(
                {k[len("w:mapping."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("w:mapping.")})
            bundle.generator.load_state_dict(
                {k[len("w:generator."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("w:generator.")})
        except (RuntimeError, KeyError) as e:
            raise CorruptCheckpointError(f"backbone file {path} does not match its declared dims: {e}") from e
        return bundle
    if kind == "toy":
        raise CorruptCheckpointError(f"{path} is not a toy backbone export")

    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CorruptCheckpointError(f"cannot read {kind} checkpoint {path}: {e}") from e
    factory = _ADAPTERS.get(kind)
    if factory is None:
        raise BackboneUnavailableError(
            f"no adapter registered for {kind!r}; install the upstream package and call register_adapter"
        )
    bundle = factory(state)
    if bundle.kind != kind:
        raise BackboneKindError(f"adapter for {kind!r} returned a {bundle.kind!r} bundle")
    return bundle


def load_encoders(kind: str = "toy", seed: int = 7) -> EncoderBundle:
    if kind == "toy":
        return toy_encoders(seed)
    raise BackboneUnavailableError(f"encoder bundle {kind!r} is not available in this install")
