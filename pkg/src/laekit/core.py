"""Latent codes, camera poses and the reference multiplane-image compositor.

Latent codes are plain tensors shaped ``(..., n_layers, dim)``; an edit
direction has the same shape as the code it edits. Images are channel-last
``(..., H, W, 3)`` in ``[0, 1]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

NEAR_DEPTH = 0.95
FAR_DEPTH = 1.12
DEFAULT_PARALLAX = 2.0  # pixels of shift per unit tan(angle) at unit depth

YAW_RANGE = (-30.0, 30.0)
PITCH_RANGE = (-20.0, 20.0)


# ---------------------------------------------------------------------------
# latent codes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentSplit:
    """Half-open layer ranges for the coarse, middle and fine groups."""

    coarse: tuple[int, int]
    middle: tuple[int, int]
    fine: tuple[int, int]

    @classmethod
    def thirds(cls, n_layers: int) -> "LatentSplit":
        if n_layers < 3:
            raise ValueError(f"need at least 3 layers to split, got {n_layers}")
        a = n_layers // 3
        b = a + (n_layers - a) // 2
        return cls((0, a), (a, b), (b, n_layers))

    @property
    def ranges(self) -> tuple[tuple[int, int], ...]:
        return (self.coarse, self.middle, self.fine)

    @property
    def n_layers(self) -> int:
        return self.fine[1]

    def validate(self, n_layers: int) -> None:
        expected_start = 0
        for name, (lo, hi) in zip(("coarse", "middle", "fine"), self.ranges):
            if lo != expected_start:
                raise ValueError(f"{name} range starts at {lo}, expected {expected_start}")
            if hi <= lo:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
            expected_start = hi
        if expected_start != n_layers:
            raise ValueError(f"split covers {expected_start} layers, latent has {n_layers}")

    def group_of(self, layer: int) -> int:
        for g, (lo, hi) in enumerate(self.ranges):
            if lo <= layer < hi:
                return g
        raise IndexError(layer)


def check_latent(w: torch.Tensor) -> None:
    if w.ndim < 2:
        raise ValueError(f"latent code must be (..., n_layers, dim), got shape {tuple(w.shape)}")
    if w.shape[-2] < 3:
        raise ValueError(f"latent code needs >= 3 layers, got {w.shape[-2]}")
    if not torch.isfinite(w).all():
        raise ValueError("latent code has non-finite entries")


def split_latent(w: torch.Tensor, split: LatentSplit):
    """Return the (coarse, middle, fine) layer groups of ``w``."""
    split.validate(w.shape[-2])
    return tuple(w[..., lo:hi, :] for lo, hi in split.ranges)


def merge_latent(coarse: torch.Tensor, middle: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
    groups = (coarse, middle, fine)
    dims = {g.shape[-1] for g in groups}
    if len(dims) != 1:
        raise ValueError(f"layer groups disagree on latent dim: {sorted(dims)}")
    lead = {tuple(g.shape[:-2]) for g in groups}
    if len(lead) != 1:
        raise ValueError("layer groups disagree on batch shape")
    return torch.cat(groups, dim=-2)


def apply_edit(w: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Edited code ``w + delta``."""
    if w.shape != delta.shape:
        raise ValueError(f"edit shape {tuple(delta.shape)} does not match latent {tuple(w.shape)}")
    out = w + delta
    if not torch.isfinite(out).all():
        raise ValueError("edited latent has non-finite entries")
    return out


# ---------------------------------------------------------------------------
# camera poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraPose:
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        for name in ("yaw", "pitch"):
            v = getattr(self, name)
            if not (-90.0 <= v <= 90.0):
                raise ValueError(f"{name}={v} outside [-90, 90] degrees")

    @property
    def filename(self) -> str:
        return f"yaw{int(round(self.yaw)):+03d}_pitch{int(round(self.pitch)):+03d}.png"


FRONTAL = CameraPose(0.0, 0.0)


def _check_range(r: tuple[float, float], name: str) -> tuple[float, float]:
    lo, hi = float(r[0]), float(r[1])
    if hi < lo:
        raise ValueError(f"inverted {name} range ({lo}, {hi})")
    return lo, hi


def pose_grid(
    yaw_range: tuple[float, float] = YAW_RANGE,
    pitch_range: tuple[float, float] = PITCH_RANGE,
    n: int = 9,
    diagonal: bool = False,
) -> list[CameraPose]:
    """Evenly spaced poses covering the given ranges.

    ``n`` must be a perfect square for the yaw x pitch grid; with
    ``diagonal=True`` the ``n`` poses run from the (min, min) corner to the
    (max, max) corner instead. Poses are ordered pitch-major.
    """
    if n < 1:
        raise ValueError(f"need at least one pose, got n={n}")
    ylo, yhi = _check_range(yaw_range, "yaw")
    plo, phi = _check_range(pitch_range, "pitch")
    if diagonal:
        ys, ps = np.linspace(ylo, yhi, n), np.linspace(plo, phi, n)
        return [CameraPose(float(y), float(p)) for y, p in zip(ys, ps)]
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"grid mode needs a perfect square, got n={n}")
    if side == 1:
        return [CameraPose((ylo + yhi) / 2, (plo + phi) / 2)]
    ys, ps = np.linspace(ylo, yhi, side), np.linspace(plo, phi, side)
    return [CameraPose(float(y), float(p)) for p in ps for y in ys]


def sample_pose(
    rng: np.random.Generator,
    yaw_range: tuple[float, float] = YAW_RANGE,
    pitch_range: tuple[float, float] = PITCH_RANGE,
) -> CameraPose:
    ylo, yhi = _check_range(yaw_range, "yaw")
    plo, phi = _check_range(pitch_range, "pitch")
    return CameraPose(float(rng.uniform(ylo, yhi)), float(rng.uniform(plo, phi)))


# ---------------------------------------------------------------------------
# multiplane images
# ---------------------------------------------------------------------------


@dataclass
class MultiplaneImage:
    """Shared color texture plus per-plane alphas at increasing depths.

    ``color`` is ``(..., H, W, 3)``, ``alphas`` is ``(..., L, H, W, 1)`` and
    ``depths`` is ``(L,)``; plane 0 is nearest to the camera.
    """

    color: torch.Tensor
    alphas: torch.Tensor
    depths: torch.Tensor

    def __post_init__(self):
        if self.alphas.ndim < 4 or self.alphas.shape[-1] != 1:
            raise ValueError(f"alphas must be (..., L, H, W, 1), got {tuple(self.alphas.shape)}")
        if self.color.shape[-1] != 3 or self.color.shape[-3:-1] != self.alphas.shape[-3:-1]:
            raise ValueError("color texture and alpha maps disagree on spatial size")
        n_planes = self.alphas.shape[-4]
        if n_planes < 1:
            raise ValueError("multiplane image has no planes")
        if self.depths.shape != (n_planes,):
            raise ValueError(f"expected {n_planes} depths, got shape {tuple(self.depths.shape)}")
        if n_planes > 1 and not bool((self.depths[1:] > self.depths[:-1]).all()):
            raise ValueError("plane depths must be strictly increasing")
        with torch.no_grad():
            if not bool(((self.alphas >= 0) & (self.alphas <= 1)).all()):
                raise ValueError("alpha values outside [0, 1]")
            if not bool(((self.color >= 0) & (self.color <= 1)).all()):
                raise ValueError("color values outside [0, 1]")

    @property
    def n_planes(self) -> int:
        return self.alphas.shape[-4]

    @property
    def size(self) -> int:
        return self.color.shape[-2]


@dataclass
class RenderedImage:
    pixels: torch.Tensor
    pose: CameraPose | list[CameraPose]
    depth: torch.Tensor | None = None  # compositor's expected per-pixel depth


def plane_depths(n_planes: int, near: float = NEAR_DEPTH, far: float = FAR_DEPTH) -> torch.Tensor:
    if n_planes == 1:
        return torch.tensor([near])
    return torch.linspace(near, far, n_planes)


def _shift_axis(x: torch.Tensor, offset: torch.Tensor, axis: int) -> torch.Tensor:
    """Translate ``x`` by ``offset`` pixels along ``axis`` with linear interpolation.

    ``offset`` has one dim per dim of ``x`` before ``axis`` and broadcasts
    against ``x.shape[:axis]``. Content leaving the frame is dropped and
    vacated pixels become zero.
    """
    size = x.shape[axis]
    whole = torch.floor(offset)
    frac = (offset - whole).to(x.dtype)
    whole = whole.clamp(-size - 1, size + 1).long()

    def integer_shift(k: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(size)
        src = pos.view(*([1] * k.ndim), size) - k.unsqueeze(-1)
        valid = (src >= 0) & (src < size)
        src = src.clamp(0, size - 1)
        trailing = x.ndim - axis - 1
        idx = src.view(*src.shape, *([1] * trailing)).expand(*x.shape[:axis], size, *x.shape[axis + 1:])
        mask = valid.view(*valid.shape, *([1] * trailing)).to(x.dtype)
        return torch.gather(x, axis, idx) * mask

    f = frac.view(*frac.shape, *([1] * (x.ndim - axis)))
    return integer_shift(whole) * (1 - f) + integer_shift(whole + 1) * f


def _pose_tangents(pose, batch_shape: tuple[int, ...]) -> tuple[torch.Tensor, torch.Tensor]:
    poses = [pose] if isinstance(pose, CameraPose) else list(pose)
    ty = torch.tensor([math.tan(math.radians(p.yaw)) for p in poses], dtype=torch.float64)
    tp = torch.tensor([math.tan(math.radians(p.pitch)) for p in poses], dtype=torch.float64)
    if isinstance(pose, CameraPose):
        return ty.reshape(()).expand(batch_shape), tp.reshape(()).expand(batch_shape)
    if len(poses) != math.prod(batch_shape):
        raise ValueError(f"got {len(poses)} poses for batch shape {batch_shape}")
    return ty.reshape(batch_shape), tp.reshape(batch_shape)


def composite_mpi(
    mpi: MultiplaneImage,
    pose: CameraPose | Sequence[CameraPose],
    parallax: float = DEFAULT_PARALLAX,
    far: float = FAR_DEPTH,
) -> RenderedImage:
    """Render an MPI by back-to-front over-compositing onto black.

    Each plane (shared color and its own alpha) is translated by
    ``parallax * (tan yaw, tan pitch) / depth`` pixels, so nearer planes
    move further. A batched MPI takes either one pose or a flat list with
    one pose per batch element (row-major over the batch dims).
    """
    batch_shape = tuple(mpi.color.shape[:-3])
    n_planes = mpi.n_planes
    ty, tp = _pose_tangents(pose, batch_shape)
    inv_depth = 1.0 / mpi.depths.to(torch.float64)
    # offsets per (batch..., plane)
    dx = parallax * ty.unsqueeze(-1) * inv_depth
    dy = parallax * tp.unsqueeze(-1) * inv_depth

    color = mpi.color.unsqueeze(-4).expand(*batch_shape, n_planes, *mpi.color.shape[-3:])
    rgba = torch.cat([color, mpi.alphas], dim=-1)
    axis_h = rgba.ndim - 3
    rgba = _shift_axis(rgba, dx.unsqueeze(-1), axis_h + 1)
    rgba = _shift_axis(rgba, dy, axis_h)

    out = torch.zeros_like(mpi.color)
    depth = torch.full(mpi.color.shape[:-1], far, dtype=mpi.color.dtype)
    for layer in range(n_planes - 1, -1, -1):
        c = rgba[..., layer, :, :, :3]
        a = rgba[..., layer, :, :, 3:]
        out = c * a + out * (1 - a)
        depth = mpi.depths[layer].to(depth.dtype) * a[..., 0] + depth * (1 - a[..., 0])
    return RenderedImage(out, pose if isinstance(pose, CameraPose) else list(pose), depth)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def to_uint8(pixels: torch.Tensor | np.ndarray) -> np.ndarray:
    arr = pixels.detach().cpu().numpy() if isinstance(pixels, torch.Tensor) else np.asarray(pixels)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def save_png(pixels: torch.Tensor | np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path)
    return path


def write_pose_sweep(renders: Sequence[RenderedImage], out_dir: str | Path, **meta) -> Path:
    """Write one PNG per pose plus ``index.json`` mapping poses to files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for r in renders:
        if not isinstance(r.pose, CameraPose):
            raise ValueError("pose sweep expects unbatched renders")
        save_png(r.pixels, out_dir / r.pose.filename)
        entries.append({"yaw": r.pose.yaw, "pitch": r.pose.pitch, "file": r.pose.filename})
    index = out_dir / "index.json"
    index.write_text(json.dumps({**meta, "poses": entries}, indent=2, sort_keys=True))
    return index
