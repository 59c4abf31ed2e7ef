"""Edit quality metrics.

Attribute altering and dependency use sigma-normalised classifier logit
differences between paired edited and original images:

    AA = mean_n [ (l_t(edited_n) - l_t(orig_n)) / sigma_t ]
    AD = mean_n mean_{k != t} | l_k(edited_n) - l_k(orig_n) | / sigma_k

where ``sigma_k`` is the std of logit ``k`` over a reference image set.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import stream
from .core import FRONTAL, CameraPose, RenderedImage
from .losses import cosine_distance, cosine_similarity
from .prompt import encode_text

if TYPE_CHECKING:
    from .trainer import TrainState

DEFAULT_BUCKETS = ((0.0, 10.0), (10.0, 30.0))


class AttributeClassifier(Protocol):
    names: list[str]
    sigma: torch.Tensor

    def logits(self, images: torch.Tensor) -> torch.Tensor: ...


class LinearAttributeClassifier:
    """Linear probe on flattened pixels, one logit per attribute."""

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor, names: Sequence[str], sigma: torch.Tensor | None = None):
        if weight.shape[0] != len(names):
            raise ValueError(f"{weight.shape[0]} logit rows for {len(names)} attribute names")
        self.weight = weight
        self.bias = bias
        self.names = list(names)
        self.sigma = torch.ones(len(names), dtype=weight.dtype) if sigma is None else sigma
        if not bool((self.sigma > 0).all()):
            raise ValueError("classifier logit std must be positive")

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return F.linear(images.flatten(-3).to(self.weight.dtype), self.weight, self.bias)

    def calibrate(self, reference_images: torch.Tensor) -> "LinearAttributeClassifier":
        with torch.no_grad():
            sigma = self.logits(reference_images).reshape(-1, len(self.names)).std(dim=0, unbiased=False)
        if not bool((sigma > 0).all()):
            raise ValueError("reference set gives zero logit spread for some attribute")
        self.sigma = sigma
        return self


def toy_attribute_classifier(state: "TrainState", n_reference: int = 256, seed: int = 0) -> LinearAttributeClassifier:
    """Random linear probes over the toy image space, calibrated on unedited renders."""
    bb = state.backbone
    names = [a.name for a in state.attributes]
    rng = stream(seed, "attribute_classifier")
    n_in = bb.image_size * bb.image_size * 3
    weight = torch.from_numpy(rng.normal(0.0, 1.0 / math.sqrt(n_in), (len(names), n_in)).astype(np.float32))
    clf = LinearAttributeClassifier(weight.to(state.dtype), torch.zeros(len(names), dtype=state.dtype), names)
    with torch.no_grad():
        w = state.sample_latents(stream(seed, "attribute_reference"), n_reference)
        ref = bb.render_codes(w, FRONTAL, original=True)
    return clf.calibrate(ref)


def _target_index(target: int | str, clf: AttributeClassifier) -> int:
    if isinstance(target, str):
        if target not in clf.names:
            raise KeyError(f"unknown attribute {target!r}")
        return clf.names.index(target)
    if not 0 <= target < len(clf.names):
        raise KeyError(f"attribute index {target} out of range")
    return target


def _normalized_logit_shift(edited, originals, clf) -> torch.Tensor:
    if edited.shape != originals.shape:
        raise ValueError("edited and original images must be paired")
    if edited.ndim < 4 or edited.shape[0] == 0:
        raise ValueError("need a non-empty (N, H, W, 3) batch of image pairs")
    with torch.no_grad():
        return (clf.logits(edited) - clf.logits(originals)) / clf.sigma


def attribute_altering(edited: torch.Tensor, originals: torch.Tensor, target: int | str, clf: AttributeClassifier) -> float:
    t = _target_index(target, clf)
    return float(_normalized_logit_shift(edited, originals, clf)[..., t].mean())


def attribute_dependency(edited: torch.Tensor, originals: torch.Tensor, target: int | str, clf: AttributeClassifier) -> float:
    t = _target_index(target, clf)
    shift = _normalized_logit_shift(edited, originals, clf).abs()
    others = [k for k in range(shift.shape[-1]) if k != t]
    if not others:
        return 0.0
    return float(shift[..., others].mean(-1).mean())


def _bucket_key(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}"


def _bucket_poses(rng: np.random.Generator, lo: float, hi: float, n: int, pitch_range) -> list[CameraPose]:
    mags = rng.uniform(lo, hi, n)
    signs = rng.choice([-1.0, 1.0], n)
    pitches = rng.uniform(pitch_range[0], pitch_range[1], n)
    return [CameraPose(float(s * m), float(p)) for s, m, p in zip(signs, mags, pitches)]


def identity_sweep(
    state: "TrainState",
    n_samples: int = 64,
    buckets: Sequence[tuple[float, float]] = DEFAULT_BUCKETS,
    rng: np.random.Generator | None = None,
    reference: str = "same_pose",
) -> dict[str, float]:
    """Mean identity cosine between edited and unedited renders per |yaw| bucket.

    Poses in a bucket have ``|yaw|`` uniform in ``[lo, hi]`` and pitch uniform
    in the run's pitch range. The unedited reference is rendered at the same
    pose (``reference="same_pose"``) or frontally (``"frontal"``). Scores are
    averaged over every attribute.
    """
    if n_samples < 1:
        raise ValueError("identity sweep needs at least one sample per bucket")
    if reference not in ("same_pose", "frontal"):
        raise ValueError(f"unknown reference {reference!r}")
    rng = rng or stream(state.config.seed, "identity_sweep")
    bb, af = state.backbone, state.encoders.identity
    out = {}
    with torch.no_grad():
        for lo, hi in buckets:
            w = state.sample_latents(rng, n_samples)
            poses = _bucket_poses(rng, lo, hi, n_samples, state.config.pitch_range)
            w_hat = state.edit(w)
            k = w_hat.shape[0]
            edited = state.render_edits(w_hat, poses)
            ref_pose = FRONTAL if reference == "frontal" else poses
            original = bb.render_codes(w, ref_pose, original=True)
            sims = cosine_similarity(af(edited), af(original).expand(k, -1, -1))
            out[_bucket_key(lo, hi)] = float(sims.mean())
    return out


def frontal_identity_similarity(state: "TrainState", n_samples: int = 64, rng: np.random.Generator | None = None) -> float:
    rng = rng or stream(state.config.seed, "frontal_identity")
    with torch.no_grad():
        w = state.sample_latents(rng, n_samples)
        edited = state.render_edits(state.edit(w), FRONTAL)
        original = state.backbone.render_codes(w, FRONTAL, original=True)
        af = state.encoders.identity
        return float(cosine_similarity(af(edited), af(original).expand(edited.shape[0], -1, -1)).mean())


class OracleDepthEstimator:
    """Reads the compositor's own depth map, optionally box-blurred by ``blur`` pixels."""

    def __init__(self, blur: int = 0):
        self.blur = blur

    def __call__(self, image: RenderedImage) -> torch.Tensor:
        if image.depth is None:
            raise ValueError("oracle depth estimator needs a render that carries its depth map")
        if self.blur == 0:
            return image.depth
        k = 2 * self.blur + 1
        d = image.depth.reshape(1, 1, *image.depth.shape[-2:])
        d = F.pad(d, (self.blur,) * 4, mode="replicate")
        return F.avg_pool2d(d, k, stride=1).reshape(image.depth.shape)


class OraclePoseEstimator:
    def __call__(self, image: RenderedImage) -> CameraPose:
        return image.pose


class EstimatorError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"estimator failed on sample {index}: {cause}")
        self.index = index


def pose_depth_error(
    state: "TrainState",
    depth_estimator: Callable[[RenderedImage], torch.Tensor] | None = None,
    pose_estimator: Callable[[RenderedImage], CameraPose] | None = None,
    n_samples: int = 64,
    rng: np.random.Generator | None = None,
    edited: bool = True,
) -> tuple[float, float]:
    """(depth error, pose error) of renders at random poses.

    Depth error is the RMS difference between the estimated depth map and the
    renderer's depth map, averaged over samples. Pose error is the mean
    squared (yaw, pitch) error in radians between the requested and the
    estimated pose. ``edited=False`` scores the unedited generator instead.
    """
    depth_estimator = depth_estimator or OracleDepthEstimator()
    pose_estimator = pose_estimator or OraclePoseEstimator()
    rng = rng or stream(state.config.seed, "pose_depth")
    cfg, bb = state.config, state.backbone
    depth_errs, pose_errs = [], []
    with torch.no_grad():
        w = state.sample_latents(rng, n_samples)
        poses = [CameraPose(float(rng.uniform(*cfg.yaw_range)), float(rng.uniform(*cfg.pitch_range))) for _ in range(n_samples)]
        codes = state.edit(w) if edited else w.unsqueeze(0)
        for k in range(codes.shape[0]):
            render = bb.render(bb.generate(codes[k], original=not edited), poses)
            for i, pose in enumerate(poses):
                single = RenderedImage(render.pixels[i], pose, None if render.depth is None else render.depth[i])
                try:
                    est_depth = depth_estimator(single)
                    est_pose = pose_estimator(single)
                except Exception as e:
                    raise EstimatorError(i, e) from e
                depth_errs.append(float(torch.sqrt(((est_depth - single.depth) ** 2).mean())))
                dy = math.radians(est_pose.yaw - pose.yaw)
                dp = math.radians(est_pose.pitch - pose.pitch)
                pose_errs.append((dy * dy + dp * dp) / 2)
    return float(np.mean(depth_errs)), float(np.mean(pose_errs))


# ---------------------------------------------------------------------------
# prompt robustness and bias
# ---------------------------------------------------------------------------

FILLER_WORDS = ("very", "really", "quite", "some", "the", "just", "nice")
OCR_CONFUSIONS = {
    "O": "0", "o": "0", "l": "1", "I": "1", "i": "1", "S": "5", "s": "5",
    "B": "8", "Z": "2", "z": "2", "g": "9", "q": "9", "e": "c", "G": "6",
}
PERTURBATIONS = ("CD", "WI", "OCR", "BT")


def perturb_prompt(text: str, kind: str, rng: np.random.Generator) -> str:
    """Corrupt a prompt by one character deletion (CD), word insertion (WI) or OCR swap.

    Back translation (BT) needs an external translation service and is not
    provided.
    """
    if not text.strip():
        raise ValueError("cannot perturb empty text")
    if kind == "CD":
        positions = [i for i, c in enumerate(text) if not c.isspace()]
        i = positions[int(rng.integers(len(positions)))]
        return text[:i] + text[i + 1:]
    if kind == "WI":
        words = text.split(" ")
        at = int(rng.integers(len(words) + 1))
        word = FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))]
        return " ".join(words[:at] + [word] + words[at:])
    if kind == "OCR":
        positions = [i for i, c in enumerate(text) if c in OCR_CONFUSIONS]
        if not positions:
            raise ValueError(f"no OCR-confusable character in {text!r}")
        i = positions[int(rng.integers(len(positions)))]
        return text[:i] + OCR_CONFUSIONS[text[i]] + text[i + 1:]
    if kind == "BT":
        raise NotImplementedError("back translation needs an external translation service")
    raise ValueError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")


def _centroid(variants: Sequence[str], text_encoder) -> torch.Tensor:
    if not variants:
        raise ValueError("prompt group is empty")
    with torch.no_grad():
        e = torch.stack([encode_text(v, text_encoder) for v in variants])
        return (e / torch.linalg.vector_norm(e, dim=-1, keepdim=True)).mean(0)


def prompt_bias_probe(variants_a: Sequence[str], variants_b: Sequence[str], text_encoder) -> float:
    """Cosine distance between the mean unit embeddings of two prompt groups."""
    return float(cosine_distance(_centroid(variants_a, text_encoder), _centroid(variants_b, text_encoder)))


def bias_table(groups: Mapping[str, Sequence[str]], reference: Sequence[str], text_encoder) -> dict[str, float]:
    return {name: prompt_bias_probe(v, reference, text_encoder) for name, v in groups.items()}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    aa: dict[str, float]
    ad: dict[str, float]
    id_similarity: dict[str, float]
    depth_error: float
    pose_error: float
    baseline_depth_error: float
    baseline_pose_error: float
    counts: dict[str, int]
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def evaluate(
    state: "TrainState",
    n_samples: int = 64,
    seed: int = 0,
    classifier: AttributeClassifier | None = None,
    buckets: Sequence[tuple[float, float]] = DEFAULT_BUCKETS,
    depth_estimator=None,
    pose_estimator=None,
    extra_metrics: Mapping[str, Callable[[torch.Tensor, torch.Tensor], float]] | None = None,
    csv_path: str | Path | None = None,
) -> MetricReport:
    """Score every attribute of a trained state.

    ``extra_metrics`` maps a name to ``fn(edited, originals) -> float`` over
    frontal renders of all attributes, e.g. an FID hook.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    clf = classifier or toy_attribute_classifier(state, seed=seed)
    bb = state.backbone
    rng = stream(seed, "evaluate")
    with torch.no_grad():
        w = state.sample_latents(rng, n_samples)
        originals = bb.render_codes(w, FRONTAL, original=True)
        edited = state.render_edits(state.edit(w), FRONTAL)
    aa, ad, rows = {}, {}, []
    for i, attr in enumerate(state.attributes):
        aa[attr.name] = attribute_altering(edited[i], originals, attr.name, clf)
        ad[attr.name] = attribute_dependency(edited[i], originals, attr.name, clf)
        if csv_path is not None:
            shift = _normalized_logit_shift(edited[i], originals, clf)
            t = clf.names.index(attr.name)
            for n in range(n_samples):
                others = [shift[n, k].abs() for k in range(shift.shape[-1]) if k != t]
                rows.append({"attribute": attr.name, "sample": n, "aa": float(shift[n, t]),
                             "ad": float(torch.stack(others).mean()) if others else 0.0})
    ids = identity_sweep(state, n_samples, buckets, stream(seed, "identity_sweep"))
    depth, pose = pose_depth_error(state, depth_estimator, pose_estimator, n_samples, stream(seed, "pose_depth"))
    base_depth, base_pose = pose_depth_error(
        state, depth_estimator, pose_estimator, n_samples, stream(seed, "pose_depth"), edited=False
    )
    extra = {}
    for name, fn in (extra_metrics or {}).items():
        extra[name] = float(fn(edited.reshape(-1, *edited.shape[-3:]), originals.repeat(edited.shape[0], 1, 1, 1)))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["attribute", "sample", "aa", "ad"])
            writer.writeheader()
            writer.writerows(rows)
    counts = {"samples": n_samples, "attributes": len(state.attributes), "buckets": len(buckets)}
    return MetricReport(aa, ad, ids, depth, pose, base_depth, base_pose, counts, extra)
