"""Training loop for style tokens, style mapper and the generator's alpha branch."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .backbones import KINDS, BackboneBundle, EncoderBundle, frozen_fingerprint, load_backbone, load_encoders, stream
from .checkpoint import Checkpoint, save_checkpoint
from .core import FRONTAL, PITCH_RANGE, YAW_RANGE, CameraPose, LatentSplit, apply_edit, sample_pose
from .errors import ConfigError, NonFiniteLossError
from .losses import (
    TERMS,
    LossBreakdown,
    LossWeights,
    alpha_reg_loss,
    directional_clip_loss,
    edit_norm,
    identity_loss,
    token_contrastive_loss,
    total_loss,
    view_consistency_identity_loss,
)
from .mapper import DEFAULT_EDIT_SCALE, StyleMapper, init_mapper, map_edit
from .prompt import DEFAULT_SYSTEM_PROMPT, SOURCE_TEXT, PromptBank, StyleTokenTable, encode_text, init_style_tokens, parse_attributes

log = logging.getLogger(__name__)

DEFAULT_ATTRIBUTES = (
    {"name": "blond hair", "prompt_text": "blond hair"},
    {"name": "smile", "prompt_text": "a big smile"},
    {"name": "old", "prompt_text": "old age and wrinkles"},
)


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    batch_latents: int = 4
    yaw_range: tuple[float, float] = YAW_RANGE
    pitch_range: tuple[float, float] = PITCH_RANGE
    seed: int = 0
    edit_scale: float = DEFAULT_EDIT_SCALE
    backbone: str = "toy"
    backbone_checkpoint: str | None = None
    backbone_seed: int = 7
    m: int = 1
    attributes: list = field(default_factory=lambda: [dict(a) for a in DEFAULT_ATTRIBUTES])
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    source_text: str = SOURCE_TEXT
    idvc_reference: str = "edited"  # "edited": edit i vs edit j; "original": edit i vs unedited
    grad_clip: float | None = None

    def validate(self) -> "TrainConfig":
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.batch_latents < 1:
            raise ConfigError("batch_latents must be >= 1")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not self.attributes:
            raise ConfigError("attribute list is empty")
        if self.backbone not in KINDS:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.idvc_reference not in ("edited", "original"):
            raise ConfigError(f"idvc_reference must be 'edited' or 'original', got {self.idvc_reference!r}")
        if not self.edit_scale > 0:
            raise ConfigError("edit_scale must be positive")
        for name in ("yaw_range", "pitch_range"):
            lo, hi = getattr(self, name)
            if hi < lo or lo < -90 or hi > 90:
                raise ConfigError(f"bad {name} {(lo, hi)}")
        parse_attributes(self.attributes)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["yaw_range"] = list(self.yaw_range)
        d["pitch_range"] = list(self.pitch_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        if "weights" in data:
            try:
                data["weights"] = LossWeights(**data["weights"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad loss weights: {e}") from e
        for name in ("yaw_range", "pitch_range"):
            if name in data:
                data[name] = tuple(float(v) for v in data[name])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(data)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def with_overrides(self, overrides: Iterable[str]) -> "TrainConfig":
        """Apply ``key=value`` strings; nested keys use dots (``weights.sc=0``)."""
        data = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            *parents, leaf = key.strip().split(".")
            target = data
            for p in parents:
                if not isinstance(target.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                target = target[p]
            if leaf not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[leaf] = value
        return TrainConfig.from_dict(data)


@dataclass
class Batch:
    z: torch.Tensor  # (B, D)
    edit_poses: list[list[CameraPose]]  # [K][B]: edited view for the directional term
    source_poses: list[list[CameraPose]]  # [K][B]: unedited view for the directional term
    pair_poses: list[tuple[list[CameraPose], list[CameraPose]]]  # per unordered pair


class TrainState:
    """Everything one training run owns: frozen bundles, learnable parts, optimizer."""

    def __init__(
        self,
        config: TrainConfig,
        backbone: BackboneBundle | None = None,
        encoders: EncoderBundle | None = None,
    ):
        self.config = config.validate()
        self.backbone = backbone or load_backbone(config.backbone, config.backbone_checkpoint, seed=config.backbone_seed)
        self.encoders = encoders or load_encoders("toy", seed=config.backbone_seed)
        self.attributes = parse_attributes(config.attributes)
        self.prompts = PromptBank(self.attributes, self.encoders.text, config.system_prompt)
        self.split = LatentSplit.thirds(self.backbone.n_layers)
        self.tokens: StyleTokenTable = init_style_tokens(
            [a.name for a in self.attributes], config.m, self.encoders.text.token_dim, stream(config.seed, "tokens")
        )
        self.mapper: StyleMapper = init_mapper(
            self.backbone.latent_dim, self.encoders.text.embed_dim, stream(config.seed, "mapper"), config.edit_scale
        )
        with torch.no_grad():
            self.source_embedding = encode_text(config.source_text, self.encoders.text)
        self.optimizer = torch.optim.Adam(
            list(self.named_parameters().values()),
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            eps=config.eps,
            foreach=False,
        )
        self.rng = stream(config.seed, "batches")
        self.step = 0

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, torch.nn.Parameter]:
        """Trainable tensors in a fixed order."""
        out = {"tokens": self.tokens.tokens}
        for name, p in self.mapper.named_parameters():
            out["mapper." + name] = p
        for name, p in self.backbone.alpha_branch.named_parameters():
            out["alpha_branch." + name] = p
        return out

    def frozen_fingerprint(self) -> str:
        return frozen_fingerprint(self.backbone, self.encoders)

    def double(self) -> "TrainState":
        """Cast every tensor to float64 in place (for gradient checks)."""
        for module in (self.tokens, self.mapper, self.backbone.mapping_network, self.backbone.generator,
                       self.encoders.text, self.encoders.image, self.encoders.identity):
            module.double()
        self.prompts.system = dataclasses.replace(self.prompts.system, embedded=self.prompts.system.embedded.double())
        self.prompts.attribute_embeddings = [e.double() for e in self.prompts.attribute_embeddings]
        self.source_embedding = self.source_embedding.double()
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.tokens.tokens.dtype

    # -- forward pieces -----------------------------------------------------

    def prompt_embeddings(self) -> torch.Tensor:
        return self.prompts.encode_all(self.tokens)

    def edit_directions(self, w: torch.Tensor, dv: torch.Tensor | None = None) -> torch.Tensor:
        """``(K, *w.shape)`` edit directions, one per attribute."""
        dv = self.prompt_embeddings() if dv is None else dv
        lead = w.shape[:-2]
        dv = dv.view(dv.shape[0], *([1] * len(lead)), dv.shape[-1])
        return map_edit(w.unsqueeze(0), dv, self.mapper, self.split)

    def edit(self, w: torch.Tensor, attribute: int | str | None = None) -> torch.Tensor:
        """Edited codes; all attributes stacked first unless one is named."""
        delta = self.edit_directions(w)
        w_hat = apply_edit(w.unsqueeze(0).expand_as(delta), delta)
        if attribute is None:
            return w_hat
        i = attribute if isinstance(attribute, int) else self.tokens.index(attribute)
        return w_hat[i]

    def render_edits(self, w_hat: torch.Tensor, pose) -> torch.Tensor:
        """Stacked pixels of ``generate(w_hat[i])``, one attribute at a time."""
        return torch.stack([self.backbone.render_codes(w_hat[i], pose) for i in range(w_hat.shape[0])])

    def sample_latents(self, rng: np.random.Generator, n: int) -> torch.Tensor:
        z = rng.standard_normal((n, self.backbone.latent_dim)).astype(np.float32)
        with torch.no_grad():
            return self.backbone.map(torch.from_numpy(z).to(self.dtype))

    def sample_batch(self, rng: np.random.Generator) -> Batch:
        cfg = self.config
        k, b = len(self.attributes), cfg.batch_latents
        z = torch.from_numpy(rng.standard_normal((b, self.backbone.latent_dim)).astype(np.float32))

        def poses(n):
            return [sample_pose(rng, cfg.yaw_range, cfg.pitch_range) for _ in range(n)]

        edit_poses = [poses(b) for _ in range(k)]
        source_poses = [poses(b) for _ in range(k)]
        pair_poses = [(poses(b), poses(b)) for _ in range(k * (k - 1) // 2)]
        return Batch(z, edit_poses, source_poses, pair_poses)

    def compute_losses(self, batch: Batch) -> LossBreakdown:
        bb, enc = self.backbone, self.encoders
        k = len(self.attributes)
        w = bb.map(batch.z.to(self.dtype))
        dv = self.prompt_embeddings()
        delta = self.edit_directions(w, dv)
        w_hat = apply_edit(w.unsqueeze(0).expand_as(delta), delta)

        # per-attribute generation keeps edited and source renders shape-identical,
        # so a zero edit reproduces the source bit-for-bit
        edited = [bb.generate(w_hat[i]) for i in range(k)]
        source = bb.generate(w, original=True)
        edited_view = torch.stack([bb.render(edited[i], batch.edit_poses[i]).pixels for i in range(k)])
        source_view = torch.stack([bb.render(source, batch.source_poses[i]).pixels for i in range(k)])
        edited_front = torch.stack([bb.render(m, FRONTAL).pixels for m in edited])
        source_front = bb.render(source, FRONTAL).pixels

        terms = {
            "dclip": directional_clip_loss(edited_view, source_view, dv, self.source_embedding, enc.image),
            "sc": token_contrastive_loss(dv),
            "id": torch.stack([identity_loss(f, source_front, enc.identity) for f in edited_front]).mean(),
            "idvc": view_consistency_identity_loss(
                w_hat,
                batch.pair_poses,
                lambda codes, pose: bb.render_codes(codes, pose),
                enc.identity,
                reference_codes=w if self.config.idvc_reference == "original" else None,
                reference_render=lambda codes, pose: bb.render_codes(codes, pose, original=True),
            ) if k > 1 else w.new_zeros(()),
            "latent": edit_norm(delta).mean(),
            "alpha": alpha_reg_loss(bb.alpha_branch(w_hat)),
        }
        return total_loss(terms, self.config.weights)

    # -- checkpoints --------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        arrays = {}
        params = self.named_parameters()
        for name, p in params.items():
            arrays[name] = p.detach().cpu().numpy().astype(np.float32)
        for name, p in params.items():
            st = self.optimizer.state.get(p, {})
            for moment in ("exp_avg", "exp_avg_sq"):
                t = st.get(moment)
                arrays[f"adam.{moment}.{name}"] = (
                    np.zeros(tuple(p.shape), np.float32) if t is None else t.detach().cpu().numpy().astype(np.float32)
                )
        return Checkpoint(
            arrays=arrays,
            step=self.step,
            config=self.config.to_dict(),
            attribute_names=list(self.tokens.attribute_names),
            rng_state=self.rng.bit_generator.state,
        )

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, backbone: BackboneBundle | None = None, encoders: EncoderBundle | None = None
    ) -> "TrainState":
        state = cls(TrainConfig.from_dict(ckpt.config), backbone, encoders)
        params = state.named_parameters()
        missing = [n for n in params if n not in ckpt.arrays]
        if missing:
            raise KeyError(f"checkpoint lacks arrays {missing}")
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.from_numpy(ckpt.arrays[name]))
        if ckpt.step > 0:
            for name, p in params.items():
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(ckpt.step)),
                    "exp_avg": torch.from_numpy(ckpt.arrays[f"adam.exp_avg.{name}"].copy()),
                    "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"adam.exp_avg_sq.{name}"].copy()),
                }
        state.step = ckpt.step
        if ckpt.rng_state is not None:
            state.rng.bit_generator.state = ckpt.rng_state
        return state


def train_step(state: TrainState, rng: np.random.Generator | None = None) -> tuple[TrainState, LossBreakdown]:
    """One Adam update of tokens, mapper and alpha branch; returns the pre-update losses."""
    batch = state.sample_batch(state.rng if rng is None else rng)
    state.optimizer.zero_grad(set_to_none=True)
    breakdown = state.compute_losses(batch)
    for name in (*TERMS, "total"):
        value = getattr(breakdown, name)
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLossError(name, float(torch.as_tensor(value).detach()))
    breakdown.total.backward()
    if state.config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(list(state.named_parameters().values()), state.config.grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, breakdown.detach()


def train(
    config: TrainConfig,
    log_path: str | Path | None = None,
    state: TrainState | None = None,
    callback: Callable[[TrainState, LossBreakdown], None] | None = None,
) -> TrainState:
    """Run ``config.steps`` steps, appending one JSON line per step to ``log_path``."""
    state = state or TrainState(config)
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for _ in range(config.steps):
            state, losses = train_step(state)
            record = {"step": state.step, **losses.to_dict()}
            if fh is not None:
                fh.write(json.dumps(record) + "\n")
            if state.step == 1 or state.step % 50 == 0:
                log.info("step %d total %.4f", state.step, record["total"])
            if callback is not None:
                callback(state, losses)
    finally:
        if fh is not None:
            fh.close()
    return state


def train_attribute_set(config: TrainConfig, out_dir: str | Path | None = None) -> Checkpoint:
    """Train all configured attributes with one shared mapper.

    With ``out_dir`` set, writes ``train_log.jsonl`` and a ``checkpoint``
    directory there.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = train(config, log_path=out / "train_log.jsonl" if out else None)
    ckpt = state.to_checkpoint()
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint")
    return ckpt
