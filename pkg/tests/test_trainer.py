import json

import numpy as np
import pytest
import torch

from laekit.checkpoint import load_checkpoint, save_checkpoint
from laekit.errors import ConfigError, NonFiniteLossError
from laekit.losses import LossBreakdown, LossWeights
from laekit.trainer import TrainConfig, TrainState, train, train_attribute_set, train_step


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (1e-3, 0.9, 0.95, 1e-8)
    assert cfg.weights == LossWeights(1.0, 0.8, 0.8, 0.5, 0.5, 0.5)
    assert cfg.yaw_range == (-30.0, 30.0) and cfg.pitch_range == (-20.0, 20.0)
    assert len(cfg.attributes) == 3 and cfg.grad_clip is None


def test_config_json_roundtrip(tmp_path):
    cfg = TrainConfig(seed=5, weights=LossWeights(sc=0.0), yaw_range=(-10.0, 10.0))
    back = TrainConfig.from_json(cfg.to_json(tmp_path / "c.json"))
    assert back == cfg


def test_overrides():
    cfg = TrainConfig().with_overrides(["steps=7", "weights.sc=0", "system_prompt=a face", 'attributes=["x","y"]'])
    assert cfg.steps == 7 and cfg.weights.sc == 0 and cfg.system_prompt == "a face" and cfg.attributes == ["x", "y"]
    for bad in (["nokey=1"], ["weights.nope=1"], ["steps"], ["weights.sc=-1"]):
        with pytest.raises(ConfigError):
            TrainConfig().with_overrides(bad).validate()


@pytest.mark.parametrize("field,value", [("steps", 0), ("lr", -1.0), ("beta2", 1.0), ("backbone", "nerf"),
                                         ("attributes", []), ("yaw_range", (10.0, -10.0)), ("idvc_reference", "x")])
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value}).validate()


def test_step_updates_only_trainable_parts():
    st = TrainState(TrainConfig(steps=1, batch_latents=2))
    before = {k: p.detach().clone() for k, p in st.named_parameters().items()}
    frozen = st.frozen_fingerprint()
    original = st.backbone.generator.original_alpha_branch.weight.clone()
    st, losses = train_step(st)
    assert st.step == 1
    assert all(not torch.equal(before[k], p) for k, p in st.named_parameters().items())
    assert st.frozen_fingerprint() == frozen
    assert torch.equal(st.backbone.generator.original_alpha_branch.weight, original)
    assert set(losses.to_dict()) == {"dclip", "sc", "id", "idvc", "latent", "alpha", "total"}


def test_zero_edit_losses_are_exact(zero_edit_state):
    st = zero_edit_state
    w = st.sample_latents(np.random.default_rng(0), 3)
    assert torch.equal(st.edit(w), w.unsqueeze(0).expand(3, -1, -1, -1))
    losses = st.compute_losses(st.sample_batch(np.random.default_rng(1))).to_dict()
    assert losses["latent"] == 0.0
    assert losses["id"] == 0.0


def test_non_finite_loss_aborts(monkeypatch):
    st = TrainState(TrainConfig(steps=1, batch_latents=1))
    nan = torch.tensor(float("nan"), requires_grad=True)

    def broken(batch):
        z = torch.zeros((), requires_grad=True)
        return LossBreakdown(dclip=z, sc=z, id=nan, idvc=z, latent=z, alpha=z, total=nan)

    monkeypatch.setattr(st, "compute_losses", broken)
    with pytest.raises(NonFiniteLossError) as info:
        train_step(st)
    assert info.value.term == "id"


def test_log_lines(tmp_path):
    log = tmp_path / "log.jsonl"
    train(TrainConfig(steps=3, batch_latents=1), log_path=log)
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3]
    assert set(lines[0]) == {"step", "dclip", "sc", "id", "idvc", "latent", "alpha", "total"}


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = TrainConfig(steps=4, batch_latents=1, seed=3)
    straight = train(cfg)
    half = train(TrainConfig(steps=2, batch_latents=1, seed=3))
    save_checkpoint(half, tmp_path / "ck")
    resumed = TrainState.from_checkpoint(load_checkpoint(tmp_path / "ck"))
    resumed.config.steps = 2
    resumed = train(resumed.config, state=resumed)
    for name, p in straight.named_parameters().items():
        assert torch.equal(p, resumed.named_parameters()[name]), name


def test_single_attribute_and_options_run():
    for cfg in (
        TrainConfig(steps=1, batch_latents=1, attributes=["smile"]),
        TrainConfig(steps=1, batch_latents=1, idvc_reference="original", grad_clip=0.5, m=2),
    ):
        st = train(cfg)
        assert st.step == 1


def test_train_attribute_set_writes_outputs(tmp_path):
    ckpt = train_attribute_set(TrainConfig(steps=2, batch_latents=1), tmp_path / "run")
    assert (tmp_path / "run" / "train_log.jsonl").is_file()
    back = load_checkpoint(tmp_path / "run" / "checkpoint")
    assert back.step == ckpt.step == 2
    assert back.attribute_names == ["blond hair", "smile", "old"]
    assert back.config["batch_latents"] == 1
    assert back.arrays["tokens"].shape == (3, 1, 32)
