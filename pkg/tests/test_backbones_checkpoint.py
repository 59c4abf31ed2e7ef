import json

import numpy as np
import pytest
import torch

from laekit.backbones import (
    ToyDims,
    frozen_fingerprint,
    load_backbone,
    load_encoders,
    register_adapter,
    save_toy_backbone,
    stream,
    toy_backbone,
    toy_encoders,
)
from laekit.checkpoint import Checkpoint, load_checkpoint, read_manifest, save_checkpoint
from laekit.core import FRONTAL, CameraPose
from laekit.errors import (
    BackboneKindError,
    BackboneUnavailableError,
    CheckpointVersionError,
    CorruptCheckpointError,
)


def test_stream_is_reproducible_and_name_dependent():
    assert stream(3, "a").random() == stream(3, "a").random()
    assert stream(3, "a").random() != stream(3, "b").random()
    assert stream(3, "a").random() != stream(4, "a").random()


def test_toy_bundle_is_deterministic_per_seed():
    a, b, c = toy_backbone(7), toy_backbone(7), toy_backbone(8)
    ea, eb = toy_encoders(7), toy_encoders(7)
    assert frozen_fingerprint(a, ea) == frozen_fingerprint(b, eb)
    assert frozen_fingerprint(a, ea) != frozen_fingerprint(c, ea)


def test_toy_shapes(backbone):
    w = backbone.map(torch.randn(3, backbone.latent_dim))
    assert w.shape == (3, 12, 32)
    mpi = backbone.generate(w)
    assert mpi.color.shape == (3, 32, 32, 3)
    assert mpi.alphas.shape == (3, 4, 32, 32, 1)
    assert backbone.render(mpi, FRONTAL).pixels.shape == (3, 32, 32, 3)


def test_original_branch_is_frozen_copy(backbone):
    w = backbone.map(torch.randn(2, backbone.latent_dim))
    assert torch.equal(backbone.generate(w).alphas, backbone.generate(w, original=True).alphas)
    assert all(p.requires_grad for p in backbone.trainable_parameters())
    assert not any(t.requires_grad for t in backbone.frozen_tensors().values())
    assert "generator.original_alpha_branch.weight" in backbone.frozen_tensors()


def _central_difference(f, x, idx, h=1e-6):
    xp, xm = x.clone(), x.clone()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


@pytest.mark.parametrize("which", ["text", "image", "identity"])
def test_encoder_gradients_match_finite_differences(which):
    enc = getattr(toy_encoders(7), which).double()
    rng = np.random.default_rng(0)
    if which == "text":
        x = torch.from_numpy(rng.normal(0, 0.02, size=(9, enc.token_dim)))
    else:
        x = torch.from_numpy(rng.uniform(size=(32, 32, 3)))
    v = torch.from_numpy(rng.normal(size=enc(x).shape[-1]))

    def f(inp):
        return float((enc(inp) * v).sum())

    x_req = x.clone().requires_grad_(True)
    (enc(x_req) * v).sum().backward()
    for _ in range(6):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        fd = _central_difference(f, x, idx)
        assert abs(float(x_req.grad[idx]) - fd) <= 1e-5 * max(1.0, abs(fd))


def test_generator_and_render_gradient_matches_finite_differences():
    bb = toy_backbone(7)
    bb.mapping_network.double()
    bb.generator.double()
    rng = np.random.default_rng(1)
    w = bb.map(torch.from_numpy(rng.normal(size=(1, bb.latent_dim))))[0]
    v = torch.from_numpy(rng.normal(size=(32, 32, 3)))
    pose = CameraPose(12.0, -7.0)

    def f(inp):
        with torch.no_grad():
            return float((bb.render_codes(inp, pose) * v).sum())

    w_req = w.clone().requires_grad_(True)
    (bb.render_codes(w_req, pose) * v).sum().backward()
    for _ in range(6):
        idx = (int(rng.integers(12)), int(rng.integers(bb.latent_dim)))
        fd = _central_difference(f, w.detach(), idx)
        assert abs(float(w_req.grad[idx]) - fd) <= 1e-5 * max(1.0, abs(fd))


def test_identity_encoder_tolerates_small_shift_but_separates_faces(backbone, encoders):
    rng = np.random.default_rng(2)
    w = backbone.map(torch.from_numpy(rng.normal(size=(8, backbone.latent_dim)).astype(np.float32)))
    img = backbone.render_codes(w, FRONTAL, original=True)
    shifted = torch.roll(img, 1, dims=-2)
    e, es = encoders.identity(img), encoders.identity(shifted)
    assert float((e * es).sum(-1).min()) > 0.9
    cross = (e[:4] * e[4:]).sum(-1)
    assert float(cross.max()) < float((e * es).sum(-1).min())


def test_toy_export_roundtrip(tmp_path, backbone):
    path = save_toy_backbone(backbone, tmp_path / "toy.npz")
    loaded = load_backbone("toy", path)
    w = backbone.map(torch.randn(2, backbone.latent_dim))
    assert torch.equal(loaded.render_codes(w, FRONTAL), backbone.render_codes(w, FRONTAL))


def test_truncated_backbone_file_is_reported(tmp_path, backbone):
    path = save_toy_backbone(backbone, tmp_path / "toy.npz")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_backbone("toy", path)


def test_backbone_kind_mismatch(tmp_path, backbone):
    path = save_toy_backbone(backbone, tmp_path / "toy.npz")
    with pytest.raises(BackboneKindError):
        load_backbone("eg3d", path)


def test_real_backbones_need_adapter(tmp_path):
    path = tmp_path / "gmpi.pt"
    torch.save({"weight": torch.zeros(2)}, path)
    with pytest.raises(BackboneUnavailableError):
        load_backbone("gmpi", path)
    with pytest.raises(FileNotFoundError):
        load_backbone("eg3d")
    with pytest.raises(ValueError):
        load_backbone("nerf")
    with pytest.raises(BackboneUnavailableError):
        load_encoders("clip")


def test_registered_adapter_is_used(tmp_path):
    path = tmp_path / "cips.pt"
    torch.save({"weight": torch.zeros(2)}, path)

    def factory(state):
        bundle = toy_backbone(3)
        bundle.kind = "cips3d"
        return bundle

    register_adapter("cips3d", factory)
    assert load_backbone("cips3d", path).kind == "cips3d"


def _ckpt():
    rng = np.random.default_rng(5)
    return Checkpoint(
        arrays={"tokens": rng.normal(size=(3, 1, 8)).astype(np.float32), "mapper.coarse.bias": np.zeros(4, np.float32)},
        step=12,
        config={"seed": 1},
        attribute_names=["a", "b", "c"],
        rng_state={"k": 1},
    )


def test_checkpoint_roundtrip_and_manifest(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "ck")
    manifest = read_manifest(path)
    assert manifest["format_version"] == 1
    entry = next(e for e in manifest["arrays"] if e["name"] == "tokens")
    assert entry["dtype"] == "f32-le" and entry["offset"] == 0 and entry["nbytes"] == 3 * 8 * 4
    assert entry["shape"] == [3, 1, 8]
    back = load_checkpoint(path)
    assert back.step == 12 and back.attribute_names == ["a", "b", "c"] and back.rng_state == {"k": 1}
    for name, arr in _ckpt().arrays.items():
        assert np.array_equal(back.arrays[name], arr)


def test_checkpoint_overwrite_is_clean(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "ck")
    save_checkpoint(_ckpt(), tmp_path / "ck")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]


def test_crc_corruption_detected(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "ck")
    f = path / "tokens.f32"
    data = bytearray(f.read_bytes())
    data[5] ^= 0x01
    f.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError, match="CRC"):
        load_checkpoint(path)


def test_truncated_or_missing_array_detected(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "ck")
    f = path / "tokens.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(CorruptCheckpointError, match="truncated"):
        load_checkpoint(path)
    f.unlink()
    with pytest.raises(CorruptCheckpointError, match="missing"):
        load_checkpoint(path)


def test_manifest_version_and_corruption(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "ck")
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 2
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nowhere")


def test_toy_dims_default():
    d = ToyDims()
    assert (d.latent_dim, d.n_layers, d.image_size, d.n_planes) == (32, 12, 32, 4)
