#!/usr/bin/env python3
# Train three attribute edits on the toy backbone, then render a pose sweep
# of each one. Takes about 20 s on one CPU core.
import sys
from pathlib import Path

import torch

from laekit.backbones import stream
from laekit.core import pose_grid, write_pose_sweep
from laekit.trainer import TrainConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
cfg = TrainConfig(steps=200, seed=0)

history = []
state = train(cfg, log_path=None, callback=lambda st, losses: history.append(losses.to_dict()))

for step in (0, 49, 99, 199):
    h = history[step]
    print(f"step {step + 1:3d}  total {h['total']:7.3f}  dclip {h['dclip']:.3f}  sc {h['sc']:+.3f}  "
          f"id {h['id']:.4f}  latent {h['latent']:.3f}  alpha {h['alpha']:.2f}")

with torch.no_grad():
    w = state.sample_latents(stream(0, "demo"), 1)
    for attr in state.attributes:
        codes = state.edit(w, attr.name)
        renders = []
        for pose in pose_grid(cfg.yaw_range, cfg.pitch_range, 9):
            r = state.backbone.render(state.backbone.generate(codes), pose)
            r.pixels, r.depth = r.pixels[0], r.depth[0]
            renders.append(r)
        index = write_pose_sweep(renders, out / attr.name.replace(" ", "_"), attribute=attr.name)
        print("wrote", index)
