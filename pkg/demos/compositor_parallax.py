#!/usr/bin/env python3
# Two planes, one texture: watch the near plane slide further than the far one
# as the camera yaws.
import math

import numpy as np
import torch

from laekit.core import CameraPose, MultiplaneImage, composite_mpi

size = 16
rng = np.random.default_rng(0)
texture = torch.from_numpy(rng.uniform(size=(size, size, 3)))

# a small opaque square on the near plane, a half-transparent wash on the far one
alphas = torch.zeros(2, size, size, 1, dtype=torch.float64)
alphas[0, 6:10, 6:10] = 1.0
alphas[1] = 0.5
mpi = MultiplaneImage(texture, alphas, torch.tensor([0.95, 1.12], dtype=torch.float64))

for yaw in (-30, -15, 0, 15, 30):
    out = composite_mpi(mpi, CameraPose(yaw, 0), parallax=4.0)
    # column centre of mass of the near square shows the parallax shift
    near_depth = (out.depth < 1.0).double()
    cols = near_depth.sum(0)
    centre = float((cols * torch.arange(size)).sum() / cols.sum())
    expected = 7.5 + 4.0 * math.tan(math.radians(yaw)) / 0.95
    print(f"yaw {yaw:+3d}: near square centred at column {centre:5.2f} (shift model says {expected:5.2f})")

# fully opaque front plane: the texture comes back unchanged at the frontal pose
opaque = MultiplaneImage(texture, torch.ones(1, size, size, 1, dtype=torch.float64),
                         torch.tensor([1.0], dtype=torch.float64))
print("opaque frontal render equals texture:", torch.equal(composite_mpi(opaque, CameraPose()).pixels, texture))
