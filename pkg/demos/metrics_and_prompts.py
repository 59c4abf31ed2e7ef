#!/usr/bin/env python3
# Score a short training run and probe how the text encoder reacts to
# corrupted prompts.
import numpy as np

from laekit.evaluation import OracleDepthEstimator, evaluate, perturb_prompt, prompt_bias_probe
from laekit.losses import cosine_similarity
from laekit.prompt import encode_text
from laekit.trainer import TrainConfig, train

state = train(TrainConfig(steps=50, seed=1))
report = evaluate(state, n_samples=32, depth_estimator=OracleDepthEstimator(blur=1))
for name in report.aa:
    print(f"{name:>12}: AA {report.aa[name]:+.3f}  AD {report.ad[name]:.3f}")
print("identity by |yaw| bucket:", {k: round(v, 4) for k, v in report.id_similarity.items()})
print(f"depth error {report.depth_error:.4f} (unedited {report.baseline_depth_error:.4f})")

enc = state.encoders.text
rng = np.random.default_rng(0)
clean = "orange hair"
for kind in ("CD", "WI", "OCR"):
    noisy = perturb_prompt(clean, kind, rng)
    sim = float(cosine_similarity(encode_text(clean, enc), encode_text(noisy, enc)))
    print(f"{kind:>3}: {noisy!r:24} cosine to clean prompt {sim:.3f}")

print("bias probe, male vs female prompt groups:",
      round(prompt_bias_probe(["a man", "a male face"], ["a woman", "a female face"], enc), 4))
