"""
Bend a generation and compare against the baseline
==================================================

Installs a step-gated rotation on the mid-block conv, renders bent and
baseline images from the same seed, and writes them side by side.
Output: demos/out/compare.png plus the run report.
"""

import json
import os

import numpy as np

from bendlab import (
    BendSession,
    BendSpec,
    GenerationParams,
    StepSchedule,
    build_toy_pipeline,
    make_operator,
    write_png,
)

os.makedirs("demos/out", exist_ok=True)

params = GenerationParams(prompt="analog style portrait of a person", seed=42,
                          steps=20, cfg=7.0, sampler_id="dpmpp_2m", scheduler_id="karras")

baseline, _ = BendSession(build_toy_pipeline(init_seed=1)).generate(params)

session = BendSession(build_toy_pipeline(init_seed=1))
session.install_bend(BendSpec(
    id="rot45",
    component_id="unet",
    targets=("diffusion_model.middle_block.0.in_layers",),
    operator=make_operator("rotate", theta_deg=45.0, mix=0.8),
    schedule=StepSchedule(((0, 9),)),  # only the first half of the denoise
))
bent, report = session.generate(params)

print("run report:", json.dumps(report))
print("images differ:", not np.array_equal(baseline, bent))

gap = np.full((baseline.shape[0], 4, 3), 255, dtype=np.uint8)
side_by_side = np.concatenate([bent, gap, baseline], axis=1)  # bent left, baseline right
scaled = np.kron(side_by_side, np.ones((6, 6, 1), dtype=np.uint8))
write_png(scaled, "demos/out/compare.png")
print("wrote demos/out/compare.png (bent | baseline)")
