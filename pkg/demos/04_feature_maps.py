"""
Watching a bend act on internal representations
===============================================

Captures the mid-block conv output at every denoising step, both before and
after bending, and writes two grids: the evolving raw feature map and the
bent one. Pairing the two rows shows exactly what the operator did inside
the network. Output: demos/out/feature_maps_{pre,post}.png
"""

import os

import numpy as np

from bendlab import (
    BendSession,
    BendSpec,
    GenerationParams,
    ReductionSpec,
    StepSchedule,
    build_toy_pipeline,
    make_grid,
    make_operator,
    normalize_to_image,
    reduce_channels,
    write_png,
)

os.makedirs("demos/out", exist_ok=True)
LAYER = "diffusion_model.middle_block.0.in_layers"

session = BendSession(build_toy_pipeline(init_seed=1))
session.install_bend(BendSpec(
    id="dilate",
    component_id="unet",
    targets=(LAYER,),
    operator=make_operator("dilate", kernel=3),
))
session.generate(GenerationParams(prompt="geometry dissolving", seed=4, steps=10, cfg=2.0))

for phase in ("pre_bend", "post_bend"):
    # one capture per step per forward pass; keep the conditional pass only
    captures = [c for c in session.capture_activation(LAYER, phase=phase)
                if c.forward_index == 1]
    tiles = [normalize_to_image(reduce_channels(c.tensor, ReductionSpec("abs_mean"))[0])
             for c in captures]
    big = [np.kron(t, np.ones((6, 6), dtype=np.uint8)) for t in tiles]
    out = f"demos/out/feature_maps_{phase.split('_')[0]}.png"
    write_png(make_grid(big, columns=5), out)
    print(f"{phase}: {len(tiles)} steps -> {out}")

print("compare the two grids tile by tile: dilation brightens and thickens blobs")
