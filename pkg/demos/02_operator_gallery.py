"""
The bending-operator gallery
============================

Applies each operator kind to one real activation captured from a generation
and writes a labeled grid so you can eyeball what each transform does to a
feature map. Output: demos/out/operator_gallery.png
"""

import os

import numpy as np

from bendlab import (
    BendSession,
    GenerationParams,
    InvocationContext,
    LayerPath,
    ReductionSpec,
    apply_operator,
    build_toy_pipeline,
    make_grid,
    make_operator,
    normalize_to_image,
    reduce_channels,
    write_png,
)

os.makedirs("demos/out", exist_ok=True)

# Grab a real mid-network activation to play with.
session = BendSession(build_toy_pipeline(init_seed=1))
session.generate(GenerationParams(prompt="a storm over the sea", seed=9, steps=6, cfg=2.0))
activation = session.capture_activation("diffusion_model.middle_block.0.in_layers")[6].tensor

operators = [
    ("original", None),
    ("add_scalar", make_operator("add_scalar", c=1.5)),
    ("mul_scalar", make_operator("mul_scalar", c=-1.0)),
    ("add_noise", make_operator("add_noise", sigma=1.0)),
    ("rotate 90", make_operator("rotate", theta_deg=90.0, interpolation="nearest")),
    ("rotate 30 @ mix .5", make_operator("rotate", theta_deg=30.0, mix=0.5)),
    ("scale x2", make_operator("scale_spatial", factor=2.0)),
    ("scale x0.5", make_operator("scale_spatial", factor=0.5)),
    ("erode 3", make_operator("erode", kernel=3)),
    ("dilate 3", make_operator("dilate", kernel=3)),
    ("threshold 0", make_operator("threshold", t=0.0)),
    ("erode then noise", make_operator("compose", ops=[
        make_operator("erode", kernel=3),
        make_operator("add_noise", sigma=0.5, mix=0.6),
    ])),
]

ctx = InvocationContext(step_index=0, base_seed=9,
                        target_path=LayerPath.parse("diffusion_model.middle_block.0.in_layers"))
tiles = []
for label, op in operators:
    bent = activation if op is None else apply_operator(op, activation, ctx)
    tiles.append(normalize_to_image(reduce_channels(bent, ReductionSpec("mean"))[0]))
    print(f"{label:>20}: range [{bent.min():+.2f}, {bent.max():+.2f}]")

grid = make_grid([np.kron(t, np.ones((8, 8), dtype=np.uint8)) for t in tiles], columns=4)
write_png(grid, "demos/out/operator_gallery.png")
print("\nwrote demos/out/operator_gallery.png (row-major, same order as printed)")
