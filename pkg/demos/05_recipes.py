"""
Recipes: reproducible, shareable bend bundles
=============================================

A recipe bundles bends + conditioning edits + generation parameters into one
canonical JSON document. This script builds one, saves it, reloads it, and
proves the replay is byte-identical. Output: demos/out/storm.recipe.json
"""

import os

from bendlab import (
    BendSession,
    BendSpec,
    ConditioningEdit,
    GenerationParams,
    Recipe,
    StepSchedule,
    build_toy_pipeline,
    load_recipe,
    make_operator,
    save_recipe,
)
from bendlab.featureviz import png_bytes

os.makedirs("demos/out", exist_ok=True)

recipe = Recipe(
    generation=GenerationParams(prompt="storm study no. 3", seed=77, steps=12, cfg=3.0),
    bends=(
        BendSpec(id="soften", component_id="unet",
                 targets=("diffusion_model.**.in_layers",),   # glob: all 8 convs
                 operator=make_operator("erode", kernel=3, mix=0.4),
                 schedule=StepSchedule(((0, 5),))),
        BendSpec(id="shimmer", component_id="vae",
                 targets=("vae.decoder.1.in_layers",),
                 operator=make_operator("add_noise", sigma=0.3)),
    ),
    conditioning_edits=(
        ConditioningEdit("interpolate", {"other_prompt": "calm morning light", "t": 0.25}),
    ),
)

save_recipe(recipe, "demos/out/storm.recipe.json")
print("wrote demos/out/storm.recipe.json")


def replay(r: Recipe) -> bytes:
    session = BendSession(build_toy_pipeline(init_seed=1))
    for spec in r.bends:
        session.install_bend(spec)
    session.set_conditioning_edits(r.conditioning_edits)
    image, report = session.generate(r.generation)
    print("  invocations:", report["bend_invocations"])
    return png_bytes(image)


first = replay(recipe)
second = replay(load_recipe("demos/out/storm.recipe.json"))
print("replay from disk is byte-identical:", first == second)

# The CLI speaks the same format:
#   bendlab recipe-validate demos/out/storm.recipe.json
#   bendlab generate --recipe demos/out/storm.recipe.json --out storm.png
