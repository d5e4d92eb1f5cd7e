"""bendlab: a model-bending studio for a desk-scale latent-diffusion pipeline.

Expose model internals (layers, activations, embeddings, adapter weights) as
addressable, manipulable material: install bending operators at named layers
and denoising steps, inspect feature maps, and iterate.
"""

from .errors import BendlabError
from .featureviz import ReductionSpec, make_grid, normalize_to_image, reduce_channels, write_png
from .hooks import BendSession, BendSpec, FeatureMapCapture, HookHandle, StepSchedule
from .model_graph import (
    LayerPath,
    ModelTree,
    ModuleNode,
    build_model_tree,
    list_bendable_layers,
    match_paths,
    resolve_path,
    tree_from_json,
    tree_to_json,
)
from .operators import (
    BendingOperator,
    InvocationContext,
    add_noise,
    apply_operator,
    bend_lora,
    compose,
    make_operator,
    morphology,
    rotate_spatial,
    scale_spatial,
)
from .pipeline import (
    ConditioningEdit,
    GenerationParams,
    Pipeline,
    apply_conditioning_edit,
    build_toy_pipeline,
    encode_prompt,
    wrap_backend,
)
from .recipes import Recipe, load_recipe, parse_recipe, save_recipe, serialize_recipe

__version__ = "0.1.0"

__all__ = [
    "BendlabError",
    "BendSession",
    "BendSpec",
    "BendingOperator",
    "ConditioningEdit",
    "FeatureMapCapture",
    "GenerationParams",
    "HookHandle",
    "InvocationContext",
    "LayerPath",
    "ModelTree",
    "ModuleNode",
    "Pipeline",
    "Recipe",
    "ReductionSpec",
    "StepSchedule",
    "add_noise",
    "apply_conditioning_edit",
    "apply_operator",
    "bend_lora",
    "build_model_tree",
    "build_toy_pipeline",
    "compose",
    "encode_prompt",
    "list_bendable_layers",
    "load_recipe",
    "make_grid",
    "make_operator",
    "match_paths",
    "morphology",
    "normalize_to_image",
    "parse_recipe",
    "reduce_channels",
    "resolve_path",
    "rotate_spatial",
    "save_recipe",
    "scale_spatial",
    "serialize_recipe",
    "tree_from_json",
    "tree_to_json",
    "wrap_backend",
    "write_png",
]
