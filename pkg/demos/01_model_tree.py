"""
Inspecting the model tree
=========================

Every component of the pipeline (UNet, VAE, text encoder) is addressable as a
nested tree of named modules. This script walks the trees, resolves the
classic mid-block conv path, and shows glob selection over layer paths.
"""

from bendlab import build_toy_pipeline, list_bendable_layers, match_paths, resolve_path

pipeline = build_toy_pipeline(init_seed=1)

# Each component introspects into an immutable ModelTree.
for component in ("unet", "vae", "text_encoder"):
    tree = pipeline.model_tree(component)
    print(f"{component}: {tree.node_count} nodes, root {tree.root.name!r}")

# Dotted paths address any node; integer segments index into child lists.
tree = pipeline.model_tree("unet")
node = resolve_path(tree, "diffusion_model.middle_block.0.in_layers")
print(f"\nmid-block conv: kind={node.kind}, weights={node.param_shapes}")

# Globs select in bulk: '*' is one segment, '**' any run of segments.
convs = match_paths(tree, "diffusion_model.**.in_layers")
print(f"\nall {len(convs)} conv layers:")
for path in convs:
    print(" ", path)

# The bendable flag marks operator targets (containers are drill-down only).
print("\nbendable VAE layers:")
for path in list_bendable_layers(pipeline.model_tree("vae")):
    print(" ", path)
