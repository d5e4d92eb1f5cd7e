"""Model-architecture introspection: layer paths, module trees, glob selection.

A model is presented as a tree of named modules. Every node is addressable by
a dotted path whose first segment is the root's name, e.g.
``diffusion_model.middle_block.0.in_layers``. Integer segments index into a
parent's children by position; name segments match child names.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import PathNotFound, PathSyntaxError, PatternSyntaxError

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_INT_RE = re.compile(r"[0-9]+\Z")

KINDS = ("container", "conv", "nonlinearity", "normalization", "attention", "embedding", "other")
BENDABLE_KINDS = frozenset({"conv", "attention", "normalization", "nonlinearity"})
COMPONENT_IDS = ("unet", "vae", "text_encoder")


# ---------------------------------------------------------------------------
# Layer paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerPath:
    """Dotted address of a module inside a model graph.

    Segments are name tokens or non-negative integer indices; the canonical
    text form joins them with '.'.
    """

    segments: tuple[str | int, ...]

    def __post_init__(self):
        if not self.segments:
            raise PathSyntaxError("layer path must have at least one segment")
        for seg in self.segments:
            if isinstance(seg, int):
                if seg < 0:
                    raise PathSyntaxError(f"negative index segment: {seg}")
            elif not _NAME_RE.match(seg):
                raise PathSyntaxError(f"bad path segment: {seg!r}")

    @classmethod
    def parse(cls, text: str) -> "LayerPath":
        if not text:
            raise PathSyntaxError("empty path")
        segments: list[str | int] = []
        for raw in text.split("."):
            if not raw:
                raise PathSyntaxError(f"empty segment in path {text!r}")
            if _INT_RE.match(raw):
                segments.append(int(raw))
            elif _NAME_RE.match(raw):
                segments.append(raw)
            else:
                raise PathSyntaxError(f"bad segment {raw!r} in path {text!r}")
        return cls(tuple(segments))

    def text(self) -> str:
        return ".".join(str(seg) for seg in self.segments)

    def __str__(self) -> str:
        return self.text()


def is_pattern(text: str) -> bool:
    """True if the string uses glob segments and is not a plain path."""
    return "*" in text


def parse_pattern(text: str) -> tuple[str, ...]:
    """Validate a '.'-separated glob pattern into its segment tuple.

    A segment is a literal name/index, '*' (exactly one segment) or '**'
    (any run of segments, possibly empty).
    """
    if not text:
        raise PatternSyntaxError("empty pattern")
    segments = []
    for raw in text.split("."):
        if not raw:
            raise PatternSyntaxError(f"empty segment in pattern {text!r}")
        if raw in ("*", "**") or _NAME_RE.match(raw) or _INT_RE.match(raw):
            segments.append(raw)
        else:
            raise PatternSyntaxError(f"bad pattern segment {raw!r} in {text!r}")
    return tuple(segments)


def _pattern_matches(pattern: tuple[str, ...], segments: tuple[str, ...]) -> bool:
    """Segment-list glob match; '**' may span zero or more segments."""
    if not pattern:
        return not segments
    head, rest = pattern[0], pattern[1:]
    if head == "**":
        # Try consuming 0..len(segments) path segments.
        return any(_pattern_matches(rest, segments[i:]) for i in range(len(segments) + 1))
    if not segments:
        return False
    if head == "*" or head == segments[0]:
        return _pattern_matches(rest, segments[1:])
    return False


# ---------------------------------------------------------------------------
# Tree model
# ---------------------------------------------------------------------------

@dataclass
class ModuleNode:
    """One module in the introspected tree."""

    name: str
    kind: str
    children: list["ModuleNode"] = field(default_factory=list)
    param_shapes: list[list[int]] | None = None

    @property
    def bendable(self) -> bool:
        return self.kind in BENDABLE_KINDS

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown module kind {self.kind!r}")
        if (self.kind == "container") != bool(self.children):
            raise ValueError(
                f"node {self.name!r}: kind/children mismatch "
                f"(containers and only containers have children)"
            )
        names = [c.name for c in self.children]
        if len(names) != len(set(names)):
            raise ValueError(f"node {self.name!r}: duplicate child names")
        for child in self.children:
            child.validate()


@dataclass
class ModelTree:
    """An introspected component (unet / vae / text_encoder)."""

    root: ModuleNode
    component_id: str
    node_count: int

    def __post_init__(self):
        if self.component_id not in COMPONENT_IDS:
            raise ValueError(f"unknown component_id {self.component_id!r}")


def _count_nodes(node: ModuleNode) -> int:
    return 1 + sum(_count_nodes(c) for c in node.children)


def build_model_tree(model) -> ModelTree:
    """Introspect a backend model handle into a ModelTree.

    The handle must expose ``enumerate_submodules(component_id)`` (the
    backend-adapter contract); any object with ``spec()``/``component_id``
    attributes (a single toy component) also works.
    """
    from .errors import AdapterError

    if hasattr(model, "spec") and hasattr(model, "component_id"):
        spec = model.spec()
        component_id = model.component_id
    else:
        raise AdapterError("enumerate_submodules", "model handle cannot enumerate submodules")
    root = _node_from_spec(spec)
    root.validate()
    return ModelTree(root=root, component_id=component_id, node_count=_count_nodes(root))


def tree_from_adapter(adapter, component_id: str) -> ModelTree:
    """Build a ModelTree through the adapter contract."""
    spec = adapter.enumerate_submodules(component_id)
    root = _node_from_spec(spec)
    root.validate()
    return ModelTree(root=root, component_id=component_id, node_count=_count_nodes(root))


def _node_from_spec(spec) -> ModuleNode:
    name, kind, param_shapes, children = spec
    return ModuleNode(
        name=name,
        kind=kind,
        param_shapes=[list(s) for s in param_shapes] if param_shapes else None,
        children=[_node_from_spec(c) for c in children],
    )


# ---------------------------------------------------------------------------
# Path operations
# ---------------------------------------------------------------------------

def resolve_path(tree: ModelTree, path: LayerPath | str) -> ModuleNode:
    """Descend segment-by-segment from the root; the first segment names it.

    Integer segments index positionally into a node's children.
    """
    if isinstance(path, str):
        path = LayerPath.parse(path)
    first = path.segments[0]
    if str(first) != tree.root.name:
        raise PathNotFound(f"no node at segment {first!r} (tree root is {tree.root.name!r})")
    node = tree.root
    for seg in path.segments[1:]:
        if isinstance(seg, int):
            if seg >= len(node.children):
                raise PathNotFound(f"no node at segment {seg!r} under {node.name!r}")
            node = node.children[seg]
        else:
            for child in node.children:
                if child.name == seg:
                    node = child
                    break
            else:
                raise PathNotFound(f"no node at segment {seg!r} under {node.name!r}")
    return node


def iter_paths(tree: ModelTree):
    """Yield (LayerPath, ModuleNode) for every node in tree order."""

    def walk(node: ModuleNode, prefix: tuple[str | int, ...]):
        segment: str | int = int(node.name) if _INT_RE.match(node.name) else node.name
        path = LayerPath(prefix + (segment,))
        yield path, node
        for child in node.children:
            yield from walk(child, path.segments)

    yield from walk(tree.root, ())


def match_paths(tree: ModelTree, pattern: str) -> list[LayerPath]:
    """All node paths matching a glob pattern, in tree order."""
    segments = parse_pattern(pattern)
    out = []
    for path, _node in iter_paths(tree):
        if _pattern_matches(segments, tuple(str(s) for s in path.segments)):
            out.append(path)
    return out


def list_bendable_layers(tree: ModelTree, kind_filter: str | None = None) -> list[LayerPath]:
    """Paths of all bendable nodes, optionally restricted to one kind."""
    out = []
    for path, node in iter_paths(tree):
        if node.bendable and (kind_filter is None or node.kind == kind_filter):
            out.append(path)
    return out


# ---------------------------------------------------------------------------
# JSON form (feeds the inspector UI)
# ---------------------------------------------------------------------------

def _node_to_dict(node: ModuleNode) -> dict:
    return {
        "name": node.name,
        "kind": node.kind,
        "bendable": node.bendable,
        "param_shapes": node.param_shapes,
        "children": [_node_to_dict(c) for c in node.children],
    }


def _node_from_dict(obj: dict) -> ModuleNode:
    return ModuleNode(
        name=obj["name"],
        kind=obj["kind"],
        param_shapes=obj.get("param_shapes"),
        children=[_node_from_dict(c) for c in obj.get("children", [])],
    )


def tree_to_json(tree: ModelTree) -> str:
    return json.dumps(
        {
            "component_id": tree.component_id,
            "node_count": tree.node_count,
            "root": _node_to_dict(tree.root),
        },
        sort_keys=True,
    )


def tree_from_json(text: str) -> ModelTree:
    obj = json.loads(text)
    root = _node_from_dict(obj["root"])
    root.validate()
    return ModelTree(root=root, component_id=obj["component_id"], node_count=obj["node_count"])
