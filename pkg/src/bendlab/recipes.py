"""Recipe persistence: canonical, versioned JSON for bends + edits + params.

Serialization is canonical (sorted keys, shortest round-trip floats, UTF-8,
newline-terminated) so structurally equal recipes are byte-equal, which makes
shared recipes diff- and hash-friendly. Parsing is strict: unknown keys,
unknown operator kinds and bad ranges are rejected with a located error, and
an unsupported version names the supported set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import (
    OperatorParamError,
    PathSyntaxError,
    PatternSyntaxError,
    SchemaError,
    VersionError,
)
from .hooks import BendSpec, StepSchedule
from .model_graph import COMPONENT_IDS, LayerPath, is_pattern, parse_pattern
from .operators import OPERATOR_KINDS, BendingOperator
from .pipeline import EDIT_KINDS, ConditioningEdit, GenerationParams

RECIPE_VERSION = 1
SUPPORTED_VERSIONS = (1,)


@dataclass
class Recipe:
    """A shareable bundle that reproduces a generation."""

    generation: GenerationParams
    bends: tuple[BendSpec, ...] = ()
    conditioning_edits: tuple[ConditioningEdit, ...] = ()
    version: int = RECIPE_VERSION

    def __post_init__(self):
        if self.version not in SUPPORTED_VERSIONS:
            raise VersionError(self.version, SUPPORTED_VERSIONS)
        self.bends = tuple(self.bends)
        self.conditioning_edits = tuple(self.conditioning_edits)
        ids = [b.id for b in self.bends]
        if len(ids) != len(set(ids)):
            raise ValueError("bend ids must be unique within a recipe")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _operator_to_dict(op: BendingOperator) -> dict:
    if op.kind == "compose":
        return {"kind": "compose", "mix": float(op.mix),
                "ops": [_operator_to_dict(c) for c in op.ops]}
    return {"kind": op.kind, "mix": float(op.mix), "params": dict(op.params)}


def _bend_to_dict(spec: BendSpec) -> dict:
    return {
        "id": spec.id,
        "component": spec.component_id,
        "targets": list(spec.targets),
        "operator": _operator_to_dict(spec.operator),
        "schedule": {"ranges": [[lo, hi] for lo, hi in spec.schedule.ranges]},
        "enabled": bool(spec.enabled),
    }


def _edit_to_dict(edit: ConditioningEdit) -> dict:
    return {"kind": edit.kind, **edit.params}


def _generation_to_dict(params: GenerationParams) -> dict:
    return {
        "prompt": params.prompt,
        "negative_prompt": params.negative_prompt,
        "seed": int(params.seed),
        "steps": int(params.steps),
        "cfg": float(params.cfg),
        "sampler_id": params.sampler_id,
        "scheduler_id": params.scheduler_id,
        "latent_shape": [int(d) for d in params.latent_shape],
    }


def serialize_recipe(recipe: Recipe) -> str:
    """Canonical text form; stable byte-for-byte across runs."""
    doc = {
        "version": recipe.version,
        "bends": [_bend_to_dict(b) for b in recipe.bends],
        "conditioning_edits": [_edit_to_dict(e) for e in recipe.conditioning_edits],
        "generation": _generation_to_dict(recipe.generation),
    }
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Strict parsing
# ---------------------------------------------------------------------------

def _expect_keys(obj: dict, required: set[str], location: str,
                 optional: set[str] = frozenset()) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(location, f"expected an object, got {type(obj).__name__}")
    missing = required - set(obj)
    if missing:
        raise SchemaError(location, f"missing keys: {sorted(missing)}")
    unknown = set(obj) - required - optional
    if unknown:
        raise SchemaError(location, f"unknown keys: {sorted(unknown)}")


def _expect_int(value, location: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(location, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise SchemaError(location, f"expected >= {minimum}, got {value}")
    return value


def _expect_number(value, location: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(location, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise SchemaError(location, f"expected a finite number, got {value!r}")
    return float(value)


def _expect_str(value, location: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(location, f"expected a string, got {value!r}")
    return value


def _parse_operator(obj, location: str) -> BendingOperator:
    if not isinstance(obj, dict):
        raise SchemaError(location, "operator must be an object")
    kind = obj.get("kind")
    if kind is None:
        raise SchemaError(location, "operator needs a 'kind'")
    if kind not in OPERATOR_KINDS:
        raise SchemaError(f"{location}.kind", f"unknown operator kind {kind!r}")
    mix = _expect_number(obj.get("mix", 1.0), f"{location}.mix")
    if kind == "compose":
        _expect_keys(obj, {"kind", "ops"}, location, optional={"mix"})
        ops_raw = obj["ops"]
        if not isinstance(ops_raw, list) or not ops_raw:
            raise SchemaError(f"{location}.ops", "compose needs a non-empty operator list")
        children = tuple(_parse_operator(c, f"{location}.ops[{i}]")
                         for i, c in enumerate(ops_raw))
        try:
            return BendingOperator(kind="compose", mix=mix, ops=children)
        except OperatorParamError as err:
            raise SchemaError(location, str(err)) from err
    _expect_keys(obj, {"kind", "params"}, location, optional={"mix"})
    params = obj["params"]
    if not isinstance(params, dict):
        raise SchemaError(f"{location}.params", "params must be an object")
    try:
        return BendingOperator(kind=kind, params=dict(params), mix=mix)
    except OperatorParamError as err:
        raise SchemaError(f"{location}.params", str(err)) from err


def _parse_schedule(obj, location: str) -> StepSchedule:
    _expect_keys(obj, {"ranges"}, location)
    raw = obj["ranges"]
    if not isinstance(raw, list):
        raise SchemaError(f"{location}.ranges", "ranges must be a list of [lo, hi] pairs")
    ranges = []
    for i, pair in enumerate(raw):
        loc = f"{location}.ranges[{i}]"
        if not isinstance(pair, list) or len(pair) != 2:
            raise SchemaError(loc, "a range is a [lo, hi] pair")
        lo = _expect_int(pair[0], loc, minimum=0)
        hi = _expect_int(pair[1], loc, minimum=0)
        if lo > hi:
            raise SchemaError(loc, f"range lo {lo} exceeds hi {hi}")
        ranges.append((lo, hi))
    return StepSchedule(tuple(ranges))


def bend_from_dict(obj, location: str = "bend") -> BendSpec:
    """Validate one bend object (also used by the service)."""
    _expect_keys(obj, {"id", "component", "targets", "operator", "schedule", "enabled"}, location)
    bend_id = _expect_str(obj["id"], f"{location}.id")
    if not bend_id:
        raise SchemaError(f"{location}.id", "bend id must be non-empty")
    component = _expect_str(obj["component"], f"{location}.component")
    if component not in COMPONENT_IDS:
        raise SchemaError(f"{location}.component", f"unknown component {component!r}")
    targets_raw = obj["targets"]
    if not isinstance(targets_raw, list) or not targets_raw:
        raise SchemaError(f"{location}.targets", "targets must be a non-empty list")
    targets = []
    for i, target in enumerate(targets_raw):
        loc = f"{location}.targets[{i}]"
        text = _expect_str(target, loc)
        try:
            if is_pattern(text):
                parse_pattern(text)
            else:
                LayerPath.parse(text)
        except (PathSyntaxError, PatternSyntaxError) as err:
            raise SchemaError(loc, str(err)) from err
        targets.append(text)
    enabled = obj["enabled"]
    if not isinstance(enabled, bool):
        raise SchemaError(f"{location}.enabled", f"expected a boolean, got {enabled!r}")
    return BendSpec(
        id=bend_id,
        component_id=component,
        targets=tuple(targets),
        operator=_parse_operator(obj["operator"], f"{location}.operator"),
        schedule=_parse_schedule(obj["schedule"], f"{location}.schedule"),
        enabled=enabled,
    )


def edit_from_dict(obj, location: str = "conditioning_edit") -> ConditioningEdit:
    """Validate one conditioning-edit object (also used by the service)."""
    if not isinstance(obj, dict):
        raise SchemaError(location, "conditioning edit must be an object")
    kind = obj.get("kind")
    if kind not in EDIT_KINDS:
        raise SchemaError(f"{location}.kind", f"unknown conditioning edit kind {kind!r}")
    if kind == "perturb":
        _expect_keys(obj, {"kind", "sigma", "edit_seed"}, location)
        sigma = _expect_number(obj["sigma"], f"{location}.sigma")
        if sigma < 0:
            raise SchemaError(f"{location}.sigma", "sigma must be >= 0")
        return ConditioningEdit("perturb", {
            "sigma": sigma,
            "edit_seed": _expect_int(obj["edit_seed"], f"{location}.edit_seed"),
        })
    if kind == "interpolate":
        _expect_keys(obj, {"kind", "other_prompt", "t"}, location)
        t = _expect_number(obj["t"], f"{location}.t")
        if not 0.0 <= t <= 1.0:
            raise SchemaError(f"{location}.t", f"t must be in [0, 1], got {t}")
        return ConditioningEdit("interpolate", {
            "other_prompt": _expect_str(obj["other_prompt"], f"{location}.other_prompt"),
            "t": t,
        })
    if kind == "scale":
        _expect_keys(obj, {"kind", "factor"}, location)
        return ConditioningEdit("scale", {"factor": _expect_number(obj["factor"], f"{location}.factor")})
    # offset
    _expect_keys(obj, {"kind", "direction"}, location)
    direction = obj["direction"]
    if not isinstance(direction, list) or not direction:
        raise SchemaError(f"{location}.direction", "direction must be a non-empty number list")
    values = [_expect_number(v, f"{location}.direction[{i}]") for i, v in enumerate(direction)]
    return ConditioningEdit("offset", {"direction": values})


def generation_from_dict(obj, location: str = "generation") -> GenerationParams:
    """Validate one generation-params object (also used by the service)."""
    _expect_keys(obj, {"prompt", "negative_prompt", "seed", "steps", "cfg",
                       "sampler_id", "scheduler_id", "latent_shape"}, location)
    negative = obj["negative_prompt"]
    if negative is not None:
        negative = _expect_str(negative, f"{location}.negative_prompt")
    shape = obj["latent_shape"]
    if not isinstance(shape, list) or len(shape) != 4:
        raise SchemaError(f"{location}.latent_shape", "latent_shape must be a 4-int list")
    dims = tuple(_expect_int(d, f"{location}.latent_shape[{i}]", minimum=1)
                 for i, d in enumerate(shape))
    cfg = _expect_number(obj["cfg"], f"{location}.cfg")
    if cfg < 0:
        raise SchemaError(f"{location}.cfg", "cfg must be >= 0")
    return GenerationParams(
        prompt=_expect_str(obj["prompt"], f"{location}.prompt"),
        negative_prompt=negative,
        seed=_expect_int(obj["seed"], f"{location}.seed"),
        steps=_expect_int(obj["steps"], f"{location}.steps", minimum=1),
        cfg=cfg,
        sampler_id=_expect_str(obj["sampler_id"], f"{location}.sampler_id"),
        scheduler_id=_expect_str(obj["scheduler_id"], f"{location}.scheduler_id"),
        latent_shape=dims,
    )


def parse_recipe(text: str) -> Recipe:
    """Strictly validate recipe text; inverse of serialize_recipe."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise SchemaError("$", f"not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise SchemaError("$", "recipe must be a JSON object")
    if "version" not in doc:
        raise SchemaError("$.version", "missing version")
    version = doc["version"]
    if isinstance(version, bool) or not isinstance(version, int):
        raise SchemaError("$.version", f"version must be an integer, got {version!r}")
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(version, SUPPORTED_VERSIONS)
    _expect_keys(doc, {"version", "bends", "conditioning_edits", "generation"}, "$")
    bends_raw = doc["bends"]
    if not isinstance(bends_raw, list):
        raise SchemaError("$.bends", "bends must be a list")
    bends = [bend_from_dict(b, f"$.bends[{i}]") for i, b in enumerate(bends_raw)]
    ids = [b.id for b in bends]
    if len(ids) != len(set(ids)):
        raise SchemaError("$.bends", "bend ids must be unique")
    edits_raw = doc["conditioning_edits"]
    if not isinstance(edits_raw, list):
        raise SchemaError("$.conditioning_edits", "conditioning_edits must be a list")
    edits = [edit_from_dict(e, f"$.conditioning_edits[{i}]") for i, e in enumerate(edits_raw)]
    generation = generation_from_dict(doc["generation"], "$.generation")
    return Recipe(version=version, bends=tuple(bends),
                  conditioning_edits=tuple(edits), generation=generation)


def load_recipe(path) -> Recipe:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_recipe(fh.read())


def save_recipe(recipe: Recipe, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(serialize_recipe(recipe))
