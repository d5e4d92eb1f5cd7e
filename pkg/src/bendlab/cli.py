"""Command-line surface: inspect trees, bend via a one-line DSL, generate.

Bend expressions pack a whole BendSpec into one shell token:

    component:path:op(k=v,...)[@lo-hi|@all][~mix]

e.g. ``unet:diffusion_model.middle_block.0.in_layers:rotate(theta_deg=45)@0-9~0.8``.
Exit codes: 0 ok, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

from .errors import (
    BadParamValue,
    BendlabError,
    OperatorParamError,
    ParseError,
    PathSyntaxError,
    PatternSyntaxError,
    SchemaError,
    UnknownOperator,
    VersionError,
    PathNotFound,
    NotBendable,
    DuplicateId,
)
from .featureviz import ReductionSpec, make_grid, normalize_to_image, reduce_channels, write_png
from .hooks import BendSession, BendSpec, StepSchedule
from .model_graph import (
    COMPONENT_IDS,
    LayerPath,
    is_pattern,
    list_bendable_layers,
    parse_pattern,
    tree_to_json,
)
from .operators import OPERATOR_KINDS, BendingOperator
from .pipeline import GenerationParams, build_toy_pipeline
from .recipes import Recipe, load_recipe, serialize_recipe

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"[-+]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][-+]?[0-9]+)?")
_INT_RE = re.compile(r"[0-9]+")

_VALIDATION_ERRORS = (
    ParseError, UnknownOperator, BadParamValue, SchemaError, VersionError,
    PathSyntaxError, PatternSyntaxError, PathNotFound, NotBendable,
    OperatorParamError, DuplicateId, ValueError,
)


# ---------------------------------------------------------------------------
# Bend-expression DSL
# ---------------------------------------------------------------------------

def parse_bend_expression(text: str, bend_id: str = "bend") -> BendSpec:
    """Parse one bend expression into a BendSpec (id is caller-assigned)."""
    first = text.find(":")
    if first < 0:
        raise ParseError(len(text), "expected ':' after the component name")
    component = text[:first]
    if component not in COMPONENT_IDS:
        raise ParseError(0, f"unknown component {component!r} (expected one of {COMPONENT_IDS})")
    second = text.find(":", first + 1)
    if second < 0:
        raise ParseError(len(text), "expected ':' after the layer path")
    path_text = text[first + 1:second]
    if not path_text:
        raise ParseError(first + 1, "empty layer path")
    try:
        if is_pattern(path_text):
            parse_pattern(path_text)
        else:
            LayerPath.parse(path_text)
    except (PathSyntaxError, PatternSyntaxError) as err:
        raise ParseError(first + 1, str(err)) from err

    rest = text[second + 1:]
    base = second + 1
    name_match = _IDENT_RE.match(rest)
    if not name_match:
        raise ParseError(base, "expected an operator name")
    op_name = name_match.group(0)
    pos = name_match.end()
    if pos >= len(rest) or rest[pos] != "(":
        raise ParseError(base + pos, "expected '(' after the operator name")
    pos += 1
    params: dict = {}
    if pos < len(rest) and rest[pos] == ")":
        pos += 1
    else:
        while True:
            key_match = _IDENT_RE.match(rest, pos)
            if not key_match:
                raise ParseError(base + pos, "expected a parameter name")
            key = key_match.group(0)
            pos = key_match.end()
            if pos >= len(rest) or rest[pos] != "=":
                raise ParseError(base + pos, "expected '=' after the parameter name")
            pos += 1
            value_match = _NUMBER_RE.match(rest, pos)
            if not value_match:
                raise ParseError(base + pos, "expected a number value")
            value_text = value_match.group(0)
            pos = value_match.end()
            params[key] = int(value_text) if re.fullmatch(r"[-+]?[0-9]+", value_text) else float(value_text)
            if pos < len(rest) and rest[pos] == ",":
                pos += 1
                continue
            if pos < len(rest) and rest[pos] == ")":
                pos += 1
                break
            raise ParseError(base + pos, "expected ',' or ')'")

    schedule = StepSchedule(())
    if pos < len(rest) and rest[pos] == "@":
        pos += 1
        if rest.startswith("all", pos):
            pos += 3
        else:
            lo_match = _INT_RE.match(rest, pos)
            if not lo_match:
                raise ParseError(base + pos, "expected a step index or 'all' after '@'")
            lo = int(lo_match.group(0))
            pos = lo_match.end()
            if pos >= len(rest) or rest[pos] != "-":
                raise ParseError(base + pos, "expected '-' in the step range")
            pos += 1
            hi_match = _INT_RE.match(rest, pos)
            if not hi_match:
                raise ParseError(base + pos, "expected the end of the step range")
            hi = int(hi_match.group(0))
            pos = hi_match.end()
            if lo > hi:
                raise ParseError(base + pos, f"step range {lo}-{hi} is reversed")
            schedule = StepSchedule(((lo, hi),))

    mix = 1.0
    if pos < len(rest) and rest[pos] == "~":
        pos += 1
        mix_match = _NUMBER_RE.match(rest, pos)
        if not mix_match:
            raise ParseError(base + pos, "expected a mix value after '~'")
        mix = float(mix_match.group(0))
        pos = mix_match.end()
    if pos != len(rest):
        raise ParseError(base + pos, f"unexpected trailing text {rest[pos:]!r}")

    if op_name not in OPERATOR_KINDS or op_name == "compose":
        raise UnknownOperator(f"unknown operator {op_name!r}")
    try:
        operator = BendingOperator(kind=op_name, params=params, mix=mix)
    except OperatorParamError as err:
        raise BadParamValue(str(err)) from err
    return BendSpec(id=bend_id, component_id=component, targets=(path_text,),
                    operator=operator, schedule=schedule)


def _format_number(value) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


def format_bend_expression(spec: BendSpec) -> str:
    """Inverse of parse_bend_expression for DSL-expressible specs."""
    if len(spec.targets) != 1:
        raise ValueError("only single-target specs have a one-line form")
    op = spec.operator
    if op.kind == "compose":
        raise ValueError("compose operators have no one-line form")
    params = dict(op.params)
    if params.get("interpolation") == "bilinear":
        params.pop("interpolation")
    if "interpolation" in params:
        raise ValueError("non-default interpolation has no one-line form")
    body = ",".join(f"{k}={_format_number(v)}" for k, v in params.items())
    text = f"{spec.component_id}:{spec.targets[0]}:{op.kind}({body})"
    if spec.schedule.ranges:
        if len(spec.schedule.ranges) != 1:
            raise ValueError("multi-range schedules have no one-line form")
        lo, hi = spec.schedule.ranges[0]
        text += f"@{lo}-{hi}"
    if op.mix != 1.0:
        text += f"~{repr(op.mix)}"
    return text


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _session_for(args) -> BendSession:
    return BendSession(build_toy_pipeline(args.init_seed))


def _print_tree(node, depth, max_depth, indent=""):
    shapes = f"  {node.param_shapes}" if node.param_shapes else ""
    marker = "*" if node.bendable else " "
    print(f"{indent}{marker} {node.name} [{node.kind}]{shapes}")
    if max_depth is not None and depth >= max_depth:
        return
    for child in node.children:
        _print_tree(child, depth + 1, max_depth, indent + "  ")


def _cmd_inspect_tree(args) -> int:
    pipeline = build_toy_pipeline(args.init_seed)
    tree = pipeline.model_tree(args.component)
    if args.json:
        print(tree_to_json(tree))
    else:
        print(f"{tree.component_id}: {tree.node_count} nodes (* = bendable)")
        _print_tree(tree.root, 0, args.depth)
    return 0


def _cmd_layers(args) -> int:
    pipeline = build_toy_pipeline(args.init_seed)
    tree = pipeline.model_tree(args.component)
    for path in list_bendable_layers(tree, args.kind):
        print(path.text())
    return 0


def _collect_generation(args):
    """Merge recipe (if given) with explicit flags; flags win."""
    recipe = load_recipe(args.recipe) if args.recipe else None
    base = recipe.generation if recipe else GenerationParams(prompt="", seed=0)
    params = GenerationParams(
        prompt=args.prompt if args.prompt is not None else base.prompt,
        negative_prompt=args.negative_prompt if args.negative_prompt is not None
        else base.negative_prompt,
        seed=args.seed if args.seed is not None else base.seed,
        steps=args.steps if args.steps is not None else base.steps,
        cfg=args.cfg if args.cfg is not None else base.cfg,
        sampler_id=args.sampler if args.sampler is not None else base.sampler_id,
        scheduler_id=args.scheduler if args.scheduler is not None else base.scheduler_id,
        latent_shape=base.latent_shape,
    )
    return recipe, params


def _install_all(session: BendSession, recipe, bend_exprs) -> None:
    if recipe:
        for spec in recipe.bends:
            session.install_bend(spec)
        session.set_conditioning_edits(recipe.conditioning_edits)
    for i, expr in enumerate(bend_exprs or ()):
        session.install_bend(parse_bend_expression(expr, bend_id=f"cli{i}"))


def _cmd_generate(args) -> int:
    recipe, params = _collect_generation(args)
    session = _session_for(args)
    _install_all(session, recipe, args.bend)
    image, report = session.generate(params)
    write_png(image, args.out)
    report_path = os.path.splitext(args.out)[0] + ".report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {args.out} and {report_path}")
    return 0


def _parse_reduce(text: str) -> ReductionSpec:
    if text in ("mean", "abs_mean"):
        return ReductionSpec(method=text)
    if text == "l2":
        return ReductionSpec(method="l2_norm")
    if text.startswith("channel:"):
        return ReductionSpec(method="channel", channel_index=int(text.split(":", 1)[1]))
    raise ValueError(f"bad --reduce value {text!r} (mean|abs_mean|l2|channel:k)")


def _cmd_capture(args) -> int:
    recipe, params = _collect_generation(args)
    session = _session_for(args)
    _install_all(session, recipe, args.bend)
    session.generate(params)
    schedule = StepSchedule(())
    if args.steps_range:
        lo, _, hi = args.steps_range.partition("-")
        schedule = StepSchedule(((int(lo), int(hi or lo)),))
    phase = "pre_bend" if args.phase == "pre" else "post_bend"
    reduction = _parse_reduce(args.reduce)
    captures = session.capture_activation(args.path, schedule, phase)
    if not captures:
        raise ValueError(f"no captures matched {args.path} at the requested steps")
    tiles = [normalize_to_image(reduce_channels(cap.tensor, reduction)[0]) for cap in captures]
    write_png(make_grid(tiles, args.columns), args.out)
    from .featureviz import capture_sidecar
    sidecars = [capture_sidecar(cap.path, cap.step_index, cap.captured_phase, reduction)
                for cap in captures]
    with open(os.path.splitext(args.out)[0] + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecars, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {args.out} ({len(tiles)} tiles)")
    return 0


def _cmd_recipe_validate(args) -> int:
    recipe = load_recipe(args.file)
    # round-trip is the real check: parse(serialize(parse(text))) must agree
    serialize_recipe(recipe)
    print(f"{args.file}: valid (version {recipe.version}, "
          f"{len(recipe.bends)} bends, {len(recipe.conditioning_edits)} edits)")
    return 0


def _cmd_serve(args) -> int:
    from .service import run
    run(host=args.host, port=args.port, init_seed=args.init_seed)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def _add_generation_flags(p) -> None:
    p.add_argument("--prompt", default=None)
    p.add_argument("--negative-prompt", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--sampler", default=None)
    p.add_argument("--scheduler", default=None)
    p.add_argument("--bend", action="append", metavar="EXPR",
                   help="bend expression, repeatable")
    p.add_argument("--recipe", default=None, metavar="FILE")
    p.add_argument("--init-seed", type=int, default=1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bendlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect-tree", help="print a component's module tree")
    p.add_argument("--component", choices=COMPONENT_IDS, default="unet")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.add_argument("--init-seed", type=int, default=1)
    p.set_defaults(func=_cmd_inspect_tree)

    p = sub.add_parser("layers", help="list bendable layer paths")
    p.add_argument("--component", choices=COMPONENT_IDS, default="unet")
    p.add_argument("--kind", default=None)
    p.add_argument("--init-seed", type=int, default=1)
    p.set_defaults(func=_cmd_layers)

    p = sub.add_parser("generate", help="render an image (plus report JSON)")
    _add_generation_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("capture", help="export a feature-map grid from a run")
    _add_generation_flags(p)
    p.add_argument("--path", required=True)
    p.add_argument("--steps-range", default=None, metavar="LO-HI")
    p.add_argument("--phase", choices=("pre", "post"), default="pre")
    p.add_argument("--reduce", default="mean", metavar="mean|abs_mean|l2|channel:k")
    p.add_argument("--columns", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_capture)

    p = sub.add_parser("recipe-validate", help="check a recipe file")
    p.add_argument("file")
    p.set_defaults(func=_cmd_recipe_validate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None,
                   help="default: $BENDLAB_PORT or 8688")
    p.add_argument("--init-seed", type=int, default=1)
    p.set_defaults(func=_cmd_serve)
    return parser


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (BendlabError, OSError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
