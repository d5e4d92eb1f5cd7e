"""Bending operators: parameterized, shape-preserving transforms on activations.

Activation tensors are 4-D float arrays (batch, channel, height, width).
Every operator is a pure function; the optional ``mix`` blends the raw
transform with the untouched input:  y = (1 - mix) * x + mix * T(x).

Noise is drawn from a counter-based stream keyed by (base seed, step index,
target path), so a recipe regenerates pixel-identical outputs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteOutput, OperatorParamError
from .model_graph import LayerPath

_MASK64 = (1 << 64) - 1

OPERATOR_KINDS = (
    "add_scalar",
    "mul_scalar",
    "add_noise",
    "rotate",
    "scale_spatial",
    "erode",
    "dilate",
    "threshold",
    "compose",
)

# kinds that make sense elementwise on weight matrices
LORA_KINDS = frozenset({"add_scalar", "mul_scalar", "add_noise", "threshold"})

_INTERPOLATIONS = ("nearest", "bilinear")


@dataclass(frozen=True)
class InvocationContext:
    """Where and when an operator fires; keys the reproducible noise stream."""

    step_index: int
    base_seed: int
    target_path: LayerPath


def _default_context() -> InvocationContext:
    return InvocationContext(step_index=0, base_seed=0, target_path=LayerPath(("adhoc",)))


@dataclass
class BendingOperator:
    """A validated operator description: kind + params + blend amount."""

    kind: str
    params: dict = field(default_factory=dict)
    mix: float = 1.0
    ops: tuple = ()  # compose children, each with its own mix

    def __post_init__(self):
        self.mix = float(self.mix)
        if not 0.0 <= self.mix <= 1.0:
            raise OperatorParamError(f"mix must be in [0, 1], got {self.mix}")
        if self.kind not in OPERATOR_KINDS:
            raise OperatorParamError(f"unknown operator kind {self.kind!r}")
        self.ops = tuple(self.ops)
        if self.kind == "compose":
            if self.params:
                raise OperatorParamError("compose takes child operators, not params")
            if not self.ops:
                raise OperatorParamError("compose needs at least one child operator")
            for child in self.ops:
                if not isinstance(child, BendingOperator):
                    raise OperatorParamError("compose children must be BendingOperators")
            return
        if self.ops:
            raise OperatorParamError(f"{self.kind} does not take child operators")
        self.params = _validate_params(self.kind, self.params)


def _validate_params(kind: str, params: dict) -> dict:
    """Check completeness and ranges; normalize numeric types."""

    def num(name, *, default=None, minimum=None, exclusive=False):
        if name not in params:
            if default is None:
                raise OperatorParamError(f"{kind} requires param {name!r}")
            return default
        value = params[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise OperatorParamError(f"{kind}.{name} must be a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise OperatorParamError(f"{kind}.{name} must be finite, got {value}")
        if minimum is not None and (value <= minimum if exclusive else value < minimum):
            op = ">" if exclusive else ">="
            raise OperatorParamError(f"{kind}.{name} must be {op} {minimum}, got {value}")
        return value

    def interp():
        value = params.get("interpolation", "bilinear")
        if value not in _INTERPOLATIONS:
            raise OperatorParamError(
                f"{kind}.interpolation must be one of {_INTERPOLATIONS}, got {value!r}"
            )
        return value

    known: dict
    if kind in ("add_scalar", "mul_scalar"):
        known = {"c": num("c")}
    elif kind == "add_noise":
        known = {"sigma": num("sigma", minimum=0.0)}
    elif kind == "rotate":
        known = {"theta_deg": num("theta_deg"), "interpolation": interp()}
    elif kind == "scale_spatial":
        known = {"factor": num("factor", minimum=0.0, exclusive=True), "interpolation": interp()}
    elif kind in ("erode", "dilate"):
        raw = params.get("kernel")
        if raw is None:
            raise OperatorParamError(f"{kind} requires param 'kernel'")
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
            raise OperatorParamError(f"{kind}.kernel must be an integer, got {raw!r}")
        kernel = int(raw)
        if kernel < 1 or kernel % 2 == 0:
            raise OperatorParamError(f"{kind}.kernel must be an odd integer >= 1, got {kernel}")
        known = {"kernel": kernel}
    elif kind == "threshold":
        known = {"t": num("t")}
    else:  # pragma: no cover - kinds are gated above
        raise OperatorParamError(f"unknown operator kind {kind!r}")

    extra = set(params) - set(known)
    if extra:
        raise OperatorParamError(f"{kind} got unknown params: {sorted(extra)}")
    return known


def make_operator(kind: str, mix: float = 1.0, ops=(), **params) -> BendingOperator:
    """Convenience constructor: make_operator("rotate", theta_deg=45)."""
    return BendingOperator(kind=kind, params=dict(params), mix=mix, ops=tuple(ops))


# ---------------------------------------------------------------------------
# Raw transforms (full strength, no blending)
# ---------------------------------------------------------------------------

def _check_activation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or 0 in x.shape:
        raise OperatorParamError(
            f"activation tensors are non-empty 4-D (B,C,H,W); got shape {x.shape}"
        )
    return x


def noise_stream(shape, ctx: InvocationContext, dtype=np.float32) -> np.ndarray:
    """Standard Gaussian draw keyed by (base_seed, step_index, target path)."""
    digest = hashlib.blake2b(ctx.target_path.text().encode("utf-8"), digest_size=8).digest()
    seq = np.random.SeedSequence(
        [ctx.base_seed & _MASK64, ctx.step_index & _MASK64, int.from_bytes(digest, "big")]
    )
    rng = np.random.default_rng(seq)
    if np.dtype(dtype) in (np.dtype(np.float32), np.dtype(np.float64)):
        return rng.standard_normal(shape, dtype=dtype)
    return rng.standard_normal(shape).astype(dtype)


def add_noise(x: np.ndarray, sigma: float, ctx: InvocationContext) -> np.ndarray:
    """y = x + sigma * g with g from the seeded stream; sigma=0 is the identity."""
    x = _check_activation(x)
    if sigma < 0:
        raise OperatorParamError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    return x + np.asarray(sigma, dtype=x.dtype) * noise_stream(x.shape, ctx, dtype=x.dtype)


def morphology(x: np.ndarray, kind: str, kernel: int) -> np.ndarray:
    """Greyscale min (erode) / max (dilate) filter, replicate padding."""
    x = _check_activation(x)
    if kind not in ("erode", "dilate"):
        raise OperatorParamError(f"morphology kind must be erode|dilate, got {kind!r}")
    if kernel < 1 or kernel % 2 == 0:
        raise OperatorParamError(f"kernel must be an odd integer >= 1, got {kernel}")
    pad = kernel // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    if kind == "erode":
        return windows.min(axis=(-2, -1))
    return windows.max(axis=(-2, -1))


def _exact_sincos(theta_deg: float) -> tuple[float, float] | None:
    """Exact sin/cos for multiples of 90 degrees, else None."""
    if theta_deg % 90.0 != 0.0:
        return None
    table = {0: (0.0, 1.0), 1: (1.0, 0.0), 2: (0.0, -1.0), 3: (-1.0, 0.0)}
    return table[int(theta_deg // 90.0) % 4]


def _resample(stack: np.ndarray, r_src: np.ndarray, c_src: np.ndarray,
              interpolation: str) -> np.ndarray:
    """Sample (N,H,W) planes at fractional source coords; 0 outside."""
    n, h, w = stack.shape
    dtype = stack.dtype
    if interpolation == "nearest":
        ri = np.floor(r_src + 0.5).astype(np.int64)
        ci = np.floor(c_src + 0.5).astype(np.int64)
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        gathered = stack[:, np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        return np.where(valid[None, :, :], gathered, dtype.type(0))
    # bilinear
    r0 = np.floor(r_src).astype(np.int64)
    c0 = np.floor(c_src).astype(np.int64)
    fr = (r_src - r0).astype(dtype)
    fc = (c_src - c0).astype(dtype)
    out = np.zeros((n,) + r_src.shape, dtype=dtype)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        gathered = stack[:, np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
        out += weight[None, :, :] * np.where(valid[None, :, :], gathered, dtype.type(0))
    return out


def rotate_spatial(x: np.ndarray, theta_deg: float, interpolation: str = "bilinear") -> np.ndarray:
    """Rotate each H x W plane counter-clockwise about its center; 0 fill.

    Exact multiples of 90 degrees use exact sin/cos, so rotate(90, nearest)
    is a pure index permutation with order 4 on square planes.
    """
    x = _check_activation(x)
    if interpolation not in _INTERPOLATIONS:
        raise OperatorParamError(f"interpolation must be one of {_INTERPOLATIONS}")
    if theta_deg % 360.0 == 0.0:
        return x.copy()
    b, c, h, w = x.shape
    exact = _exact_sincos(theta_deg)
    if exact is not None:
        s, co = exact
    else:
        rad = np.deg2rad(theta_deg)
        s, co = np.sin(rad), np.cos(rad)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = rows - cr, cols - cc
    r_src = cr + dc * s + dr * co
    c_src = cc + dc * co - dr * s
    out = _resample(x.reshape(b * c, h, w), r_src, c_src, interpolation)
    return out.reshape(b, c, h, w)


def scale_spatial(x: np.ndarray, factor: float, interpolation: str = "bilinear") -> np.ndarray:
    """Zoom each plane about its center by ``factor``; crop or zero-pad back.

    factor > 1 magnifies (content cropped); factor < 1 shrinks (zero ring).
    """
    x = _check_activation(x)
    if factor <= 0:
        raise OperatorParamError(f"factor must be > 0, got {factor}")
    if interpolation not in _INTERPOLATIONS:
        raise OperatorParamError(f"interpolation must be one of {_INTERPOLATIONS}")
    if factor == 1.0:
        return x.copy()
    b, c, h, w = x.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    r_src = cr + (rows - cr) / factor
    c_src = cc + (cols - cc) / factor
    out = _resample(x.reshape(b * c, h, w), r_src, c_src, interpolation)
    return out.reshape(b, c, h, w)


def threshold_keep(x: np.ndarray, t: float) -> np.ndarray:
    """Keep values >= t, zero the rest."""
    x = _check_activation(x)
    return np.where(x >= np.asarray(t, dtype=x.dtype), x, x.dtype.type(0))


def _raw_transform(op: BendingOperator, x: np.ndarray, ctx: InvocationContext) -> np.ndarray:
    kind, p = op.kind, op.params
    if kind == "add_scalar":
        return x + np.asarray(p["c"], dtype=x.dtype)
    if kind == "mul_scalar":
        return x * np.asarray(p["c"], dtype=x.dtype)
    if kind == "add_noise":
        return add_noise(x, p["sigma"], ctx)
    if kind == "rotate":
        return rotate_spatial(x, p["theta_deg"], p["interpolation"])
    if kind == "scale_spatial":
        return scale_spatial(x, p["factor"], p["interpolation"])
    if kind in ("erode", "dilate"):
        return morphology(x, kind, p["kernel"])
    if kind == "threshold":
        return threshold_keep(x, p["t"])
    raise OperatorParamError(f"unknown operator kind {kind!r}")  # pragma: no cover


def apply_operator(op: BendingOperator, x: np.ndarray,
                   ctx: InvocationContext | None = None) -> np.ndarray:
    """Apply one operator with mix blending; never mutates x.

    mix=0 returns a bit-for-bit copy of x; mix=1 returns the raw transform.
    Raises NonFiniteOutput if the raw transform produced NaN/Inf.
    """
    x = _check_activation(x)
    ctx = ctx or _default_context()
    if op.mix == 0.0:
        return x.copy()
    if op.kind == "compose":
        return compose(op.ops, x, ctx) if op.mix == 1.0 else _blend(x, compose(op.ops, x, ctx), op.mix)
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite is reported below
        raw = _raw_transform(op, x, ctx)
    if not np.isfinite(raw).all():
        raise NonFiniteOutput(
            f"operator {op.kind} produced non-finite values "
            f"(step {ctx.step_index}, layer {ctx.target_path})"
        )
    if op.mix == 1.0:
        return raw
    return _blend(x, raw, op.mix)


def _blend(x: np.ndarray, raw: np.ndarray, mix: float) -> np.ndarray:
    return (1.0 - mix) * x + mix * raw


def compose(ops, x: np.ndarray, ctx: InvocationContext | None = None) -> np.ndarray:
    """Left-to-right application; each child's own mix is honored."""
    if not ops:
        raise OperatorParamError("compose needs at least one child operator")
    ctx = ctx or _default_context()
    y = x
    for i, child in enumerate(ops):
        try:
            y = apply_operator(child, y, ctx)
        except (OperatorParamError, NonFiniteOutput) as err:
            raise type(err)(f"compose[{i}]: {err}") from err
    return y


# ---------------------------------------------------------------------------
# Weight-side bending (low-rank adapter pairs)
# ---------------------------------------------------------------------------

def bend_lora(adapter_pair, op: BendingOperator,
              ctx: InvocationContext | None = None):
    """Apply an elementwise operator to both factors of a low-rank pair.

    Each matrix is treated as a 1x1xRxN activation; spatial kinds are
    rejected because they are undefined on weight matrices.
    """
    if op.kind == "compose":
        bad = [c.kind for c in op.ops if c.kind not in LORA_KINDS]
        if bad:
            raise OperatorParamError(f"spatial kinds are undefined on weights: {bad}")
    elif op.kind not in LORA_KINDS:
        raise OperatorParamError(f"spatial kind {op.kind!r} is undefined on weights")
    ctx = ctx or _default_context()
    down, up = adapter_pair
    out = []
    for tag, mat in (("a", np.asarray(down)), ("b", np.asarray(up))):
        if mat.ndim != 2:
            raise OperatorParamError(f"adapter factors must be 2-D, got shape {mat.shape}")
        sub = InvocationContext(
            step_index=ctx.step_index,
            base_seed=ctx.base_seed,
            target_path=LayerPath(ctx.target_path.segments + (tag,)),
        )
        bent = apply_operator(op, mat.reshape(1, 1, *mat.shape), sub)
        out.append(bent.reshape(mat.shape))
    return out[0], out[1]
