"""Desk-scale latent-diffusion pipeline plus the backend-adapter contract.

The toy stack mirrors a real latent-diffusion pipeline in miniature:

* toy text encoder - seeded hash expansion of the prompt bytes into a
  16 x 32 embedding (the conditioning),
* toy UNet named ``diffusion_model`` - input/middle/output conv blocks with
  skip connections, step-index and conditioning biases per block,
* toy VAE - 2-block encoder/decoder with 2x spatial scaling around a
  4-channel latent.

Everything is float32 numpy with seeded weight streams, so two pipelines
built from the same init seed are numerically identical and generations are
bit-reproducible. Real backends can be wrapped through the same five-call
adapter contract the toy backend implements.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import featureviz
from .errors import AdapterError, NonFiniteOutput, OperatorParamError, ShapeMismatch
from .model_graph import COMPONENT_IDS, ModelTree, tree_from_adapter
from .operators import InvocationContext, noise_stream
from .model_graph import LayerPath

_MASK64 = (1 << 64) - 1
_LATENT_TAG = int.from_bytes(hashlib.blake2b(b"bendlab-initial-latent", digest_size=8).digest(), "big")

EMBED_TOKENS = 16
EMBED_WIDTH = 32
EULER_ETA = 0.1

EDIT_KINDS = ("perturb", "interpolate", "scale", "offset")


# ---------------------------------------------------------------------------
# Generation parameters and conditioning edits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenerationParams:
    """Everything a generation run needs; vocabulary follows common SD UIs."""

    prompt: str
    seed: int
    steps: int = 20
    cfg: float = 7.0
    negative_prompt: str | None = None
    sampler_id: str = "euler"
    scheduler_id: str = "normal"
    latent_shape: tuple[int, int, int, int] = (1, 4, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "cfg", float(self.cfg))
        object.__setattr__(self, "latent_shape", tuple(int(d) for d in self.latent_shape))
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.cfg < 0 or not math.isfinite(self.cfg):
            raise ValueError(f"cfg must be a finite value >= 0, got {self.cfg}")
        if len(self.latent_shape) != 4 or any(d < 1 for d in self.latent_shape):
            raise ValueError(f"latent_shape must be 4 positive ints, got {self.latent_shape}")


@dataclass
class ConditioningEdit:
    """A local move in embedding space applied to the prompt conditioning."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ValueError(f"unknown conditioning edit kind {self.kind!r}")
        p = self.params
        if self.kind == "perturb":
            sigma = float(p.get("sigma", -1))
            if sigma < 0:
                raise ValueError("perturb needs sigma >= 0")
            self.params = {"sigma": sigma, "edit_seed": int(p.get("edit_seed", 0))}
        elif self.kind == "interpolate":
            t = float(p.get("t", -1))
            if not 0.0 <= t <= 1.0:
                raise ValueError("interpolate needs t in [0, 1]")
            self.params = {"other_prompt": str(p.get("other_prompt", "")), "t": t}
        elif self.kind == "scale":
            self.params = {"factor": float(p["factor"])}
        elif self.kind == "offset":
            direction = [float(v) for v in p["direction"]]
            self.params = {"direction": direction}


# ---------------------------------------------------------------------------
# Toy modules
# ---------------------------------------------------------------------------

def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return (x / (1.0 + np.exp(-x))).astype(x.dtype, copy=False)


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, cin * 9)
    out = cols @ weight.reshape(cout, cin * 9).T
    return out.reshape(b, h, w, cout).transpose(0, 3, 1, 2) + bias[None, :, None, None]


def _step_features(step_index: int) -> np.ndarray:
    """Sinusoidal features of the sampler step, unbounded step range."""
    freqs = np.array([1.0, 0.5, 0.25, 0.125], dtype=np.float64)
    angles = (step_index + 1) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(np.float32)


class ToyBackend:
    """The built-in backend; implements the adapter contract natively.

    Adapter contract (what ``wrap_backend`` checks):
      * enumerate_submodules(component_id) -> nested (name, kind, shapes, children)
      * install_output_transform(component_id, path, fn) -> token
      * remove_output_transform(token)
      * register_step_callback(cb) / emit_step(step_index)
      * forward(component_id, **inputs)
    """

    def __init__(self, init_seed: int = 1):
        self.init_seed = int(init_seed)
        rng = np.random.default_rng(np.random.SeedSequence(self.init_seed & _MASK64))
        self._conv: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._proj: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._build_unet(rng)
        self._build_vae(rng)
        self._transforms: dict[int, tuple[str, str]] = {}
        self._chain: dict[tuple[str, str], list] = {}
        self._fns: dict[int, object] = {}
        self._next_token = 0
        self._step_callbacks: list = []

    # -- construction -------------------------------------------------------

    def _make_conv(self, rng, path: str, cin: int, cout: int) -> None:
        scale = 1.0 / np.sqrt(cin * 9)
        weight = (rng.standard_normal((cout, cin, 3, 3)) * scale).astype(np.float32)
        bias = (rng.standard_normal(cout) * 0.01).astype(np.float32)
        self._conv[path] = (weight, bias)

    def _make_block(self, rng, path: str, cin: int, cout: int) -> None:
        step_proj = (rng.standard_normal((cin, 8)) * 0.1).astype(np.float32)
        cond_proj = (rng.standard_normal((cin, EMBED_WIDTH)) * 0.1).astype(np.float32)
        self._proj[path] = (step_proj, cond_proj)
        self._make_conv(rng, f"{path}.in_layers", cin, cout)

    def _build_unet(self, rng) -> None:
        down = [(4, 8), (8, 16), (16, 32)]
        mid = [(32, 32), (32, 32)]
        # up blocks consume the previous output concatenated with a skip
        up = [(64, 16), (32, 8), (16, 4)]
        for i, (cin, cout) in enumerate(down):
            self._make_block(rng, f"diffusion_model.input_blocks.{i}", cin, cout)
        for i, (cin, cout) in enumerate(mid):
            self._make_block(rng, f"diffusion_model.middle_block.{i}", cin, cout)
        for i, (cin, cout) in enumerate(up):
            self._make_block(rng, f"diffusion_model.output_blocks.{i}", cin, cout)

    def _build_vae(self, rng) -> None:
        for path, (cin, cout) in {
            "vae.encoder.0": (3, 8),
            "vae.encoder.1": (8, 4),
            "vae.decoder.0": (4, 8),
            "vae.decoder.1": (8, 3),
        }.items():
            self._make_conv(rng, f"{path}.in_layers", cin, cout)

    # -- adapter contract ----------------------------------------------------

    def enumerate_submodules(self, component_id: str):
        def conv_leaf(path):
            weight, bias = self._conv[f"{path}.in_layers"]
            return ("in_layers", "conv", [list(weight.shape), list(bias.shape)], [])

        def block(path, name):
            return (name, "container", None, [conv_leaf(path), ("act", "nonlinearity", None, [])])

        def block_list(base, name, count):
            return (name, "container", None,
                    [block(f"{base}.{name}.{i}", str(i)) for i in range(count)])

        if component_id == "unet":
            return ("diffusion_model", "container", None, [
                block_list("diffusion_model", "input_blocks", 3),
                block_list("diffusion_model", "middle_block", 2),
                block_list("diffusion_model", "output_blocks", 3),
            ])
        if component_id == "vae":
            return ("vae", "container", None, [
                ("encoder", "container", None,
                 [block(f"vae.encoder.{i}", str(i)) for i in range(2)]),
                ("decoder", "container", None,
                 [block(f"vae.decoder.{i}", str(i)) for i in range(2)]),
            ])
        if component_id == "text_encoder":
            return ("text_encoder", "container", None, [("embed", "embedding", None, [])])
        raise AdapterError("enumerate_submodules", f"unknown component {component_id!r}")

    def install_output_transform(self, component_id: str, path: str, fn) -> int:
        token = self._next_token
        self._next_token += 1
        key = (component_id, path)
        self._transforms[token] = key
        self._fns[token] = fn
        self._chain.setdefault(key, []).append(token)
        return token

    def remove_output_transform(self, token: int) -> None:
        key = self._transforms.pop(token, None)
        if key is None:
            return
        self._fns.pop(token, None)
        self._chain[key].remove(token)
        if not self._chain[key]:
            del self._chain[key]

    def register_step_callback(self, cb) -> None:
        self._step_callbacks.append(cb)

    def emit_step(self, step_index: int) -> None:
        for cb in self._step_callbacks:
            cb(step_index)

    def forward(self, component_id: str, **inputs):
        if component_id == "unet":
            return self._unet_forward(inputs["latent"], inputs["step_index"], inputs["embedding"])
        if component_id == "vae":
            return self._vae_decode(inputs["latent"])
        if component_id == "text_encoder":
            return self._encode_text(inputs["prompt"])
        raise AdapterError("forward", f"unknown component {component_id!r}")

    # -- forward passes ------------------------------------------------------

    def _emit(self, component_id: str, path: str, value):
        for token in self._chain.get((component_id, path), ()):
            value = self._fns[token](value)
        return value

    def _run_block(self, component_id: str, path: str, x: np.ndarray,
                   step_feat: np.ndarray | None, cond_vec: np.ndarray | None) -> np.ndarray:
        h = x
        if step_feat is not None:
            step_proj, cond_proj = self._proj[path]
            bias = step_proj @ step_feat + cond_proj @ cond_vec
            h = h + bias.astype(np.float32)[None, :, None, None]
        weight, bias_w = self._conv[f"{path}.in_layers"]
        h = _conv3x3(h, weight, bias_w)
        h = self._emit(component_id, f"{path}.in_layers", h)
        h = _silu(h)
        h = self._emit(component_id, f"{path}.act", h)
        return self._emit(component_id, path, h)

    def _unet_forward(self, latent: np.ndarray, step_index: int,
                      embedding: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float32)
        if latent.ndim != 4 or latent.shape[1] != 4:
            raise ShapeMismatch(f"toy unet expects (B, 4, H, W) latents, got {latent.shape}")
        step_feat = _step_features(step_index)
        cond_vec = np.asarray(embedding, dtype=np.float32).mean(axis=0)
        skips = []
        h = latent
        for i in range(3):
            h = self._run_block("unet", f"diffusion_model.input_blocks.{i}", h, step_feat, cond_vec)
            skips.append(h)
        h = self._emit("unet", "diffusion_model.input_blocks", h)
        for i in range(2):
            h = self._run_block("unet", f"diffusion_model.middle_block.{i}", h, step_feat, cond_vec)
        h = self._emit("unet", "diffusion_model.middle_block", h)
        for i in range(3):
            h = np.concatenate([h, skips[2 - i]], axis=1)
            h = self._run_block("unet", f"diffusion_model.output_blocks.{i}", h, step_feat, cond_vec)
        h = self._emit("unet", "diffusion_model.output_blocks", h)
        return self._emit("unet", "diffusion_model", h)

    def _vae_decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float32)
        h = self._run_block("vae", "vae.decoder.0", z, None, None)
        h = np.repeat(np.repeat(h, 2, axis=2), 2, axis=3)  # 2x nearest upsample
        h = self._run_block("vae", "vae.decoder.1", h, None, None)
        h = self._emit("vae", "vae.decoder", h)
        return self._emit("vae", "vae", h)

    def vae_encode(self, image_planes: np.ndarray) -> np.ndarray:
        h = np.asarray(image_planes, dtype=np.float32)
        h = self._run_block("vae", "vae.encoder.0", h, None, None)
        b, c, height, width = h.shape
        h = h.reshape(b, c, height // 2, 2, width // 2, 2).mean(axis=(3, 5))  # 2x mean pool
        h = self._run_block("vae", "vae.encoder.1", h, None, None)
        h = self._emit("vae", "vae.encoder", h)
        return self._emit("vae", "vae", h)

    def _encode_text(self, prompt: str) -> np.ndarray:
        if prompt == "":
            emb = np.zeros((EMBED_TOKENS, EMBED_WIDTH), dtype=np.float32)
        else:
            digest = hashlib.sha256(prompt.encode("utf-8")).digest()
            words = [int.from_bytes(digest[i:i + 8], "big") for i in range(0, 32, 8)]
            rng = np.random.default_rng(np.random.SeedSequence(words))
            emb = rng.standard_normal((EMBED_TOKENS, EMBED_WIDTH), dtype=np.float32)
        emb = self._emit("text_encoder", "text_encoder.embed", emb)
        return self._emit("text_encoder", "text_encoder", emb)


# ---------------------------------------------------------------------------
# Pipeline facade (works for the toy backend and for wrapped ones)
# ---------------------------------------------------------------------------

_REQUIRED_CALLS = ("enumerate_submodules", "install_output_transform",
                   "remove_output_transform", "forward")


def _validate_adapter(adapter) -> None:
    for name in _REQUIRED_CALLS:
        if not callable(getattr(adapter, name, None)):
            raise AdapterError(name)
    if not callable(getattr(adapter, "register_step_callback", None)) or \
            not callable(getattr(adapter, "emit_step", None)):
        raise AdapterError("step_callback")


class Pipeline:
    """Generation facade over a validated backend adapter."""

    def __init__(self, adapter):
        _validate_adapter(adapter)
        self.adapter = adapter
        self.lock = threading.Lock()
        self._trees: dict[str, ModelTree] = {}

    def model_tree(self, component_id: str) -> ModelTree:
        if component_id not in COMPONENT_IDS:
            raise AdapterError("enumerate_submodules", f"unknown component {component_id!r}")
        if component_id not in self._trees:
            self._trees[component_id] = tree_from_adapter(self.adapter, component_id)
        return self._trees[component_id]

    def encode_prompt(self, prompt: str) -> np.ndarray:
        return self.adapter.forward("text_encoder", prompt=prompt)

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        return self.adapter.forward("vae", latent=latent)

    def initial_latent(self, params: GenerationParams) -> np.ndarray:
        seq = np.random.SeedSequence([params.seed & _MASK64, _LATENT_TAG])
        rng = np.random.default_rng(seq)
        return rng.standard_normal(params.latent_shape, dtype=np.float32)

    def run_denoise(self, params: GenerationParams, cond: np.ndarray,
                    uncond: np.ndarray) -> np.ndarray:
        """Fixed-step Euler loop with classifier-free guidance."""
        x = self.initial_latent(params)
        cfg = np.float32(params.cfg)
        eta = np.float32(EULER_ETA)
        for t in range(params.steps):
            self.adapter.emit_step(t)
            eps = self.adapter.forward("unet", latent=x, step_index=t, embedding=uncond)
            if params.cfg > 0:
                eps_cond = self.adapter.forward("unet", latent=x, step_index=t, embedding=cond)
                eps = eps + cfg * (eps_cond - eps)
            x = x - eta * eps
            if not np.isfinite(x).all():
                raise NonFiniteOutput(f"latent became non-finite after step {t}")
        return x

    def render_image(self, latent: np.ndarray) -> np.ndarray:
        """Decode a latent and map it to an 8-bit H x W x 3 image."""
        planes = self.decode_latent(latent)
        rgb = np.transpose(np.asarray(planes)[0], (1, 2, 0))
        return featureviz.to_uint8_minmax(rgb)


def build_toy_pipeline(init_seed: int = 1) -> Pipeline:
    """Construct the canonical desk-scale pipeline."""
    return Pipeline(ToyBackend(init_seed))


def wrap_backend(adapter) -> Pipeline:
    """Wrap any object satisfying the five-call adapter contract."""
    return Pipeline(adapter)


# ---------------------------------------------------------------------------
# Conditioning-space edits
# ---------------------------------------------------------------------------

def encode_prompt(pipeline: Pipeline, prompt: str) -> np.ndarray:
    return pipeline.encode_prompt(prompt)


def apply_conditioning_edit(emb: np.ndarray, edit: ConditioningEdit,
                            pipeline: Pipeline) -> np.ndarray:
    """Pure function from one embedding to another."""
    emb = np.asarray(emb)
    p = edit.params
    if edit.kind == "perturb":
        if p["sigma"] == 0:
            return emb.copy()
        ctx = InvocationContext(step_index=0, base_seed=p["edit_seed"],
                                target_path=LayerPath(("conditioning",)))
        return emb + np.asarray(p["sigma"], dtype=emb.dtype) * noise_stream(emb.shape, ctx, emb.dtype)
    if edit.kind == "interpolate":
        t = p["t"]
        if t == 0.0:
            return emb.copy()
        other = pipeline.encode_prompt(p["other_prompt"])
        if t == 1.0:
            return other.copy()
        return (1.0 - t) * emb + t * other
    if edit.kind == "scale":
        return emb * np.asarray(p["factor"], dtype=emb.dtype)
    if edit.kind == "offset":
        direction = np.asarray(p["direction"], dtype=emb.dtype)
        if direction.shape != (emb.shape[1],):
            raise ShapeMismatch(
                f"offset direction must have width {emb.shape[1]}, got {direction.shape}"
            )
        return emb + direction[None, :]
    raise OperatorParamError(f"unknown conditioning edit kind {edit.kind!r}")  # pragma: no cover
