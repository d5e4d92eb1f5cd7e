"""Turn captured feature maps into images: reduce, normalize, grid, PNG."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ChannelOutOfRange, NonFiniteInput, SizeMismatch

REDUCTION_METHODS = ("mean", "abs_mean", "l2_norm", "channel")


@dataclass(frozen=True)
class ReductionSpec:
    """How a (B, C, H, W) tensor collapses to one plane per batch item."""

    method: str = "mean"
    channel_index: int | None = None

    def __post_init__(self):
        if self.method not in REDUCTION_METHODS:
            raise ValueError(f"unknown reduction method {self.method!r}")
        if self.method == "channel" and self.channel_index is None:
            raise ValueError("method 'channel' requires channel_index")


def reduce_channels(tensor: np.ndarray, spec: ReductionSpec) -> np.ndarray:
    """Collapse the channel axis; returns (B, H, W) with spatial dims intact."""
    t = np.asarray(tensor)
    if t.ndim != 4:
        raise ValueError(f"expected a 4-D activation tensor, got shape {t.shape}")
    if spec.method == "mean":
        return t.mean(axis=1)
    if spec.method == "abs_mean":
        return np.abs(t).mean(axis=1)
    if spec.method == "l2_norm":
        return np.sqrt((t.astype(np.float64) ** 2).sum(axis=1)).astype(t.dtype)
    k = spec.channel_index
    if not 0 <= k < t.shape[1]:
        raise ChannelOutOfRange(f"channel {k} out of range for {t.shape[1]} channels")
    return t[:, k].copy()


def to_uint8_minmax(values: np.ndarray) -> np.ndarray:
    """Affine map of [min, max] onto [0, 255]; a constant array becomes 128."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    scaled = (v - lo) / (hi - lo) * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def normalize_to_image(plane: np.ndarray, mode: str = "minmax",
                       p_lo: float = 1.0, p_hi: float = 99.0) -> np.ndarray:
    """Map a 2-D real map to an 8-bit greyscale image."""
    v = np.asarray(plane)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NonFiniteInput("map contains NaN/Inf values")
    if mode == "minmax":
        return to_uint8_minmax(v)
    if mode == "percentile":
        lo, hi = np.percentile(v, [p_lo, p_hi])
        return to_uint8_minmax(np.clip(v, lo, hi))
    raise ValueError(f"unknown normalization mode {mode!r}")


def make_grid(images: list[np.ndarray], columns: int = 1) -> np.ndarray:
    """Row-major grid of equal-size greyscale tiles; last row padded black."""
    if columns < 1:
        raise ValueError(f"columns must be >= 1, got {columns}")
    if not images:
        raise ValueError("make_grid needs at least one image")
    h, w = images[0].shape
    for img in images:
        if img.shape != (h, w):
            raise SizeMismatch(f"tile shapes differ: {img.shape} vs {(h, w)}")
    rows = -(-len(images) // columns)
    grid = np.zeros((rows * h, columns * w), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return grid


# ---------------------------------------------------------------------------
# PNG export
# ---------------------------------------------------------------------------

def _to_pil(image: np.ndarray) -> Image.Image:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError("images must be uint8; normalize first")
    if arr.ndim == 2:
        return Image.fromarray(arr, mode="L")
    if arr.ndim == 3 and arr.shape[2] == 3:
        return Image.fromarray(arr, mode="RGB")
    raise ValueError(f"cannot export array of shape {arr.shape} as PNG")


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    _to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


def write_png(image: np.ndarray, path) -> None:
    data = png_bytes(image)
    with open(path, "wb") as fh:
        fh.write(data)


def capture_sidecar(path_text: str, step_index: int, phase: str,
                    reduction: ReductionSpec) -> dict:
    """Metadata written next to an exported feature-map PNG."""
    red: dict = {"method": reduction.method}
    if reduction.channel_index is not None:
        red["channel_index"] = reduction.channel_index
    return {"path": path_text, "step": step_index, "phase": phase, "reduction": red}


def write_sidecar(sidecar: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")
