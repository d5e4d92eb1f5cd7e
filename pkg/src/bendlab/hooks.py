"""Hook engine: install bends on live pipelines, gate them by sampler step,
and capture per-layer activations for visualization.

A :class:`BendSession` owns a shadow registry of installed bends. Nothing is
written into the shared model; physical output transforms exist only while
this session's generation holds the pipeline lock, so sessions sharing one
pipeline are isolated and removal trivially restores the baseline.

During a generation the engine records every node's output both before and
after bending, so feature-map captures are queries over the last run.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConcurrentGeneration,
    DuplicateId,
    NotBendable,
    OutOfOrderStep,
    PathNotFound,
    UnknownHandle,
)
from .model_graph import (
    COMPONENT_IDS,
    LayerPath,
    is_pattern,
    iter_paths,
    match_paths,
    parse_pattern,
    resolve_path,
)
from .operators import BendingOperator, InvocationContext, apply_operator
from .pipeline import GenerationParams, apply_conditioning_edit

CAPTURE_PHASES = ("pre_bend", "post_bend")


@dataclass(frozen=True)
class StepSchedule:
    """Union of inclusive step ranges; an empty list means every step."""

    ranges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        norm = []
        for pair in self.ranges:
            lo, hi = int(pair[0]), int(pair[1])
            if lo < 0 or lo > hi:
                raise ValueError(f"bad schedule range [{lo}, {hi}]")
            norm.append((lo, hi))
        object.__setattr__(self, "ranges", tuple(norm))

    def covers(self, step_index: int) -> bool:
        return not self.ranges or any(lo <= step_index <= hi for lo, hi in self.ranges)

    @property
    def all_steps(self) -> bool:
        return not self.ranges


@dataclass
class BendSpec:
    """The installable unit: targets + operator + step schedule."""

    id: str
    component_id: str
    targets: tuple[str, ...]
    operator: BendingOperator
    schedule: StepSchedule = field(default_factory=StepSchedule)
    enabled: bool = True

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise ValueError("bend id must be a non-empty string")
        if self.component_id not in COMPONENT_IDS:
            raise ValueError(f"unknown component {self.component_id!r}")
        targets = tuple(self.targets)
        if not targets:
            raise ValueError("bend needs at least one target path")
        for target in targets:
            if is_pattern(target):
                parse_pattern(target)
            else:
                LayerPath.parse(target)
        self.targets = targets


@dataclass(frozen=True)
class HookHandle:
    spec_id: str
    installed_at: int


@dataclass(frozen=True)
class FeatureMapCapture:
    """Immutable snapshot of one layer output at one step/forward."""

    path: str
    step_index: int
    forward_index: int
    tensor: np.ndarray
    captured_phase: str


@dataclass
class _Installed:
    spec: BendSpec
    handle: HookHandle


class BendSession:
    """Single-writer session over one pipeline: bends, captures, generations."""

    def __init__(self, pipeline):
        self.pipeline = pipeline
        self._bends: dict[str, _Installed] = {}
        self._issued: set[tuple[str, int]] = set()
        self._seq = 0
        self._edits: dict[str, object] = {}
        self._edit_seq = 0
        self._lock = threading.Lock()
        self._subscribed = False
        self._generating = False
        # per-run state
        self._current_step = 0
        self._last_step: int | None = None
        self._gen_seed = 0
        self._records: dict[tuple[str, str], list[FeatureMapCapture]] = {}
        self._fwd_seen: dict[tuple[str, int], int] = {}
        self._counts: dict[str, int] = {}
        self._last_params: GenerationParams | None = None
        self._last_report: dict | None = None

    # -- bend registry -------------------------------------------------------

    def install_bend(self, spec: BendSpec) -> HookHandle:
        """Validate targets against the live tree and register the bend."""
        with self._lock:
            if spec.id in self._bends:
                raise DuplicateId(f"bend id {spec.id!r} is already installed")
            tree = self.pipeline.model_tree(spec.component_id)
            concrete: list[str] = []
            for target in spec.targets:
                if is_pattern(target):
                    matches = [p.text() for p in match_paths(tree, target)
                               if resolve_path(tree, p).bendable]
                    if not matches:
                        raise PathNotFound(f"pattern {target!r} matches no bendable layers")
                    concrete.extend(matches)
                else:
                    node = resolve_path(tree, target)
                    if not node.bendable:
                        raise NotBendable(f"{target} is a {node.kind}, not a bendable layer")
                    concrete.append(LayerPath.parse(target).text())
            deduped = tuple(dict.fromkeys(concrete))
            handle = HookHandle(spec_id=spec.id, installed_at=self._seq)
            self._seq += 1
            self._bends[spec.id] = _Installed(spec=replace(spec, targets=deduped), handle=handle)
            self._issued.add((handle.spec_id, handle.installed_at))
            return handle

    def remove_bend(self, handle: HookHandle) -> bool:
        """Idempotent removal; True if the bend was still installed."""
        with self._lock:
            if (handle.spec_id, handle.installed_at) not in self._issued:
                raise UnknownHandle(f"handle {handle} was never issued by this session")
            entry = self._bends.get(handle.spec_id)
            if entry is not None and entry.handle == handle:
                del self._bends[handle.spec_id]
                return True
            return False

    def remove_bend_id(self, spec_id: str) -> bool:
        with self._lock:
            return self._bends.pop(spec_id, None) is not None

    def clear_bends(self) -> None:
        with self._lock:
            self._bends.clear()

    def installed_specs(self) -> list[BendSpec]:
        return [entry.spec for entry in self._bends.values()]

    def handle_for(self, spec_id: str) -> HookHandle | None:
        entry = self._bends.get(spec_id)
        return entry.handle if entry else None

    # -- conditioning edits ---------------------------------------------------

    def add_conditioning_edit(self, edit) -> str:
        with self._lock:
            self._edit_seq += 1
            edit_id = f"e{self._edit_seq}"
            self._edits[edit_id] = edit
            return edit_id

    def remove_conditioning_edit(self, edit_id: str) -> bool:
        with self._lock:
            return self._edits.pop(edit_id, None) is not None

    def conditioning_edits(self) -> list:
        return list(self._edits.values())

    def conditioning_edit_items(self) -> list[tuple[str, object]]:
        return list(self._edits.items())

    def set_conditioning_edits(self, edits) -> None:
        with self._lock:
            self._edits.clear()
            for edit in edits:
                self._edit_seq += 1
                self._edits[f"e{self._edit_seq}"] = edit

    # -- step gating -----------------------------------------------------------

    def notify_step(self, step_index: int) -> None:
        """Called by the sampler before each denoising step."""
        if self._last_step is not None and step_index < self._last_step:
            raise OutOfOrderStep(
                f"step {step_index} after step {self._last_step} within one generation"
            )
        self._last_step = step_index
        self._current_step = step_index

    def _on_step(self, step_index: int) -> None:
        if self._generating:
            self.notify_step(step_index)

    # -- generation -------------------------------------------------------------

    def generate(self, params: GenerationParams):
        """Run one generation; returns (uint8 H x W x 3 image, run report)."""
        if not self._lock.acquire(blocking=False):
            raise ConcurrentGeneration("session is busy")
        try:
            with self.pipeline.lock:
                return self._generate_locked(params)
        finally:
            self._lock.release()

    def _generate_locked(self, params: GenerationParams):
        adapter = self.pipeline.adapter
        if not self._subscribed:
            adapter.register_step_callback(self._on_step)
            self._subscribed = True

        # reset per-run state
        self._records = {}
        self._fwd_seen = {}
        self._counts = {entry.spec.id: 0 for entry in self._bends.values()}
        self._current_step = 0
        self._last_step = None
        self._gen_seed = params.seed
        self._generating = True

        chains = self._build_chains()
        tokens = []
        started = time.perf_counter()
        try:
            for component_id in COMPONENT_IDS:
                tree = self.pipeline.model_tree(component_id)
                for path, _node in iter_paths(tree):
                    text = path.text()
                    fn = self._make_node_fn(text, path, chains.get(text, ()))
                    tokens.append(adapter.install_output_transform(component_id, text, fn))
            cond = self.pipeline.encode_prompt(params.prompt)
            for edit in self._edits.values():
                cond = apply_conditioning_edit(cond, edit, self.pipeline)
            uncond = self.pipeline.encode_prompt(params.negative_prompt or "")
            latent = self.pipeline.run_denoise(params, cond, uncond)
            image = self.pipeline.render_image(latent)
        finally:
            for token in tokens:
                adapter.remove_output_transform(token)
            self._generating = False
        report = {
            "steps": params.steps,
            "bend_invocations": dict(self._counts),
            "duration_ms": int((time.perf_counter() - started) * 1000),
        }
        self._last_params = params
        self._last_report = report
        return image, report

    def _build_chains(self) -> dict[str, tuple]:
        chains: dict[str, list] = {}
        for entry in self._bends.values():
            for target in entry.spec.targets:
                chains.setdefault(target, []).append(entry.spec)
        return {path: tuple(specs) for path, specs in chains.items()}

    def _make_node_fn(self, path_text: str, path: LayerPath, specs: tuple):
        def node_fn(value):
            arr = np.asarray(value)
            original_shape = arr.shape
            x4 = arr if arr.ndim == 4 else arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
            step = self._current_step
            fwd = self._fwd_seen.get((path_text, step), 0)
            self._fwd_seen[(path_text, step)] = fwd + 1
            pre = x4.copy()
            pre.setflags(write=False)
            self._record(path_text, step, fwd, "pre_bend", pre)
            out = x4
            for spec in specs:
                if not spec.enabled or not spec.schedule.covers(step):
                    continue
                ctx = InvocationContext(step_index=step, base_seed=self._gen_seed,
                                        target_path=path)
                out = apply_operator(spec.operator, out, ctx)
                self._counts[spec.id] = self._counts.get(spec.id, 0) + 1
            if out is x4:
                post = pre
            else:
                post = out.copy()
                post.setflags(write=False)
            self._record(path_text, step, fwd, "post_bend", post)
            return out.reshape(original_shape)

        return node_fn

    def _record(self, path_text: str, step: int, fwd: int, phase: str,
                tensor: np.ndarray) -> None:
        cap = FeatureMapCapture(path=path_text, step_index=step, forward_index=fwd,
                                tensor=tensor, captured_phase=phase)
        self._records.setdefault((path_text, phase), []).append(cap)

    # -- captures ----------------------------------------------------------------

    def capture_activation(self, path, steps: StepSchedule | None = None,
                           phase: str = "pre_bend") -> list[FeatureMapCapture]:
        """Snapshots of one layer from the most recent generation."""
        if phase not in CAPTURE_PHASES:
            raise ValueError(f"phase must be one of {CAPTURE_PHASES}, got {phase!r}")
        text = LayerPath.parse(str(path)).text()
        self._resolve_any_component(text)
        schedule = steps or StepSchedule(())
        return [cap for cap in self._records.get((text, phase), ())
                if schedule.covers(cap.step_index)]

    def _resolve_any_component(self, path_text: str):
        root = path_text.split(".", 1)[0]
        for component_id in COMPONENT_IDS:
            tree = self.pipeline.model_tree(component_id)
            if tree.root.name == root:
                return resolve_path(tree, path_text)
        raise PathNotFound(f"no component has a root named {root!r}")

    # -- bookkeeping for recipes / services ---------------------------------------

    @property
    def last_params(self) -> GenerationParams | None:
        return self._last_params

    @property
    def last_report(self) -> dict | None:
        return self._last_report

    def set_last_params(self, params: GenerationParams) -> None:
        self._last_params = params

    def has_run(self) -> bool:
        return self._last_report is not None
