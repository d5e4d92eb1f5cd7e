"""HTTP facade over one bending session: trees, bend CRUD, jobs, captures.

Single-user, in-memory service; the unit of persistence is the exported
recipe, never the session. Jobs run FIFO on a background worker; clients
poll GET /api/jobs/{id}. Errors are structured as
``{"error": {"code": ..., "message": ...}}`` with 400/404/409 statuses.
"""

from __future__ import annotations

import hashlib
import os
import queue
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .errors import (
    AdapterError,
    BendlabError,
    ChannelOutOfRange,
    ConcurrentGeneration,
    DuplicateId,
    NonFiniteInput,
    NotBendable,
    OperatorParamError,
    PathNotFound,
    PathSyntaxError,
    PatternSyntaxError,
    SchemaError,
    VersionError,
)
from .featureviz import ReductionSpec, make_grid, normalize_to_image, png_bytes, reduce_channels
from .hooks import BendSession, StepSchedule
from .model_graph import KINDS, iter_paths, tree_to_json
from .pipeline import GenerationParams, build_toy_pipeline
from .recipes import (
    Recipe,
    generation_from_dict,
    bend_from_dict,
    edit_from_dict,
    parse_recipe,
    serialize_recipe,
)

DEFAULT_PORT = 8688

_DEFAULT_GENERATION = {
    "prompt": "",
    "negative_prompt": None,
    "seed": 0,
    "steps": 20,
    "cfg": 7.0,
    "sampler_id": "euler",
    "scheduler_id": "normal",
    "latent_shape": [1, 4, 16, 16],
}

_ERROR_STATUS = (
    (PathNotFound, 404, "path_not_found"),
    (NotBendable, 400, "not_bendable"),
    (DuplicateId, 409, "duplicate_id"),
    (VersionError, 400, "version_error"),
    (SchemaError, 400, "schema_error"),
    (PatternSyntaxError, 400, "schema_error"),
    (PathSyntaxError, 400, "schema_error"),
    (OperatorParamError, 400, "operator_param"),
    (ChannelOutOfRange, 400, "channel_out_of_range"),
    (NonFiniteInput, 400, "non_finite_input"),
    (ConcurrentGeneration, 409, "busy"),
    (AdapterError, 404, "unknown_component"),
)


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def _map_error(err: BendlabError) -> JSONResponse:
    for cls, status, code in _ERROR_STATUS:
        if isinstance(err, cls):
            return _error(status, code, str(err))
    return _error(400, "bendlab_error", str(err))


# ---------------------------------------------------------------------------
# Job queue (usable without HTTP)
# ---------------------------------------------------------------------------

@dataclass
class Job:
    id: str
    status: str = "queued"  # queued -> running -> done | failed
    result: dict | None = None
    error: dict | None = None

    def as_dict(self) -> dict:
        return {"id": self.id, "status": self.status, "result": self.result, "error": self.error}


@dataclass
class JobQueue:
    """FIFO generation jobs for one session; one at a time, polled status."""

    session: BendSession
    jobs: dict[str, Job] = field(default_factory=dict)
    images: dict[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        self._q: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._count = 0
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is None:
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()

    def stop(self) -> None:
        if self._thread is not None:
            self._q.put(None)
            self._thread.join(timeout=30)
            self._thread = None

    def busy(self) -> bool:
        return any(job.status in ("queued", "running") for job in self.jobs.values())

    def submit(self, params: GenerationParams) -> Job:
        with self._lock:
            self._count += 1
            job = Job(id=f"job{self._count}")
            self.jobs[job.id] = job
            self._q.put((job, params))
            return job

    def wait_idle(self, timeout: float = 60.0) -> None:
        """Block until every queued job finished (used by tests/demos)."""
        self._q.join()
        _ = timeout

    def _loop(self) -> None:
        while True:
            item = self._q.get()
            if item is None:
                self._q.task_done()
                return
            job, params = item
            job.status = "running"
            try:
                image, report = self.session.generate(params)
                png = png_bytes(image)
                self.images[job.id] = png
                job.result = {
                    "image_id": job.id,
                    "image_sha256": hashlib.sha256(png).hexdigest(),
                    "report": report,
                }
                job.status = "done"
            except Exception as err:  # job failure never kills the queue
                job.error = {"code": type(err).__name__, "message": str(err)}
                job.status = "failed"
            finally:
                self._q.task_done()


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------

def create_app(init_seed: int = 1, frontend_dir: str | None = None) -> FastAPI:
    session = BendSession(build_toy_pipeline(init_seed))
    jobs = JobQueue(session)
    bend_counter = {"n": 0}
    captures: dict[str, bytes] = {}
    capture_meta: dict[str, dict] = {}
    capture_counter = {"n": 0}
    submit_lock = threading.Lock()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        jobs.start()
        yield
        jobs.stop()

    app = FastAPI(title="bendlab", lifespan=lifespan)
    app.state.session = session
    app.state.jobs = jobs

    @app.exception_handler(BendlabError)
    async def _bendlab_error(_request: Request, err: BendlabError):
        return _map_error(err)

    # -- model graph ------------------------------------------------------

    @app.get("/api/model/tree")
    def model_tree(component: str):
        tree = session.pipeline.model_tree(component)
        return Response(content=tree_to_json(tree), media_type="application/json")

    @app.get("/api/model/layers")
    def model_layers(component: str, kind: str | None = None):
        if kind is not None and kind not in KINDS:
            return _error(400, "schema_error", f"unknown kind {kind!r}")
        tree = session.pipeline.model_tree(component)
        layers = [
            {"path": path.text(), "kind": node.kind, "bendable": node.bendable}
            for path, node in iter_paths(tree)
            if node.bendable and (kind is None or node.kind == kind)
        ]
        return {"layers": layers}

    # -- bends --------------------------------------------------------------

    def _installed_bends() -> list[dict]:
        from .recipes import _bend_to_dict
        return [_bend_to_dict(spec) for spec in session.installed_specs()]

    @app.post("/api/bends")
    async def install_bend(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            return _error(400, "schema_error", "bend must be a JSON object")
        body = dict(body)
        if "id" not in body:
            bend_counter["n"] += 1
            body["id"] = f"b{bend_counter['n']}"
        body.setdefault("schedule", {"ranges": []})
        body.setdefault("enabled", True)
        spec = bend_from_dict(body, "bend")
        session.install_bend(spec)
        installed = next(s for s in session.installed_specs() if s.id == spec.id)
        from .recipes import _bend_to_dict
        return _bend_to_dict(installed)

    @app.get("/api/bends")
    def list_bends():
        return {"bends": _installed_bends()}

    @app.delete("/api/bends/{bend_id}")
    def delete_bend(bend_id: str):
        if not session.remove_bend_id(bend_id):
            return _error(404, "unknown_bend", f"no installed bend {bend_id!r}")
        return {"removed": bend_id}

    # -- generation jobs ------------------------------------------------------

    @app.post("/api/generate")
    async def generate(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            return _error(400, "schema_error", "generation params must be a JSON object")
        merged = {**_DEFAULT_GENERATION, **body}
        params = generation_from_dict(merged, "generation")
        with submit_lock:
            if jobs.busy():
                return _error(409, "busy", "a generation job is already queued or running")
            job = jobs.submit(params)
        return {"job_id": job.id, "status": job.status}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        job = jobs.jobs.get(job_id)
        if job is None:
            return _error(404, "unknown_job", f"no job {job_id!r}")
        return job.as_dict()

    @app.get("/api/images/{image_id}.png")
    def image_png(image_id: str):
        data = jobs.images.get(image_id)
        if data is None:
            return _error(404, "unknown_image", f"no image {image_id!r}")
        return Response(content=data, media_type="image/png")

    # -- captures ---------------------------------------------------------------

    @app.post("/api/captures")
    async def make_capture(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            return _error(400, "schema_error", "capture request must be a JSON object")
        unknown = set(body) - {"path", "steps", "phase", "reduction", "columns"}
        if unknown:
            return _error(400, "schema_error", f"unknown keys: {sorted(unknown)}")
        if "path" not in body:
            return _error(400, "schema_error", "capture request needs a 'path'")
        if not session.has_run():
            return _error(409, "no_generation", "no generation has completed yet")
        phase = body.get("phase", "pre_bend")
        if phase not in ("pre_bend", "post_bend"):
            return _error(400, "schema_error", f"bad phase {phase!r}")
        red_raw = body.get("reduction") or {"method": "mean"}
        try:
            reduction = ReductionSpec(method=red_raw.get("method", "mean"),
                                      channel_index=red_raw.get("channel_index"))
        except (ValueError, AttributeError) as err:
            return _error(400, "schema_error", f"bad reduction: {err}")
        steps_raw = body.get("steps")
        schedule = StepSchedule(tuple((int(lo), int(hi)) for lo, hi in steps_raw)) \
            if steps_raw else StepSchedule(())
        columns = int(body.get("columns", 5))
        caps = session.capture_activation(body["path"], schedule, phase)
        if not caps:
            return _error(404, "no_captures", "no captures matched the requested steps")
        tiles = [normalize_to_image(reduce_channels(c.tensor, reduction)[0]) for c in caps]
        grid = make_grid(tiles, columns)
        capture_counter["n"] += 1
        capture_id = f"cap{capture_counter['n']}"
        captures[capture_id] = png_bytes(grid)
        capture_meta[capture_id] = {
            "id": capture_id,
            "path": caps[0].path,
            "phase": phase,
            "count": len(caps),
            "steps": [c.step_index for c in caps],
            "forwards": [c.forward_index for c in caps],
        }
        return capture_meta[capture_id]

    @app.get("/api/captures/{capture_id}.png")
    def capture_png(capture_id: str):
        data = captures.get(capture_id)
        if data is None:
            return _error(404, "unknown_capture", f"no capture {capture_id!r}")
        return Response(content=data, media_type="image/png")

    # -- recipes -------------------------------------------------------------------

    def _current_recipe() -> Recipe:
        params = session.last_params or generation_from_dict(dict(_DEFAULT_GENERATION), "generation")
        return Recipe(generation=params,
                      bends=tuple(session.installed_specs()),
                      conditioning_edits=tuple(session.conditioning_edits()))

    @app.get("/api/recipe")
    def export_recipe():
        return Response(content=serialize_recipe(_current_recipe()),
                        media_type="application/json")

    @app.put("/api/recipe")
    async def import_recipe(request: Request):
        text = (await request.body()).decode("utf-8")
        recipe = parse_recipe(text)
        session.clear_bends()
        for spec in recipe.bends:
            session.install_bend(spec)
        session.set_conditioning_edits(recipe.conditioning_edits)
        session.set_last_params(recipe.generation)
        return {"ok": True, "bends": [spec.id for spec in session.installed_specs()]}

    # -- conditioning edits -----------------------------------------------------------

    @app.post("/api/conditioning_edits")
    async def add_edit(request: Request):
        body = await request.json()
        edit = edit_from_dict(body, "conditioning_edit")
        edit_id = session.add_conditioning_edit(edit)
        return {"id": edit_id, "kind": edit.kind, **edit.params}

    @app.delete("/api/conditioning_edits/{edit_id}")
    def delete_edit(edit_id: str):
        if not session.remove_conditioning_edit(edit_id):
            return _error(404, "unknown_edit", f"no conditioning edit {edit_id!r}")
        return {"removed": edit_id}

    if frontend_dir and os.path.isdir(frontend_dir):
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app


def run(host: str = "127.0.0.1", port: int | None = None, init_seed: int = 1) -> None:
    """Serve the API; port resolves flag > $BENDLAB_PORT > 8688."""
    import uvicorn

    if port is None:
        port = int(os.environ.get("BENDLAB_PORT", str(DEFAULT_PORT)))
    candidates = ("frontend/dist", os.path.join(os.path.dirname(__file__), "..", "..", "frontend", "dist"))
    frontend = next((c for c in candidates if os.path.isdir(c)), None)
    uvicorn.run(create_app(init_seed, frontend_dir=frontend), host=host, port=port)
