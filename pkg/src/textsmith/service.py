"""Local HTTP service exposing the engine to scripts and the studio UI.

Jobs are asynchronous: POST /jobs enqueues, GET /jobs/{id} polls, and
GET /jobs/{id}/result hands back artifact links once the run is done.
Images arrive either as multipart uploads or as paths relative to the
shared workspace directory (env ``TEXTSMITH_WORKSPACE``).
"""

import contextlib
import dataclasses
import io
import json
import os
import shutil
from typing import Callable, Dict, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .backbone import BackboneProfile, BackboneSession, make_stub_backbone
from .jobs import JobRunner, JobStore, apply_overrides
from .losses import GuidanceWeights
from .masks import shrink_mask
from .pipeline import TASKS, SamplingSchedule, _EXPLICIT_REFERENCE

WORKSPACE_ENV = "TEXTSMITH_WORKSPACE"
_TEXT_TASKS = tuple(t for t in TASKS if t != "removal")


@dataclasses.dataclass
class ServiceConfig:
    workspace: Optional[str] = None
    device_slots: int = 1
    retention: int = 50
    backbone_seed: int = 0
    profile_path: Optional[str] = None
    weights: GuidanceWeights = dataclasses.field(default_factory=GuidanceWeights)
    schedule: SamplingSchedule = dataclasses.field(default_factory=SamplingSchedule)
    studio_dir: Optional[str] = None

    @classmethod
    def from_file(cls, path: str) -> "ServiceConfig":
        with open(path) as fh:
            raw = json.load(fh)
        weights = GuidanceWeights(**raw.pop("weights", {}))
        sched = raw.pop("schedule", {})
        for key in ("optimization_stages", "adam_betas"):
            if key in sched:
                sched[key] = tuple(sched[key])
        return cls(weights=weights, schedule=SamplingSchedule(**sched), **raw)

    def resolve_workspace(self) -> str:
        root = self.workspace or os.environ.get(WORKSPACE_ENV) \
            or os.path.join(os.getcwd(), "textsmith-workspace")
        os.makedirs(root, exist_ok=True)
        return os.path.abspath(root)


def _default_session_factory(config: ServiceConfig) -> Callable[[], BackboneSession]:
    profile = (BackboneProfile.from_file(config.profile_path)
               if config.profile_path else None)
    return lambda: make_stub_backbone(seed=config.backbone_seed, profile=profile)


def _decode_rgb(data: bytes) -> np.ndarray:
    try:
        return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
    except Exception as exc:
        raise HTTPException(422, f"undecodable image: {exc}") from exc


def _decode_mask(data: bytes) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
    except Exception as exc:
        raise HTTPException(422, f"undecodable mask: {exc}") from exc
    return np.where(arr >= 128, 255, 0).astype(np.uint8)


async def _read_payload(request: Request, workspace: str) -> Dict:
    """Normalize multipart uploads and JSON path payloads to {field: bytes}."""
    ctype = request.headers.get("content-type", "")
    fields: Dict = {}
    if ctype.startswith("application/json"):
        body = await request.json()
        for key in ("image", "mask", "reference", "reference_mask", "removal_mask"):
            rel = body.pop(f"{key}_path", None)
            if rel is None:
                continue
            path = os.path.normpath(os.path.join(workspace, rel))
            if not path.startswith(workspace + os.sep):
                raise HTTPException(422, f"{key}_path escapes the workspace")
            if not os.path.exists(path):
                raise HTTPException(422, f"{key}_path not found: {rel}")
            with open(path, "rb") as fh:
                fields[key] = fh.read()
        fields.update(body)
    else:
        form = await request.form()
        for key, value in form.multi_items():
            fields[key] = await value.read() if hasattr(value, "read") else value
    return fields


def create_app(config: Optional[ServiceConfig] = None,
               session_factory: Optional[Callable[[], BackboneSession]] = None) -> FastAPI:
    config = config or ServiceConfig()
    workspace = config.resolve_workspace()
    store = JobStore(workspace, retention=config.retention)
    factory = session_factory or _default_session_factory(config)
    runner = JobRunner(store, factory, weights=config.weights,
                       schedule=config.schedule, slots=config.device_slots)
    probe = factory()
    pixel_dims = probe.profile.pixel_dims

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        for job_id in store.load():
            runner.submit(job_id)
        runner.start()
        yield
        runner.shutdown()

    app = FastAPI(title="textsmith", lifespan=lifespan)
    app.state.store = store
    app.state.runner = runner
    app.state.workspace = workspace

    def _get_job(job_id: str):
        try:
            return store.get(job_id)
        except KeyError:
            raise HTTPException(404, "unknown job id")

    @app.get("/health")
    def health():
        return {"status": "ok", "pixel_dims": list(pixel_dims)}

    @app.post("/jobs", status_code=201)
    async def submit_job(request: Request):
        fields = await _read_payload(request, workspace)
        task = fields.get("task")
        if task not in TASKS:
            raise HTTPException(422, f"task must be one of {', '.join(TASKS)}")
        if "image" not in fields or "mask" not in fields:
            raise HTTPException(422, "image and mask are required")

        image = _decode_rgb(fields["image"])
        mask = _decode_mask(fields["mask"])
        if image.shape[:2] != tuple(pixel_dims):
            raise HTTPException(422, f"image dims must be {pixel_dims}")
        if mask.shape != image.shape[:2]:
            raise HTTPException(422, "mask dims must match the image")
        if not (mask == 255).any():
            raise HTTPException(422, "mask selects no pixels")

        target_text = str(fields.get("target_text", "") or "")
        if task in _TEXT_TASKS and not target_text:
            raise HTTPException(422, f"{task} requires target_text")
        if task in _EXPLICIT_REFERENCE and (
                "reference" not in fields or "reference_mask" not in fields):
            raise HTTPException(422, f"{task} requires reference and reference_mask")

        params = {
            "target_text": target_text,
            "source_text": str(fields.get("source_text", "") or ""),
            "seed": int(fields.get("seed", 0)),
        }
        for key in ("weights", "schedule"):
            if key in fields and fields[key]:
                raw = fields[key]
                params[key] = json.loads(raw) if isinstance(raw, str) else raw
        try:  # surface bad override names/values at submit time
            apply_overrides(config.weights, config.schedule, params)
        except (TypeError, ValueError) as exc:
            raise HTTPException(422, f"bad override: {exc}")

        job = store.create(task, params)
        in_dir = os.path.join(store.job_dir(job.id), "inputs")
        saved: Dict[str, str] = {}
        to_save = {"image": image, "mask": mask}
        if "reference" in fields:
            to_save["reference"] = _decode_rgb(fields["reference"])
        if "reference_mask" in fields:
            to_save["reference_mask"] = _decode_mask(fields["reference_mask"])
        if "removal_mask" in fields:
            to_save["removal_mask"] = _decode_mask(fields["removal_mask"])
        for name, arr in to_save.items():
            path = os.path.join(in_dir, f"{name}.png")
            Image.fromarray(arr).save(path)
            saved[name] = path
        store.attach_inputs(job.id, saved)

        runner.submit(job.id)
        return {"id": job.id, "state": job.state}

    @app.get("/jobs")
    def list_jobs():
        return {"jobs": [j.public_dict() for j in store.list_jobs()]}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        return _get_job(job_id).public_dict()

    @app.get("/jobs/{job_id}/result")
    def job_result(job_id: str):
        job = _get_job(job_id)
        if job.state != "done":
            return JSONResponse(
                status_code=409,
                content={"state": job.state, "error": job.error,
                         "progress": job.progress})
        return {
            "id": job.id,
            "artifacts": {name: f"/jobs/{job.id}/artifacts/{name}"
                          for name in job.artifacts},
            "timings": job.timings,
        }

    @app.get("/jobs/{job_id}/artifacts/{name}")
    def job_artifact(job_id: str, name: str):
        job = _get_job(job_id)
        if name not in job.artifacts:
            raise HTTPException(404, "no such artifact")
        path = os.path.join(store.job_dir(job_id), job.artifacts[name])
        if not os.path.exists(path):
            raise HTTPException(404, "artifact pruned")
        return FileResponse(path)

    @app.get("/jobs/{job_id}/attention/{step}")
    def attention_snapshot(job_id: str, step: int, phase: Optional[str] = None):
        job = _get_job(job_id)
        att_dir = os.path.join(store.job_dir(job_id), "attention")
        if phase is None:
            # prefer the rendering phase when the task had one
            for candidate in ("inpainting", "removal"):
                if os.path.exists(os.path.join(att_dir, f"{candidate}_{step:02d}.png")):
                    phase = candidate
                    break
        if phase is None:
            raise HTTPException(404, "no snapshot for that step")
        path = os.path.join(att_dir, f"{phase}_{step:02d}.png")
        if not os.path.exists(path):
            raise HTTPException(404, "no snapshot for that step")
        return FileResponse(path, media_type="image/png")

    @app.post("/preview/shrink")
    async def preview_shrink(request: Request):
        fields = await _read_payload(request, workspace)
        if "mask" not in fields:
            raise HTTPException(422, "mask is required")
        mask = _decode_mask(fields["mask"])
        source = str(fields.get("source_text", "") or "")
        target = str(fields.get("target_text", "") or "")
        if not source or not target:
            raise HTTPException(422, "source_text and target_text are required")
        if not (mask == 255).any():
            raise HTTPException(422, "mask selects no pixels")
        try:
            shrunk, _ = shrink_mask(mask, source, target)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        buf = io.BytesIO()
        Image.fromarray(shrunk).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    studio = config.studio_dir
    if studio and os.path.isdir(studio):
        app.mount("/studio", StaticFiles(directory=studio, html=True), name="studio")

    return app
