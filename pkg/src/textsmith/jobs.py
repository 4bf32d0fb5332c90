"""Persistent job records and the worker that executes them.

Each job lives in ``<workspace>/jobs/<id>/``: inputs under ``inputs/``,
outputs at the top level, per-step attention heatmaps under ``attention/``,
and the full record in ``job.json``.  The store survives restarts; jobs that
were mid-run when the process died are marked failed rather than re-executed,
so a crashed run never writes artifacts twice.
"""

import dataclasses
import json
import os
import queue
import shutil
import threading
import time
import uuid
from typing import Callable, Dict, List, Optional

import numpy as np
from PIL import Image

from .backbone import BackboneSession
from .losses import GuidanceWeights
from .pipeline import (
    AttentionRecorder,
    SamplingSchedule,
    run_application,
    task_phases,
)

JOB_STATES = ("queued", "running", "done", "failed")
_TRANSITIONS = {
    "queued": {"running", "failed"},
    "running": {"done", "failed"},
    "done": set(),
    "failed": set(),
}


@dataclasses.dataclass
class EditJob:
    id: str
    task: str
    params: Dict          # target_text, source_text, seed, weights/schedule overrides
    input_paths: Dict[str, str]
    state: str = "queued"
    progress: float = 0.0
    artifacts: Dict[str, str] = dataclasses.field(default_factory=dict)
    timings: Dict[str, float] = dataclasses.field(default_factory=dict)
    error: Optional[str] = None
    created_at: float = dataclasses.field(default_factory=time.time)
    finished_at: Optional[float] = None
    touched_at: float = dataclasses.field(default_factory=time.time)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "EditJob":
        return cls(**data)

    def public_dict(self) -> Dict:
        d = self.to_dict()
        d.pop("touched_at")
        d["artifacts"] = sorted(self.artifacts)   # names only; bytes via endpoint
        d.pop("input_paths")
        return d


class JobStore:
    """Thread-safe registry of jobs, persisted one directory per job."""

    def __init__(self, workspace: str, retention: int = 50):
        if retention < 1:
            raise ValueError("retention must be positive")
        self.workspace = os.path.abspath(workspace)
        self.jobs_root = os.path.join(self.workspace, "jobs")
        os.makedirs(self.jobs_root, exist_ok=True)
        self.retention = retention
        self._lock = threading.RLock()
        self._jobs: Dict[str, EditJob] = {}

    # -- persistence ------------------------------------------------------

    def job_dir(self, job_id: str) -> str:
        return os.path.join(self.jobs_root, job_id)

    def _persist(self, job: EditJob):
        path = os.path.join(self.job_dir(job.id), "job.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(job.to_dict(), fh, indent=2)
        os.replace(tmp, path)

    def load(self) -> List[str]:
        """Read persisted jobs back; returns ids still queued (to re-enqueue).

        Jobs caught in the running state were interrupted: they become
        failed and are never re-executed.
        """
        with self._lock:
            for name in sorted(os.listdir(self.jobs_root)):
                record = os.path.join(self.jobs_root, name, "job.json")
                if not os.path.exists(record):
                    continue
                with open(record) as fh:
                    job = EditJob.from_dict(json.load(fh))
                if job.state == "running":
                    job.state = "failed"
                    job.error = "interrupted by service restart"
                    job.finished_at = time.time()
                    self._persist(job)
                self._jobs[job.id] = job
            return [j.id for j in sorted(self._jobs.values(),
                                         key=lambda j: j.created_at)
                    if j.state == "queued"]

    # -- lifecycle --------------------------------------------------------

    def create(self, task: str, params: Dict,
               input_paths: Optional[Dict[str, str]] = None) -> EditJob:
        job = EditJob(id=uuid.uuid4().hex[:12], task=task, params=params,
                      input_paths=input_paths or {})
        with self._lock:
            os.makedirs(os.path.join(self.job_dir(job.id), "inputs"), exist_ok=True)
            self._jobs[job.id] = job
            self._persist(job)
            self._prune()
        return job

    def get(self, job_id: str) -> EditJob:
        with self._lock:
            if job_id not in self._jobs:
                raise KeyError(job_id)
            job = self._jobs[job_id]
            job.touched_at = time.time()
            return job

    def attach_inputs(self, job_id: str, paths: Dict[str, str]):
        with self._lock:
            job = self._jobs[job_id]
            job.input_paths = dict(paths)
            self._persist(job)

    def list_jobs(self) -> List[EditJob]:
        with self._lock:
            return sorted(self._jobs.values(), key=lambda j: j.created_at,
                          reverse=True)

    def _advance(self, job_id: str, state: str, **updates):
        with self._lock:
            job = self._jobs[job_id]
            if state not in _TRANSITIONS[job.state]:
                raise ValueError(f"illegal transition {job.state} -> {state}")
            job.state = state
            for key, val in updates.items():
                setattr(job, key, val)
            self._persist(job)

    def mark_running(self, job_id: str):
        self._advance(job_id, "running")

    def mark_done(self, job_id: str, artifacts: Dict[str, str],
                  timings: Dict[str, float]):
        if "final" not in artifacts:
            raise ValueError("done jobs must carry a final artifact")
        self._advance(job_id, "done", artifacts=artifacts, timings=timings,
                      progress=1.0, finished_at=time.time())

    def mark_failed(self, job_id: str, error: str):
        self._advance(job_id, "failed", error=error, finished_at=time.time())

    def set_progress(self, job_id: str, fraction: float):
        with self._lock:
            job = self._jobs[job_id]
            if job.state == "running":
                job.progress = min(max(fraction, 0.0), 1.0)
                self._persist(job)

    # -- retention --------------------------------------------------------

    def _prune(self):
        finished = [j for j in self._jobs.values() if j.state in ("done", "failed")]
        excess = len(self._jobs) - self.retention
        if excess <= 0:
            return
        finished.sort(key=lambda j: j.touched_at)
        for job in finished[:excess]:
            del self._jobs[job.id]
            shutil.rmtree(self.job_dir(job.id), ignore_errors=True)


def attention_heatmap(field: np.ndarray, upscale: int = 8) -> np.ndarray:
    """Min-max normalize one token field to a uint8 grayscale image."""
    lo, hi = float(field.min()), float(field.max())
    span = hi - lo if hi > lo else 1.0
    img = ((field - lo) / span * 255.0).round().astype(np.uint8)
    if upscale > 1:
        img = np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
    return img


class _ProgressRecorder(AttentionRecorder):
    """Recorder that also reports committed-step fraction to a callback."""

    def __init__(self, total_steps: int, callback: Callable[[float], None]):
        super().__init__()
        self._total = max(total_steps, 1)
        self._callback = callback
        self._seen = 0

    def observe(self, phase, step, amap, layout):
        super().observe(phase, step, amap, layout)
        self._seen += 1
        self._callback(self._seen / self._total)


def _save_png(path: str, array: np.ndarray):
    Image.fromarray(array).save(path)


def _load_rgb(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def _load_mask(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return np.where(arr >= 128, 255, 0).astype(np.uint8)


def apply_overrides(weights: GuidanceWeights, schedule: SamplingSchedule,
                    params: Dict):
    """Layer a job's optional weight/schedule settings over the defaults."""
    w_over = dict(params.get("weights") or {})
    s_over = dict(params.get("schedule") or {})
    for key in ("optimization_stages", "adam_betas"):
        if key in s_over:
            s_over[key] = tuple(s_over[key])
    return (dataclasses.replace(weights, **w_over),
            dataclasses.replace(schedule, **s_over))


def execute_job(job: EditJob, store: JobStore, session: BackboneSession,
                weights: GuidanceWeights, schedule: SamplingSchedule) -> None:
    """Run one job to completion, saving artifacts into its directory."""
    weights, schedule = apply_overrides(weights, schedule, job.params)
    paths = job.input_paths
    image = _load_rgb(paths["image"])
    mask = _load_mask(paths["mask"])
    reference_image = _load_rgb(paths["reference"]) if "reference" in paths else None
    reference_mask = _load_mask(paths["reference_mask"]) if "reference_mask" in paths else None
    removal_mask = _load_mask(paths["removal_mask"]) if "removal_mask" in paths else None

    total = schedule.total_steps * len(task_phases(job.task))
    recorder = _ProgressRecorder(total, lambda f: store.set_progress(job.id, f))

    result = run_application(
        job.task, image, mask, session,
        target_text=job.params.get("target_text") or None,
        source_text=job.params.get("source_text") or None,
        removal_pixel_mask=removal_mask,
        reference_image=reference_image,
        reference_pixel_mask=reference_mask,
        weights=weights,
        schedule=schedule,
        seed=int(job.params.get("seed", 0)),
        recorder=recorder,
    )

    out_dir = store.job_dir(job.id)
    artifacts: Dict[str, str] = {}
    for name, array in result.artifacts.items():
        fname = f"{name}.png"
        _save_png(os.path.join(out_dir, fname), array)
        artifacts[name] = fname

    meta_name = "metadata.json"
    with open(os.path.join(out_dir, meta_name), "w") as fh:
        json.dump(result.metadata, fh, indent=2, default=float)
    artifacts["metadata"] = meta_name

    stages = result.metadata.get("inpainting", {}).get("optimization_stages")
    if stages is not None:
        with open(os.path.join(out_dir, "losses.json"), "w") as fh:
            json.dump({"stages": stages}, fh, indent=2)
        artifacts["losses"] = "losses.json"

    att_dir = os.path.join(out_dir, "attention")
    os.makedirs(att_dir, exist_ok=True)
    for phase, steps in recorder.snapshots.items():
        layout = recorder.layouts[phase]
        # average the character token fields; removal has none, so show the
        # sequence-end token that reassignment drives inside the mask
        rows = list(layout.char_indices) or [layout.idx_seq_end]
        for step, fields in steps.items():
            heat = attention_heatmap(fields[rows].mean(axis=0))
            _save_png(os.path.join(att_dir, f"{phase}_{step:02d}.png"), heat)

    store.mark_done(job.id, artifacts, result.metadata.get("timings", {}))


class JobRunner:
    """FIFO executor: one worker thread per device slot."""

    _SENTINEL = None

    def __init__(self, store: JobStore,
                 session_factory: Callable[[], BackboneSession],
                 weights: Optional[GuidanceWeights] = None,
                 schedule: Optional[SamplingSchedule] = None,
                 slots: int = 1):
        if slots < 1:
            raise ValueError("need at least one device slot")
        self.store = store
        self.session_factory = session_factory
        self.weights = weights or GuidanceWeights()
        self.schedule = schedule or SamplingSchedule()
        self.slots = slots
        self._queue: "queue.Queue" = queue.Queue()
        self._threads: List[threading.Thread] = []

    def start(self):
        for i in range(self.slots):
            t = threading.Thread(target=self._worker, name=f"textsmith-slot{i}",
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def submit(self, job_id: str):
        self._queue.put(job_id)

    def shutdown(self):
        for _ in self._threads:
            self._queue.put(self._SENTINEL)
        for t in self._threads:
            t.join(timeout=30)
        self._threads = []

    def join(self):
        """Block until everything queued so far has been processed."""
        self._queue.join()

    def _worker(self):
        while True:
            job_id = self._queue.get()
            if job_id is self._SENTINEL:
                self._queue.task_done()
                return
            try:
                try:
                    job = self.store.get(job_id)
                except KeyError:
                    continue    # pruned while queued
                if job.state != "queued":
                    continue
                self.store.mark_running(job_id)
                try:
                    execute_job(job, self.store, self.session_factory(),
                                self.weights, self.schedule)
                except Exception as exc:          # noqa: BLE001 - job boundary
                    self.store.mark_failed(job_id, f"{type(exc).__name__}: {exc}")
            finally:
                self._queue.task_done()
