"""HTTP session service: thin JSON/multipart plumbing over explorer.

Sessions live in memory.  Requests for distinct sessions run concurrently;
within a session, mutations serialize through the session lock and at most
one editing job runs at a time, polled via /jobs.
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import explorer
from .cem import consistency_residual
from .errors import (Busy, CemxError, NothingToUndo, SingularKernel)
from .generator import toy_params
from .imagekit import BoundaryMode, load_image, to_bytes
from .kernels import bicubic_kernel, kernel_from_doc
from .objectives import EditJobSpec

DEFAULT_ADDR = "127.0.0.1:8787"


@dataclass
class Job:
    id: str
    state: str = "running"          # running | done | failed
    step: int = 0
    trace: list[float] = field(default_factory=list)
    error: str | None = None


@dataclass
class ApiSession:
    session: explorer.Session
    created_at: float = field(default_factory=time.time)
    jobs: dict[str, Job] = field(default_factory=dict)
    active_job: str | None = None
    job_lock: threading.Lock = field(default_factory=threading.Lock)
    alternatives: list[np.ndarray] = field(default_factory=list)


def _png_bytes(img: np.ndarray) -> bytes:
    from PIL import Image as PilImage
    data = to_bytes(img)
    pil = PilImage.fromarray(data[:, :, 0] if data.shape[2] == 1 else data)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def _error(status: int, exc: Exception) -> JSONResponse:
    return JSONResponse({"error": type(exc).__name__, "detail": str(exc)},
                        status_code=status)


def create_app() -> FastAPI:
    app = FastAPI(title="cemx session service")
    sessions: dict[str, ApiSession] = {}

    @app.exception_handler(CemxError)
    async def _cemx_error(request: Request, exc: CemxError):
        if isinstance(exc, SingularKernel):
            return _error(422, exc)
        if isinstance(exc, (Busy, NothingToUndo)):
            return _error(409, exc)
        return _error(400, exc)

    def _get(sid: str) -> ApiSession:
        api = sessions.get(sid)
        if api is None:
            raise KeyError(sid)
        return api

    @app.exception_handler(KeyError)
    async def _not_found(request: Request, exc: KeyError):
        return JSONResponse({"error": "NotFound", "detail": str(exc)},
                            status_code=404)

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        form = await request.form()
        if "lr" not in form:
            return _error(400, ValueError("missing 'lr' image field"))
        lr_file = form["lr"]
        suffix = ".pgm" if getattr(lr_file, "filename", "").lower() \
            .endswith(".pgm") else ".png"
        import tempfile
        with tempfile.NamedTemporaryFile(suffix=suffix, delete=False) as fh:
            fh.write(await lr_file.read())
            path = fh.name
        try:
            y = load_image(path)
        finally:
            os.unlink(path)
        try:
            alpha = int(form.get("scale", 4))
        except (TypeError, ValueError):
            return _error(400, ValueError("scale must be an integer"))
        if alpha not in (1, 2, 3, 4):
            return _error(400, ValueError(f"scale {alpha} not in 1..4"))
        mode = str(form.get("mode", "direct"))
        boundary = str(form.get("boundary", "periodic"))
        try:
            bmode = BoundaryMode(boundary)
        except ValueError:
            return _error(400, ValueError(f"unknown boundary {boundary!r}"))
        if "kernel" in form:
            raw = await form["kernel"].read()
            try:
                doc = json.loads(raw)
            except ValueError as exc:
                return _error(400, ValueError(f"bad kernel json: {exc}"))
            kernel = kernel_from_doc(doc)
        else:
            kernel = bicubic_kernel(alpha)
        params = None
        if mode == "generator":
            params = toy_params(y.shape[2], hidden=8, alpha=alpha, seed=0)
        session = explorer.new_session(y, kernel, alpha, mode, bmode, params)
        sessions[session.id] = ApiSession(session)
        return JSONResponse({"id": session.id,
                             "hr_dims": list(session.hr_dims)},
                            status_code=201)

    @app.get("/sessions/{sid}/image.png")
    def get_image(sid: str):
        api = _get(sid)
        return Response(_png_bytes(api.session.x_hat), media_type="image/png")

    @app.post("/sessions/{sid}/edits", status_code=202)
    def post_edit(sid: str, body: dict):
        api = _get(sid)
        try:
            spec = EditJobSpec(
                tool=body["tool"],
                region=body.get("region", {}),
                params=body.get("params", {}),
                steps=int(body.get("steps", 50)),
                step_size=float(body.get("step_size", 0.5)))
        except (KeyError, TypeError, ValueError) as exc:
            return _error(400, ValueError(f"malformed edit spec: {exc}"))
        if spec.tool not in explorer.KNOWN_TOOLS:
            return _error(400, ValueError(f"unknown tool {spec.tool!r}"))
        with api.job_lock:
            active = api.jobs.get(api.active_job) if api.active_job else None
            if active is not None and active.state == "running":
                return _error(409, Busy("a job is already running"))
            job = Job(uuid.uuid4().hex)
            api.jobs[job.id] = job
            api.active_job = job.id

        def worker():
            def on_step(step, value):
                job.step = step
                job.trace = job.trace[:step - 1] + [value]
            try:
                trace = explorer.run_edit(api.session, spec, on_step=on_step)
                job.trace = trace[1:]       # one entry per accepted step
                job.step = len(job.trace)
                job.state = "done"
            except Exception as exc:        # job failures surface via polling
                job.error = f"{type(exc).__name__}: {exc}"
                job.state = "failed"

        threading.Thread(target=worker, daemon=True).start()
        return JSONResponse({"job_id": job.id}, status_code=202)

    @app.get("/sessions/{sid}/jobs/{jid}")
    def get_job(sid: str, jid: str):
        api = _get(sid)
        job = api.jobs.get(jid)
        if job is None:
            raise KeyError(jid)
        out = {"state": job.state, "step": job.step, "trace": job.trace}
        if job.error:
            out["error"] = job.error
        return out

    @app.post("/sessions/{sid}/knobs")
    def post_knobs(sid: str, body: dict):
        api = _get(sid)
        explorer.set_knobs(api.session, body.get("region", {}),
                           float(body.get("lam1", 0.5)),
                           float(body.get("lam2", 0.5)),
                           float(body.get("theta", 0.0)))
        return {"ok": True}

    @app.post("/sessions/{sid}/undo")
    def post_undo(sid: str):
        api = _get(sid)
        explorer.undo(api.session)
        return {"ok": True}

    @app.post("/sessions/{sid}/alternatives")
    def post_alternatives(sid: str, body: dict):
        api = _get(sid)
        n = int(body.get("n", 2))
        anchored = bool(body.get("anchored", False))
        steps = int(body.get("steps", 10))
        seed = int(body.get("seed", 0))
        latents, previews = explorer.diverse_alternatives(
            api.session, n, anchored, steps=steps, seed=seed)
        api.alternatives = latents
        encoded = [base64.b64encode(_png_bytes(p)).decode("ascii")
                   for p in previews]
        return {"count": n, "previews": encoded}

    @app.post("/sessions/{sid}/alternatives/{index}")
    def adopt_alternative(sid: str, index: int):
        api = _get(sid)
        if not 0 <= index < len(api.alternatives):
            raise KeyError(f"alternative {index}")
        explorer.adopt_latent(api.session, api.alternatives[index])
        return {"ok": True}

    @app.get("/sessions/{sid}/consistency")
    def get_consistency(sid: str):
        api = _get(sid)
        linf, rms = consistency_residual(api.session.op, api.session.x_hat,
                                         api.session.y)
        return {"linf": linf, "rms": rms}

    return app


def serve(addr: str | None = None) -> None:
    import uvicorn
    addr = addr or os.environ.get("CEMX_ADDR", DEFAULT_ADDR)
    host, _, port = addr.partition(":")
    uvicorn.run(create_app(), host=host or "127.0.0.1",
                port=int(port or 8787), log_level="warning")
