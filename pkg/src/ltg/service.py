"""Local HTTP service for the suggestion-approval loop.

Thin JSON view over examination sessions: each mutation holds the session's
lock, applies the decision, then drains the examination queue so the next
poll sees every newly reachable suggestion.  Reports are serialized once
(sorted keys, two-space indent) so a downloaded report matches the endpoint
byte for byte.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .dataset import rasterize_cell
from .errors import LtgError, NotFoundError, StateError
from .examiner import (ExamSession, SuggestionRecord, model_classifier,
                       report, report_json, start_session)
from .gds import read_gdsii_file
from .model import DecisionPolicy, load_model
from .raster import RasterConfig, resize_to_target

PREVIEW_SIZE = 64


class SessionRequest(BaseModel):
    gdsii_path: str
    model_path: str | None = None
    top: str | None = None
    threshold: float | None = None
    top_k: int | None = None


class DecisionRequest(BaseModel):
    action: str


@dataclass
class _Entry:
    session: ExamSession
    lock: threading.Lock = field(default_factory=threading.Lock)
    version: int = 0


def _drain(entry: _Entry) -> None:
    while entry.session.examine_next() is not None:
        pass
    entry.version += 1


def _record_view(session_id: str, rec: SuggestionRecord) -> dict:
    out = rec.to_json_dict()
    out["id"] = f"{session_id}.{rec.design_hash}"
    return out


def _error(status: int, exc: Exception) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": type(exc).__name__,
                                 "detail": str(exc)})


def create_app(default_model_path: str | None = None,
               cfg: RasterConfig = RasterConfig()) -> FastAPI:
    app = FastAPI(title="layout examination service")
    sessions: dict[str, _Entry] = {}
    ids = itertools.count(1)

    def entry_of(session_id: str) -> _Entry:
        entry = sessions.get(session_id)
        if entry is None:
            raise NotFoundError(f"no session {session_id!r}")
        return entry

    @app.exception_handler(LtgError)
    def _ltg_error(_, exc: LtgError):
        if isinstance(exc, NotFoundError):
            return _error(404, exc)
        if isinstance(exc, StateError):
            return _error(409, exc)
        return _error(400, exc)

    @app.post("/sessions", status_code=201)
    def create_session(req: SessionRequest):
        model_path = req.model_path or default_model_path
        if model_path is None:
            return _error(400, ValueError("model_path is required"))
        try:
            lib = read_gdsii_file(req.gdsii_path)
            model, registry, policy = load_model(model_path)
        except OSError as exc:
            return _error(400, exc)
        except LtgError as exc:
            return _error(400, exc)
        if req.threshold is not None or req.top_k is not None:
            policy = DecisionPolicy(
                req.threshold if req.threshold is not None else policy.threshold,
                req.top_k if req.top_k is not None else policy.top_k)
        top = req.top
        if top is None:
            candidates = lib.top_candidates()
            if not candidates:
                return _error(400, ValueError("library has no top cell"))
            top = candidates[0]
        try:
            session = start_session(lib, top, model_classifier(model),
                                    registry, policy=policy, cfg=cfg)
        except NotFoundError as exc:
            return _error(400, exc)
        session_id = f"s{next(ids)}"
        entry = _Entry(session)
        with entry.lock:
            _drain(entry)
        sessions[session_id] = entry
        return {"session_id": session_id, "top": top,
                "class_count": registry.class_count}

    @app.get("/sessions/{session_id}/queue")
    def queue(session_id: str, status: str | None = None):
        entry = entry_of(session_id)
        recs = entry.session.queue(status)
        return {"version": entry.version,
                "records": [_record_view(session_id, r) for r in recs]}

    @app.post("/suggestions/{suggestion_id}/decision")
    def decision(suggestion_id: str, req: DecisionRequest):
        session_id, _, design_hash = suggestion_id.partition(".")
        entry = entry_of(session_id)
        with entry.lock:
            rec = entry.session.records.get(design_hash)
            if rec is None:
                raise NotFoundError(f"no suggestion {suggestion_id!r}")
            entry.session.apply_decision(rec, req.action)  # StateError -> 409
            _drain(entry)
        return _record_view(session_id, rec)

    @app.get("/cells/{session_id}/{design_hash}/preview")
    def preview(session_id: str, design_hash: str, channel: int = 0,
                size: int = PREVIEW_SIZE):
        entry = entry_of(session_id)
        rec = entry.session.records.get(design_hash)
        if rec is None:
            raise NotFoundError(f"no design {design_hash!r}")
        session = entry.session
        if size != PREVIEW_SIZE:
            return _error(400, ValueError(f"preview size is fixed at "
                                          f"{PREVIEW_SIZE}"))
        if not 0 <= channel < session.cmap.channel_count:
            return _error(400, ValueError(
                f"channel must be in [0, {session.cmap.channel_count})"))
        try:
            native = rasterize_cell(session.lib, rec.cell_name, session.cfg,
                                    session.cmap)
        except LtgError as exc:
            return _error(400, exc)
        small = resize_to_target(native, RasterConfig(
            session.cfg.pixel_pitch_nm, PREVIEW_SIZE, (PREVIEW_SIZE,)))
        return {"design_hash": design_hash, "channel": channel,
                "size": PREVIEW_SIZE,
                "pixels": small[channel].astype(float).tolist()}

    @app.get("/sessions/{session_id}/report")
    def session_report(session_id: str):
        entry = entry_of(session_id)
        return Response(content=report_json(entry.session),
                        media_type="application/json")

    @app.get("/sessions/{session_id}/stats")
    def stats(session_id: str):
        entry = entry_of(session_id)
        session = entry.session
        rep = report(session)
        return {"version": entry.version,
                "complete": rep["complete"],
                "counters": rep["counters"],
                "timing_ms": rep["timing_ms"],
                "partition": rep["partition"]}

    return app
