"""HTTP + JSON interface for inference and intervention sessions.

Endpoints:

    GET    /samples?split=test          sample summaries with thumbnails
    POST   /sessions {"sample_id": id}  open session, returns full payload
    GET    /sessions/{sid}              current payload
    POST   /sessions/{sid}/edits        apply one edit, returns new payload
    DELETE /sessions/{sid}              drop the session

Images, masks and probability planes travel as nested float arrays (row
major, full precision); thumbnails are base64 PNG data URIs.  Error
bodies are ``{"error": {"code": ..., "message": ...}}``.  Sessions live
in memory with TTL eviction; the model bundle is immutable for the
server's lifetime.
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .intervention import InterventionSession
from .pipeline import ModelBundle
from .synth import GeoDataset


class ServiceError(Exception):
    def __init__(self, status, code, message):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


class SessionStore:
    """Thread-safe session map with time-to-live eviction."""

    def __init__(self, bundle: ModelBundle, dataset: GeoDataset,
                 ttl_seconds=3600.0, clock=time.monotonic):
        self.bundle = bundle
        self.dataset = dataset
        self.ttl = ttl_seconds
        self.clock = clock
        self._lock = threading.Lock()
        self._sessions: dict[str, tuple[InterventionSession, float]] = {}

    def _evict(self):
        now = self.clock()
        dead = [k for k, (_, t) in self._sessions.items() if now - t > self.ttl]
        for k in dead:
            del self._sessions[k]

    def open(self, sample_id) -> tuple[str, InterventionSession]:
        try:
            self.dataset.index_of(sample_id)
        except KeyError:
            raise ServiceError(404, "unknown_sample", f"no sample {sample_id!r}")
        session = InterventionSession(self.bundle, self.dataset, sample_id)
        sid = uuid.uuid4().hex
        with self._lock:
            self._evict()
            self._sessions[sid] = (session, self.clock())
        return sid, session

    def get(self, sid) -> InterventionSession:
        with self._lock:
            self._evict()
            if sid not in self._sessions:
                raise ServiceError(404, "unknown_session", f"no session {sid!r}")
            session, _ = self._sessions[sid]
            self._sessions[sid] = (session, self.clock())
            return session

    def drop(self, sid):
        with self._lock:
            self._sessions.pop(sid, None)


def _png_data_uri(image) -> str:
    from PIL import Image
    arr = ((np.asarray(image) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def _payload_json(store: SessionStore, payload: dict) -> dict:
    schema = store.bundle.schema
    seg = payload.get("segmentation")
    concepts = payload.get("concepts")
    sample = store.dataset.samples[store.dataset.index_of(payload["sample_id"])]
    app = sample.concepts.applicability
    return {
        "sample_id": payload["sample_id"],
        "anatomy": payload["anatomy"],
        "true_label": payload["label"],
        "image": np.asarray(payload["image"]).tolist(),
        "segmentation_concepts": list(schema.segmentation_concepts),
        "segmentation": None if seg is None else
            [seg[:, :, i].tolist() for i in range(seg.shape[-1])],
        "property_concepts": [
            {"name": p.name, "kind": p.kind, "anatomy": p.anatomy,
             "applicable": bool(app[i]),
             "value": None if concepts is None else float(concepts[i])}
            for i, p in enumerate(schema.property_concepts)],
        "omega": None if payload.get("omega") is None
            else np.asarray(payload["omega"]).tolist(),
        "omega_concepts": [schema.property_concepts[i].name
                           for i in schema.binary_indices],
        "cbar": payload.get("cbar"),
        "class_labels": list(schema.class_labels),
        "class_probs": np.asarray(payload["class_probs"]).tolist(),
        "prediction": payload["prediction"],
        "audit_log": payload["audit_log"],
    }


def create_app(bundle: ModelBundle, dataset: GeoDataset,
               ttl_seconds=3600.0) -> FastAPI:
    app = FastAPI(title="stagedcbm intervention service")
    store = SessionStore(bundle, dataset, ttl_seconds=ttl_seconds)
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"error": {"code": exc.code,
                                               "message": exc.message}})

    @app.get("/samples")
    def list_samples(split: str = "test"):
        if split not in dataset.splits:
            raise ServiceError(400, "unknown_split", f"no split {split!r}")
        rows = []
        for i in dataset.splits[split]:
            s = dataset.samples[i]
            rows.append({"id": s.sample_id, "anatomy": s.anatomy,
                         "label": s.label,
                         "thumbnail": _png_data_uri(s.image[:, :, 0])})
        return {"split": split, "samples": rows}

    @app.post("/sessions", status_code=201)
    def open_session(body: dict):
        sample_id = body.get("sample_id")
        if not sample_id:
            raise ServiceError(400, "missing_field", "sample_id required")
        sid, session = store.open(sample_id)
        return {"session_id": sid,
                "payload": _payload_json(store, session.payload())}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        session = store.get(sid)
        return {"session_id": sid,
                "payload": _payload_json(store, session.payload())}

    @app.post("/sessions/{sid}/edits")
    def apply_edit(sid: str, body: dict):
        session = store.get(sid)
        kind = body.get("kind")
        try:
            if kind == "concept":
                target = body.get("concept", body.get("index"))
                payload = session.set_concept(target, body.get("value"))
            elif kind == "mask":
                layer = body.get("layer")
                source = body.get("source", "ground_truth")
                plane = body.get("mask") if source == "user" else source
                if source == "user" and plane is None:
                    raise ServiceError(400, "missing_field",
                                       "mask required when source is 'user'")
                payload = session.set_mask_layer(layer, np.asarray(plane)
                                                 if source == "user" else source)
            elif kind == "clear":
                payload = session.clear_edits()
            else:
                raise ServiceError(400, "unknown_edit", f"unknown kind {kind!r}")
        except ServiceError:
            raise
        except (KeyError, ValueError) as exc:
            raise ServiceError(422, "invalid_edit", str(exc))
        return {"session_id": sid, "payload": _payload_json(store, payload)}

    @app.delete("/sessions/{sid}")
    def drop_session(sid: str):
        store.drop(sid)
        return {"deleted": sid}

    return app
