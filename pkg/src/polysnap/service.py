"""Interactive annotation HTTP service.

Sessions are event-sourced: every mutation (create, deform, vertex edits)
appends one JSON line to the session's log under the data directory, and
session state is always the fold of that log, so crashes and restarts
replay to the same polygons.  Requests for different sessions run
concurrently; operations on one session are serialized by a per-session
lock.  Each session pins the model snapshot it was created with, so
reloading a different checkpoint never changes earlier sessions.

REST surface (JSON bodies, base64-encoded PNGs):
  POST  /sessions
  GET   /sessions/{id}
  POST  /sessions/{id}/instances/{iid}/deform
  PATCH /sessions/{id}/instances/{iid}/vertices
  GET   /sessions/{id}/export[?masks=1]
  GET   /healthz
plus static hosting of the UI bundle at /.
"""

from __future__ import annotations

import base64
import io
import json
import mimetypes
import re
import threading
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import geometry as geo
from . import trainer
from .geometry import GeometryError
from .model import Model


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def _decode_png_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (ValueError, UnidentifiedImageError, OSError) as exc:
        raise ApiError(400, f"could not decode image PNG: {exc}") from exc


def _decode_png_mask(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("L")) > 127
    except (ValueError, UnidentifiedImageError, OSError) as exc:
        raise ApiError(400, f"could not decode mask PNG: {exc}") from exc


def _encode_png_image(image: np.ndarray) -> str:
    buf = io.BytesIO()
    arr = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _encode_png_mask(mask: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _box_polygon(box: list[float], spacing: float) -> np.ndarray:
    """Rectangle polygon from an annotator box, densified along its sides."""
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise ApiError(400, f"invalid box {box}")
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    pts = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        n = max(1, int(np.ceil(np.hypot(*(b - a)) / spacing)))
        for t in np.arange(n) / n:
            pts.append(a + t * (b - a))  # exact on axis-aligned edges
    return np.array(pts)


# ---------------------------------------------------------------------------
# event-sourced sessions


def _polys_to_json(polys: list[np.ndarray]) -> list:
    return [np.asarray(p, dtype=float).tolist() for p in polys]


def _polys_from_json(doc: list) -> list[np.ndarray]:
    return [geo.validate_polygon(p) for p in doc]


def apply_edit_ops(polygons: list[np.ndarray], ops: list[dict],
                   bounds: tuple[int, int]) -> list[np.ndarray]:
    """Apply move/insert/delete vertex operations atomically (pure)."""
    h, w = bounds
    out = [p.copy() for p in polygons]
    for op in ops:
        kind = op.get("op")
        if kind == "accept":
            continue
        p = op.get("polygon", -1)
        if not 0 <= p < len(out):
            raise ApiError(404, f"polygon {p} does not exist")
        poly = out[p]
        if kind == "move":
            v = op.get("vertex", -1)
            if not 0 <= v < poly.shape[0]:
                raise ApiError(404, f"vertex {v} does not exist")
            x, y = float(op["x"]), float(op["y"])
            if not (0 <= x <= w and 0 <= y <= h):
                raise ApiError(400, f"move target ({x}, {y}) outside image bounds")
            poly[v] = (x, y)
        elif kind == "insert":
            e = op.get("edge", -1)
            n = poly.shape[0]
            if not 0 <= e < n:
                raise ApiError(404, f"edge {e} does not exist")
            if "x" in op and "y" in op:
                pt = np.array([float(op["x"]), float(op["y"])])
            else:
                pt = (poly[e] + poly[(e + 1) % n]) / 2
            out[p] = np.insert(poly, e + 1, pt, axis=0)
        elif kind == "delete":
            v = op.get("vertex", -1)
            if not 0 <= v < poly.shape[0]:
                raise ApiError(404, f"vertex {v} does not exist")
            if poly.shape[0] <= 3:
                raise ApiError(400, "invariant violation: polygons keep at least 3 vertices")
            out[p] = np.delete(poly, v, axis=0)
        else:
            raise ApiError(400, f"unknown edit op {kind!r}")
    return out


class SessionState:
    def __init__(self, session_id: str):
        self.id = session_id
        self.image: np.ndarray | None = None
        self.image_b64: str = ""
        self.instances: list[dict] = []   # {label, score, polygons, accepted}
        self.model_snapshot: str = ""
        self.history: list[dict] = []

    def apply(self, event: dict) -> None:
        op = event["op"]
        if op == "create":
            self.image_b64 = event["image_png"]
            self.image = _decode_png_image(event["image_png"])
            self.model_snapshot = event.get("model_snapshot", "")
            self.instances = [
                {"label": inst["label"], "score": inst["score"],
                 "polygons": _polys_from_json(inst["polygons"]), "accepted": False}
                for inst in event["instances"]]
        elif op == "deform":
            inst = self._instance(event["instance"])
            inst["polygons"] = _polys_from_json(event["polygons"])
        elif op == "edit":
            inst = self._instance(event["instance"])
            inst["polygons"] = apply_edit_ops(inst["polygons"], event["ops"],
                                              self.image.shape[:2])
            if any(o.get("op") == "accept" for o in event["ops"]):
                inst["accepted"] = True
        elif op == "add_instance":
            rec = event["instance"]
            self.instances.append({"label": rec["label"], "score": rec["score"],
                                   "polygons": _polys_from_json(rec["polygons"]),
                                   "accepted": False})
        else:
            raise ApiError(500, f"unknown event {op!r} in session log")
        self.history.append(event)

    def _instance(self, iid: int) -> dict:
        if not 0 <= iid < len(self.instances):
            raise ApiError(404, f"instance {iid} does not exist")
        return self.instances[iid]

    def public_json(self, include_image: bool = True) -> dict:
        doc = {
            "id": self.id,
            "model_snapshot": self.model_snapshot,
            "image_size": list(self.image.shape[:2]) if self.image is not None else None,
            "instances": [
                {"label": i["label"], "score": i["score"],
                 "polygons": _polys_to_json(i["polygons"]), "accepted": i["accepted"]}
                for i in self.instances],
            "history_length": len(self.history),
        }
        if include_image:
            doc["image_png"] = self.image_b64
        return doc

    def export_instances(self) -> list[geo.Instance]:
        return [geo.Instance(label=i["label"], score=i["score"], polygons=i["polygons"])
                for i in self.instances]


class SessionStore:
    """Sessions persisted as append-only JSON-lines event logs."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._registry = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._states: dict[str, SessionState] = {}

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._registry:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    def _log_path(self, session_id: str) -> Path:
        if not re.fullmatch(r"[0-9a-f]{32}", session_id):
            raise ApiError(404, f"unknown session {session_id!r}")
        return self.data_dir / f"{session_id}.jsonl"

    def create(self, event: dict) -> SessionState:
        session_id = uuid.uuid4().hex
        state = SessionState(session_id)
        state.apply(event)
        with open(self._log_path(session_id), "w") as fh:
            fh.write(json.dumps(event) + "\n")
        with self._registry:
            self._states[session_id] = state
        return state

    def get(self, session_id: str) -> SessionState:
        with self._registry:
            state = self._states.get(session_id)
        if state is not None:
            return state
        path = self._log_path(session_id)
        if not path.exists():
            raise ApiError(404, f"unknown session {session_id!r}")
        state = SessionState(session_id)
        for line in path.read_text().splitlines():
            if line.strip():
                state.apply(json.loads(line))
        with self._registry:
            self._states[session_id] = state
        return state

    def append(self, state: SessionState, event: dict) -> None:
        state.apply(event)
        with open(self._log_path(state.id), "a") as fh:
            fh.write(json.dumps(event) + "\n")


# ---------------------------------------------------------------------------
# server


class AnnotationServer:
    def __init__(self, checkpoint=None, data_dir="sessions", ui_dir=None,
                 host="127.0.0.1", port=8765, model: Model | None = None):
        self.store = SessionStore(data_dir)
        self.models: dict[str, Model] = {}
        self.current_snapshot = ""
        if model is None and checkpoint is not None:
            model, _, _ = trainer.load_checkpoint(checkpoint)
        if model is not None:
            sig = model.parameter_signature()[:16]
            self.models[sig] = model
            self.current_snapshot = sig
        if ui_dir is None:
            bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
            ui_dir = bundled if bundled.is_dir() else None
        self.ui_dir = Path(ui_dir) if ui_dir else None
        handler = _make_handler(self)
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.port = self.httpd.server_address[1]
        self._serving = False

    # -- request logic (transport-independent) --

    def create_session(self, body: dict) -> dict:
        if "image_png" not in body:
            raise ApiError(400, "missing required field 'image_png'")
        image = _decode_png_image(body["image_png"])
        h, w = image.shape[:2]
        instances = []
        if body.get("instances"):
            try:
                for inst in geo.instances_from_json({"instances": body["instances"]}):
                    instances.append({"label": inst.label, "score": inst.score,
                                      "polygons": _polys_to_json(inst.polygons)})
            except GeometryError as exc:
                raise ApiError(400, str(exc)) from exc
        for k, b64 in enumerate(body.get("masks_png", [])):
            mask = _decode_png_mask(b64)
            if mask.shape != (h, w):
                raise ApiError(400, f"mask {k} has shape {mask.shape}, image is {(h, w)}")
            polys = self._initial_polygons(image, mask)
            if polys:
                instances.append({"label": body.get("label", "object"), "score": 1.0,
                                  "polygons": _polys_to_json(polys)})
        spacing = self._spacing()
        for box in body.get("boxes", []):
            instances.append({"label": body.get("label", "object"), "score": 1.0,
                              "polygons": [_box_polygon(box, spacing).tolist()]})
        event = {"op": "create", "image_png": body["image_png"],
                 "instances": instances, "model_snapshot": self.current_snapshot}
        state = self.store.create(event)
        return state.public_json(include_image=False)

    def _spacing(self) -> float:
        model = self.models.get(self.current_snapshot)
        return model.config.vertex_spacing if model else 10.0

    def _initial_polygons(self, image: np.ndarray, mask: np.ndarray) -> list[np.ndarray]:
        """Mask -> polygons with spacing measured on the resized crop."""
        model = self.models.get(self.current_snapshot)
        if model is None:
            return geo.extract_polygons(mask, 10.0)
        h, w = mask.shape
        try:
            box = trainer._mode_box(geo.fit_box(mask), "annotation",
                                    geo.Box(0.0, 0.0, float(w), float(h)))
        except geo.EmptyMaskError:
            return []
        from . import data as datamod
        transform = datamod.CropTransform(box=box, crop_size=model.config.crop_size)
        crop_mask = datamod.resample_mask(mask, transform)
        return [transform.crop_to_image(p)
                for p in geo.extract_polygons(crop_mask, model.config.vertex_spacing)]

    def get_session(self, session_id: str) -> dict:
        with self.store.lock_for(session_id):
            return self.store.get(session_id).public_json()

    def add_instance(self, session_id: str, body: dict) -> dict:
        """Create a new instance mid-session from an annotator box or a mask."""
        with self.store.lock_for(session_id):
            state = self.store.get(session_id)
            label = body.get("label", "object")
            if "box" in body:
                polys = [_box_polygon(body["box"], self._spacing())]
            elif "mask_png" in body:
                mask = _decode_png_mask(body["mask_png"])
                if mask.shape != state.image.shape[:2]:
                    raise ApiError(400, f"mask shape {mask.shape} does not match image")
                polys = self._initial_polygons(state.image, mask)
                if not polys:
                    raise ApiError(400, "mask produced no usable polygons")
            else:
                raise ApiError(400, "body needs 'box' or 'mask_png'")
            event = {"op": "add_instance",
                     "instance": {"label": label, "score": 1.0,
                                  "polygons": _polys_to_json(polys)}}
            self.store.append(state, event)
            return {"instance": len(state.instances) - 1,
                    "polygons": _polys_to_json(state.instances[-1]["polygons"])}

    def deform_instance(self, session_id: str, iid: int, body: dict) -> dict:
        mode = body.get("mode", "annotation")
        if mode not in ("annotation", "detection"):
            raise ApiError(400, f"unknown mode {mode!r}")
        with self.store.lock_for(session_id):
            state = self.store.get(session_id)
            snapshot = state.model_snapshot
            model = self.models.get(snapshot)
            if model is None:
                raise ApiError(503, f"model snapshot {snapshot!r} is not loaded")
            inst = state._instance(iid)
            refined, diags = trainer.refine_polygons(model, state.image,
                                                     inst["polygons"], mode=mode)
            event = {"op": "deform", "instance": iid,
                     "polygons": _polys_to_json(refined),
                     "chamfer_to_previous": diags, "mode": mode,
                     "model_snapshot": snapshot}
            self.store.append(state, event)
            return {"instance": iid, "polygons": _polys_to_json(refined),
                    "chamfer_to_previous": diags}

    def edit_vertices(self, session_id: str, iid: int, body: dict) -> dict:
        ops = body.get("ops")
        if not isinstance(ops, list) or not ops:
            raise ApiError(400, "body must contain a non-empty 'ops' list")
        with self.store.lock_for(session_id):
            state = self.store.get(session_id)
            inst = state._instance(iid)
            # validate against current state before committing the event
            apply_edit_ops(inst["polygons"], ops, state.image.shape[:2])
            event = {"op": "edit", "instance": iid, "ops": ops}
            self.store.append(state, event)
            return {"instance": iid,
                    "polygons": _polys_to_json(state.instances[iid]["polygons"])}

    def export_session(self, session_id: str, include_masks: bool = False) -> dict:
        with self.store.lock_for(session_id):
            state = self.store.get(session_id)
            doc = geo.instances_to_json(state.export_instances())
            if include_masks:
                h, w = state.image.shape[:2]
                doc["masks_png"] = [
                    _encode_png_mask(geo.rasterize_mask(inst["polygons"], h, w))
                    for inst in state.instances]
            return doc

    # -- lifecycle --

    def serve_forever(self):
        self._serving = True
        self.httpd.serve_forever()

    def shutdown(self):
        if self._serving:
            self.httpd.shutdown()
            self._serving = False
        self.httpd.server_close()


_ROUTES = [
    ("POST", re.compile(r"^/sessions$"), "create"),
    ("GET", re.compile(r"^/sessions/([0-9a-f]+)$"), "get"),
    ("POST", re.compile(r"^/sessions/([0-9a-f]+)/instances$"), "add_instance"),
    ("POST", re.compile(r"^/sessions/([0-9a-f]+)/instances/(\d+)/deform$"), "deform"),
    ("PATCH", re.compile(r"^/sessions/([0-9a-f]+)/instances/(\d+)/vertices$"), "edit"),
    ("GET", re.compile(r"^/sessions/([0-9a-f]+)/export$"), "export"),
    ("GET", re.compile(r"^/healthz$"), "health"),
]


def _make_handler(server: AnnotationServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            raw = self.rfile.read(length)
            try:
                return json.loads(raw.decode())
            except (ValueError, UnicodeDecodeError) as exc:
                raise ApiError(400, f"malformed JSON body: {exc}") from exc

        def _send_json(self, doc, status=200):
            payload = json.dumps(doc).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _dispatch(self, method):
            path = self.path.split("?", 1)[0]
            query = self.path.split("?", 1)[1] if "?" in self.path else ""
            try:
                for m, pattern, name in _ROUTES:
                    if m != method:
                        continue
                    match = pattern.match(path)
                    if not match:
                        continue
                    if name == "create":
                        return self._send_json(server.create_session(self._read_body()), 201)
                    if name == "get":
                        return self._send_json(server.get_session(match.group(1)))
                    if name == "add_instance":
                        return self._send_json(server.add_instance(
                            match.group(1), self._read_body()), 201)
                    if name == "deform":
                        return self._send_json(server.deform_instance(
                            match.group(1), int(match.group(2)), self._read_body()))
                    if name == "edit":
                        return self._send_json(server.edit_vertices(
                            match.group(1), int(match.group(2)), self._read_body()))
                    if name == "export":
                        return self._send_json(server.export_session(
                            match.group(1), include_masks="masks=1" in query))
                    if name == "health":
                        return self._send_json({"status": "ok",
                                                "model": server.current_snapshot or None})
                if method == "GET" and self._serve_static(path):
                    return
                raise ApiError(404, f"no route for {method} {path}")
            except ApiError as exc:
                self._send_json({"error": exc.message}, exc.status)
            except Exception as exc:  # pragma: no cover - defensive
                self._send_json({"error": f"internal error: {exc}"}, 500)

        def _serve_static(self, path: str) -> bool:
            if server.ui_dir is None:
                return False
            rel = "index.html" if path == "/" else path.lstrip("/")
            target = (server.ui_dir / rel).resolve()
            if not str(target).startswith(str(server.ui_dir.resolve())) or not target.is_file():
                return False
            payload = target.read_bytes()
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
            return True

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_PATCH(self):
            self._dispatch("PATCH")

    return Handler
