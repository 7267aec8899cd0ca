"""HTTP server feeding the browser pose viewer.

Routes:
    GET  /api/scene.ply   latest trained cloud (falls back to the initial one)
    GET  /api/poses       current trajectory JSON
    POST /api/poses       full trajectory replace, validated before write
    GET  /<anything>      static viewer assets, when a frontend build exists

Reads are concurrent; pose writes are serialized by a lock and written
atomically (tmp file + rename) so a crashed POST never corrupts the file.
"""
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import ValidationError
from .formats import parse_poses
from .pipeline import Artifacts

_LOG = logging.getLogger(__name__)

GUESS_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
}


def default_frontend_dir():
    """frontend/dist next to the package checkout, if present."""
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.is_dir() else None


class ViewerServer:
    """Serves scene + poses for one output directory."""

    def __init__(self, config, host="127.0.0.1", port=0):
        self.paths = Artifacts(config.output_dir)
        self.frontend = (config.frontend_dir if config.frontend_dir
                         else default_frontend_dir())
        self._write_lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_GET(self):
                outer._get(self)

            def do_POST(self):
                outer._post(self)

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.port = self.httpd.server_address[1]
        self._thread = None

    # -- plumbing ----------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    @staticmethod
    def _send(handler, status, body, content_type):
        handler.send_response(status)
        handler.send_header("Content-Type", content_type)
        handler.send_header("Content-Length", str(len(body)))
        handler.send_header("Cache-Control", "no-store")
        handler.end_headers()
        handler.wfile.write(body)

    @classmethod
    def _send_json(cls, handler, status, obj):
        cls._send(handler, status, json.dumps(obj).encode("utf-8"),
                  "application/json")

    # -- routes ------------------------------------------------------------

    def _get(self, handler):
        route = handler.path.split("?", 1)[0]
        if route == "/api/scene.ply":
            source, stage = self.paths.latest_scene()
            if source is None:
                self._send_json(handler, 404, {
                    "error": "NoScene",
                    "message": "no scene yet; run init first"})
                return
            body = source.read_bytes()
            handler.send_response(200)
            handler.send_header("Content-Type", "application/octet-stream")
            handler.send_header("Content-Length", str(len(body)))
            handler.send_header("X-Scene-Stage", stage)
            handler.send_header("Cache-Control", "no-store")
            handler.end_headers()
            handler.wfile.write(body)
        elif route == "/api/poses":
            if not self.paths.poses.is_file():
                self._send_json(handler, 404, {
                    "error": "NoPoses",
                    "message": "no pose file yet; run init first"})
                return
            self._send(handler, 200, self.paths.poses.read_bytes(),
                       "application/json")
        else:
            self._static(handler, route)

    def _post(self, handler):
        if handler.path.split("?", 1)[0] != "/api/poses":
            self._send_json(handler, 404, {"error": "NotFound",
                                           "message": handler.path})
            return
        length = int(handler.headers.get("Content-Length", 0))
        raw = handler.rfile.read(length)
        try:
            poses = parse_poses(raw.decode("utf-8"))
        except (ValidationError, UnicodeDecodeError) as exc:
            self._send_json(handler, 422, {"error": type(exc).__name__,
                                           "message": str(exc)})
            return
        with self._write_lock:
            tmp = self.paths.poses.with_suffix(".json.tmp")
            self.paths.poses.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(raw)
            tmp.replace(self.paths.poses)
        self._send_json(handler, 200, {"ok": True, "count": len(poses)})

    def _static(self, handler, route):
        if self.frontend is None:
            self._send_json(handler, 404, {
                "error": "NoFrontend",
                "message": "no frontend build found; API-only mode"})
            return
        rel = route.lstrip("/") or "index.html"
        target = (self.frontend / rel).resolve()
        root = self.frontend.resolve()
        if root not in target.parents and target != root:
            self._send_json(handler, 404, {"error": "NotFound",
                                           "message": route})
            return
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            self._send_json(handler, 404, {"error": "NotFound",
                                           "message": route})
            return
        kind = GUESS_TYPES.get(target.suffix, "application/octet-stream")
        self._send(handler, 200, target.read_bytes(), kind)


def serve_forever(config, host="127.0.0.1", port=8000):
    try:
        server = ViewerServer(config, host=host, port=port)
    except OSError as exc:
        raise OSError(f"cannot bind {host}:{port}: {exc}") from exc
    _LOG.info("viewer API on http://%s:%d (frontend: %s)", host, server.port,
              server.frontend or "absent")
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
