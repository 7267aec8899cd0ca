"""Reference implementation of the denoiser wire protocol.

Serves in-process denoisers, a codec, and a depth provider over plain
http.server so transport code can be exercised without any real model.
Not a production server: single process, no auth, permissive validation.
"""
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .diffusion import Conditioning
from .errors import SplatforgeError, ValidationError
from .wire import DEPTH_MODEL_ID, decode_tensor, encode_tensor


class DenoiserHTTPServer:
    """Wire endpoint backed by named in-process models.

    denoisers maps model ids (e.g. "inpaint", "text") to Denoiser objects;
    depth_provider, when given, answers denoise requests for the reserved
    depth model id. fail_next makes the next N requests return 503, for
    exercising client retry behavior.
    """

    def __init__(self, denoisers, codec=None, depth_provider=None, host="127.0.0.1"):
        self.denoisers = dict(denoisers)
        self.codec = codec
        self.depth_provider = depth_provider
        self.fail_next = 0
        self.requests_served = 0
        self.max_concurrent = 0
        self._active = 0
        self._stats_lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                outer._handle(self)

        self._httpd = ThreadingHTTPServer((host, 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)

    @property
    def url(self):
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- request handling --------------------------------------------------

    def _handle(self, handler):
        with self._stats_lock:
            self._active += 1
            self.max_concurrent = max(self.max_concurrent, self._active)
            self.requests_served += 1
            inject_failure = self.fail_next > 0
            if inject_failure:
                self.fail_next -= 1
        try:
            if inject_failure:
                self._send(handler, 503, {"code": "overloaded",
                                          "message": "injected failure"})
                return
            try:
                length = int(handler.headers.get("Content-Length", 0))
                body = json.loads(handler.rfile.read(length))
                result = self._route(handler.path, body)
            except SplatforgeError as exc:
                self._send(handler, 400, {"code": "bad_request",
                                          "message": str(exc)})
            except Exception as exc:
                self._send(handler, 500, {"code": "internal",
                                          "message": repr(exc)})
            else:
                self._send(handler, 200, result)
        finally:
            with self._stats_lock:
                self._active -= 1

    @staticmethod
    def _send(handler, status, payload):
        raw = json.dumps(payload).encode("utf-8")
        handler.send_response(status)
        handler.send_header("Content-Type", "application/json")
        handler.send_header("Content-Length", str(len(raw)))
        handler.end_headers()
        handler.wfile.write(raw)

    def _route(self, path, body):
        if path == "/v1/denoise":
            return self._denoise(body)
        if path == "/v1/encode":
            if self.codec is None:
                raise ValidationError("no codec configured")
            latent = self.codec.encode(decode_tensor(body.get("image")))
            return {"latent": encode_tensor(latent)}
        if path == "/v1/decode":
            if self.codec is None:
                raise ValidationError("no codec configured")
            image = self.codec.decode(decode_tensor(body.get("latent")))
            return {"image": encode_tensor(image)}
        raise ValidationError(f"unknown route {path}")

    def _denoise(self, body):
        model = body.get("model")
        latent = decode_tensor(body.get("latent"))
        if model in (DEPTH_MODEL_ID, "depth"):
            if self.depth_provider is None:
                raise ValidationError("no depth provider configured")
            image = decode_tensor(body.get("image_cond"))
            depth = np.asarray(self.depth_provider.request(image),
                               dtype=np.float32)
            return {"noise_pred": encode_tensor(depth)}
        if model not in self.denoisers:
            raise ValidationError(f"unknown model {model!r}")
        timestep = body.get("timestep")
        if not isinstance(timestep, int):
            raise ValidationError(f"timestep must be an integer, got {timestep!r}")
        cond = Conditioning(
            prompt=str(body.get("prompt", "")),
            image=(decode_tensor(body["image_cond"])
                   if body.get("image_cond") is not None else None),
            mask=(decode_tensor(body["mask"])
                  if body.get("mask") is not None else None),
        )
        pred = self.denoisers[model].predict(latent, timestep, cond)
        return {"noise_pred": encode_tensor(pred)}
