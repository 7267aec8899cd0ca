"""HTTP transport for remote denoisers, codecs, and depth estimators.

Tensors travel as JSON objects {shape, dtype: "f32", data} with the data
field holding base64 of the little-endian row-major float32 bytes. All
calls are synchronous with a timeout and a single retry; each client
instance keeps at most one request in flight.
"""
import base64
import threading

import numpy as np
import requests

from .depth_init import DepthProvider
from .diffusion import Denoiser, LatentCodec
from .errors import RemoteFailure, ValidationError

DEFAULT_TIMEOUT = 120.0
DEPTH_MODEL_ID = "depth-estimate"


def encode_tensor(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": [int(s) for s in arr.shape],
        "dtype": "f32",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(obj, expect_shape=None):
    if not isinstance(obj, dict):
        raise ValidationError(f"tensor must be an object, got {type(obj).__name__}")
    missing = {"shape", "dtype", "data"} - obj.keys()
    if missing:
        raise ValidationError(f"tensor missing fields {sorted(missing)}")
    if obj["dtype"] != "f32":
        raise ValidationError(f"unsupported tensor dtype {obj['dtype']!r}")
    shape = tuple(int(s) for s in obj["shape"])
    if any(s < 0 for s in shape):
        raise ValidationError(f"negative dimension in shape {shape}")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise ValidationError(f"tensor data is not valid base64: {exc}") from exc
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 4 * count:
        raise ValidationError(
            f"tensor data holds {len(raw)} bytes, shape {shape} needs {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if expect_shape is not None and shape != tuple(expect_shape):
        raise ValidationError(f"expected shape {tuple(expect_shape)}, got {shape}")
    return arr.copy()


class RemoteClient:
    """POSTs JSON to one server, serially, with one retry per call."""

    def __init__(self, base_url, timeout=DEFAULT_TIMEOUT, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = float(timeout)
        self._session = session if session is not None else requests.Session()
        self._lock = threading.Lock()

    def post(self, path, body):
        with self._lock:
            last_code = None
            last_message = None
            for _ in range(2):
                try:
                    resp = self._session.post(self.base_url + path, json=body,
                                              timeout=self.timeout)
                except requests.RequestException as exc:
                    last_code = "transport"
                    last_message = str(exc)
                    continue
                if 200 <= resp.status_code < 300:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise RemoteFailure(
                            f"{path}: response is not JSON: {exc}",
                            code="bad_response") from exc
                try:
                    err = resp.json()
                    last_code = err.get("code", str(resp.status_code))
                    last_message = err.get("message", resp.reason)
                except ValueError:
                    last_code = str(resp.status_code)
                    last_message = resp.reason
        raise RemoteFailure(f"{path} failed after retry: {last_message}",
                            code=last_code)

    def fetch_tensor(self, path, body, key, expect_shape=None):
        out = self.post(path, body)
        try:
            return decode_tensor(out.get(key), expect_shape)
        except ValidationError as exc:
            raise RemoteFailure(f"{path}: bad {key!r} in response: {exc}",
                                code="bad_response") from exc


def _denoise_body(model, latent, timestep, cond):
    body = {
        "model": model,
        "latent": encode_tensor(latent),
        "timestep": int(timestep),
        "prompt": cond.prompt,
        "guidance": {"image": 1.0, "text": 1.0},
    }
    if cond.image is not None:
        body["image_cond"] = encode_tensor(cond.image)
    if cond.mask is not None:
        body["mask"] = encode_tensor(cond.mask)
    return body


class RemoteDenoiser(Denoiser):
    """Noise predictor served over the wire protocol.

    Guidance is always sent as (1, 1): classifier-free mixing happens in
    the sampler, which requests each conditioning level separately.
    """

    def __init__(self, client: RemoteClient, model):
        self.client = client
        self.model = str(model)

    def predict(self, z_t, t, cond):
        z_t = np.asarray(z_t)
        body = _denoise_body(self.model, z_t, t, cond)
        out = self.client.fetch_tensor("/v1/denoise", body, "noise_pred",
                                       expect_shape=z_t.shape)
        return out.astype(z_t.dtype, copy=False)


class RemoteCodec(LatentCodec):
    def __init__(self, client: RemoteClient):
        self.client = client

    def encode(self, image):
        body = {"image": encode_tensor(image)}
        return self.client.fetch_tensor("/v1/encode", body, "latent")

    def decode(self, latent):
        body = {"latent": encode_tensor(latent)}
        return self.client.fetch_tensor("/v1/decode", body, "image")


class RemoteDepth(DepthProvider):
    """Depth estimation through the denoise route with a reserved model id.

    The latent is a zero placeholder shaped like the output; the image
    rides in image_cond and the relative depth comes back as noise_pred.
    """

    def __init__(self, client: RemoteClient, model=DEPTH_MODEL_ID):
        self.client = client
        self.model = str(model)

    def request(self, image):
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValidationError(f"expected (H, W, 3) image, got {image.shape}")
        h, w = image.shape[:2]
        body = {
            "model": self.model,
            "latent": encode_tensor(np.zeros((h, w), dtype=np.float32)),
            "timestep": 0,
            "prompt": "",
            "guidance": {"image": 1.0, "text": 1.0},
            "image_cond": encode_tensor(image),
        }
        return self.client.fetch_tensor("/v1/denoise", body, "noise_pred",
                                        expect_shape=(h, w))
