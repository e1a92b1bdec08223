"""HTTP inference API over a loaded, immutable network.

Endpoints::

    GET  /v1/health   -> {"status": "ok"}
    GET  /v1/model    -> {"model", "spec", "parameter_count"}
    POST /v1/segment  -> segmentation of one 8-bit grayscale image

``/v1/segment`` takes either a PNG body (``Content-Type: image/png``) or
raw row-major uint8 bytes (``application/octet-stream``) with ``height``
and ``width`` query parameters. An optional ``model`` query parameter must
name the loaded model. The mask comes back as row-major (value, length)
run pairs plus a base64 PNG.
"""
from __future__ import annotations

import base64
import json
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .data.imaging import decode_png, encode_png, resize_label, resize_lanczos
from .segnet.network import Network
from .segnet.training import predict_probs, probs_to_mask

DEFAULT_MAX_PIXELS = 4096 * 4096
DEFAULT_MAX_BODY = 32 * 1024 * 1024


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def rle_encode(mask: np.ndarray) -> list[list[int]]:
    flat = np.asarray(mask).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]


def rle_decode(runs, height: int, width: int) -> np.ndarray:
    flat = np.concatenate([np.full(n, v, dtype=np.uint8) for v, n in runs]) if runs else np.zeros(0, np.uint8)
    if flat.size != height * width:
        raise ValueError("run lengths do not cover the image")
    return flat.reshape(height, width)


def segment_image(net: Network, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mask and foreground probability at the input's own resolution."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("expected an 8-bit grayscale image")
    h, w = img.shape
    mh, mw = net.spec.input_size
    x = resize_lanczos(img, mh, mw) if (h, w) != (mh, mw) else img
    dtype = net.parameters()[0].dtype
    seg = predict_probs(net, (x.astype(dtype) / 255.0)[None, ..., None])
    mask, prob = probs_to_mask(seg)
    mask, prob = mask[0], prob[0]
    if (h, w) != (mh, mw):
        mask = resize_label(mask, h, w)
        prob = np.clip(resize_lanczos(prob * 255.0, h, w) / 255.0, 0.0, 1.0)
    return mask, prob


class InferenceService:
    """Request handling independent of the HTTP transport."""

    def __init__(self, net: Network, model_id: str = "default", max_pixels: int = DEFAULT_MAX_PIXELS,
                 max_body: int = DEFAULT_MAX_BODY):
        self.net = net.eval()
        # rate capture is a debugging aid; the served model is never written to
        for blk in net.dec_gate + net.dec_res:
            blk.gate.record_rate = False
        self.model_id = model_id
        self.max_pixels, self.max_body = max_pixels, max_body
        self.lock = threading.Lock()
        self.latencies: list[float] = []

    def model_info(self) -> dict:
        return {
            "model": self.model_id,
            "spec": self.net.spec.to_dict(),
            "parameter_count": self.net.parameter_count(),
        }

    def decode_request(self, body: bytes, content_type: str, query: dict) -> np.ndarray:
        ctype = (content_type or "").split(";")[0].strip().lower()
        if ctype in ("image/png", ""):
            try:
                img = decode_png(body)
            except Exception:
                raise RequestError(400, "body is not a decodable PNG image") from None
        elif ctype == "application/octet-stream":
            try:
                h, w = int(query["height"][0]), int(query["width"][0])
            except (KeyError, ValueError, IndexError):
                raise RequestError(400, "raw images need integer height and width query parameters") from None
            if h < 1 or w < 1:
                raise RequestError(400, "height and width must be positive")
            if h * w > self.max_pixels:
                raise RequestError(413, f"image has {h * w} pixels, limit is {self.max_pixels}")
            if len(body) != h * w:
                raise RequestError(400, f"raw body has {len(body)} bytes, expected {h * w}")
            img = np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
        else:
            raise RequestError(400, f"unsupported content type {ctype!r}")
        if img.size > self.max_pixels:
            raise RequestError(413, f"image has {img.size} pixels, limit is {self.max_pixels}")
        if img.size == 0:
            raise RequestError(400, "empty image")
        return img

    def segment(self, body: bytes, content_type: str, query: dict) -> dict:
        t0 = time.perf_counter()
        model = query.get("model", [self.model_id])[0]
        if model != self.model_id:
            raise RequestError(404, f"unknown model {model!r}")
        img = self.decode_request(body, content_type, query)
        mask, prob = segment_image(self.net, img)
        fg = prob[mask.astype(bool)]
        latency = max((time.perf_counter() - t0) * 1000.0, 1e-6)
        with self.lock:
            self.latencies.append(latency)
        return {
            "run_id": uuid.uuid4().hex,
            "model": self.model_id,
            "height": int(mask.shape[0]),
            "width": int(mask.shape[1]),
            "mask_rle": rle_encode(mask),
            "mask_png_b64": base64.b64encode(encode_png(mask * np.uint8(255))).decode("ascii"),
            "probability": {
                "mean": float(prob.mean()),
                "min": float(prob.min()),
                "max": float(prob.max()),
                "foreground_fraction": float(mask.mean()),
                "mean_foreground": float(fg.mean()) if fg.size else None,
            },
            "latency_ms": latency,
        }


def _handler(service: InferenceService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "mahnet"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _route(self, method: str) -> None:
            url = urlparse(self.path)
            query = parse_qs(url.query)
            try:
                if method == "GET" and url.path == "/v1/health":
                    self._send(200, {"status": "ok"})
                elif method == "GET" and url.path == "/v1/model":
                    self._send(200, service.model_info())
                elif method == "POST" and url.path == "/v1/segment":
                    length = int(self.headers.get("Content-Length") or 0)
                    if length > service.max_body:
                        self.close_connection = True
                        raise RequestError(413, f"body of {length} bytes exceeds {service.max_body}")
                    body = self.rfile.read(length)
                    self._send(200, service.segment(body, self.headers.get("Content-Type", ""), query))
                else:
                    raise RequestError(404, f"no route for {method} {url.path}")
            except RequestError as exc:
                self._send(exc.status, {"error": str(exc)})
            except Exception:
                self._send(500, {"error": "internal error"})

        def do_GET(self):
            self._route("GET")

        def do_POST(self):
            self._route("POST")

    return Handler


def make_server(service: InferenceService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _handler(service))
    server.daemon_threads = True
    return server
