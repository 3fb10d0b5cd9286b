"""Progressive streaming server.

Pull-based protocol over plain HTTP/1.1:

    GET /manifest        JSON mirror of the stream manifest
    GET /chunk/{i}       exact on-disk bytes of chunk i (octet-stream)
    GET /render?...      PNG render at time t and a look-at pose
    GET /metrics         byte/render counters as JSON

The server applies fetched chunks to its own model in frame order and
tracks a high-water mark: a render at time t requires every chunk up to
ceil(t) to have been fetched, otherwise it answers 409 and names the next
chunk the client must pull.  Renders are deterministic and cached under a
quantized (t, pose, size, overlay) key, so identical queries return
identical bytes.
"""

from __future__ import annotations

import io
import json
import math
import re
import threading
from collections import OrderedDict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from .render import Camera, RenderConfig, camera_from_lookat, \
    render_decomposition_map, render_image
from .stream_io import apply_chunk, mean_bitrate, read_chunk_bytes, unpack

__all__ = ["StreamSession", "serve", "run_server"]

RENDER_FOV_DEG = 50.0
POSE_QUANTUM = 1e-4
MAX_IMAGE_SIZE = 1024


class StreamSession:
    """Stream state: progressive model, high-water mark, render cache."""

    def __init__(self, stream_path, cache_size=64, n_samples=32):
        self.path = stream_path
        self.model, self.manifest = unpack(stream_path, up_to_frame=0)
        self.cache_size = cache_size
        self.n_samples = n_samples
        self.high_water = 0          # highest frame renderable so far
        self.fetched = {0}
        self.lock = threading.Lock()
        self.cache = OrderedDict()
        self.chunk_bytes_served = [0] * self.manifest.T
        self.renders_served = 0
        self.cache_hits = 0

    # -- chunks ----------------------------------------------------------------

    def chunk(self, i):
        if not 0 <= i < self.manifest.T:
            raise IndexError(i)
        data = read_chunk_bytes(self.path, self.manifest, i)
        with self.lock:
            self.chunk_bytes_served[i] += len(data)
            self.fetched.add(i)
            # chunks apply strictly in frame order; out-of-order fetches
            # only advance the mark once the gap closes
            while self.high_water + 1 in self.fetched:
                t = self.high_water + 1
                apply_chunk(self.model, self.manifest, t,
                            read_chunk_bytes(self.path, self.manifest, t))
                self.high_water = t
        return data

    # -- rendering ---------------------------------------------------------------

    def _camera(self, pose, width, height):
        if self.model.config.mode == "direct-2d":
            ident = np.column_stack([np.eye(3), np.zeros(3)])
            return Camera(pose=ident, fx=1.0, fy=1.0, cx=width / 2.0,
                          cy=height / 2.0, width=width, height=height)
        return camera_from_lookat(pose[0:3], pose[3:6], pose[6:9],
                                  RENDER_FOV_DEG, width, height)

    def render_png(self, t, pose, width, height, overlay):
        cfgm = self.model.config
        key = (round(t / POSE_QUANTUM),
               tuple(round(v / POSE_QUANTUM) for v in pose),
               width, height, overlay)
        with self.lock:
            if not 0.0 <= t <= self.manifest.T - 1:
                raise ValueError(f"time {t} outside [0, {self.manifest.T - 1}]")
            needed = int(math.ceil(t))
            if needed > self.high_water:
                raise ChunkNeeded(self.high_water + 1)
            cached = self.cache.get(key)
            if cached is not None:
                self.cache.move_to_end(key)
                self.cache_hits += 1
                self.renders_served += 1
                return cached
            camera = self._camera(pose, width, height)
            rcfg = RenderConfig(n_samples=self.n_samples, near=cfgm.near,
                                far=cfgm.far, stratified=False,
                                background=(cfgm.background,) * 3,
                                tau=cfgm.tau)
            img = render_image(self.model, camera, t, rcfg)
            if overlay:
                cmap = render_decomposition_map(self.model, camera, t, rcfg)
                # probabilities as (new, deform, static) -> (R, G, B)
                img = 0.5 * img + 0.5 * cmap[..., ::-1]
            buf = io.BytesIO()
            arr = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
            png = buf.getvalue()
            self.cache[key] = png
            while len(self.cache) > self.cache_size:
                self.cache.popitem(last=False)
            self.renders_served += 1
            return png

    # -- metrics -------------------------------------------------------------------

    def metrics(self):
        with self.lock:
            return {
                "bytes_served": int(sum(self.chunk_bytes_served)),
                "bytes_served_per_chunk": list(self.chunk_bytes_served),
                "header_bytes": self.manifest.header_bytes,
                "mean_bitrate": mean_bitrate(self.manifest),
                "renders_served": self.renders_served,
                "cache_hits": self.cache_hits,
                "high_water": self.high_water,
            }


class ChunkNeeded(Exception):
    def __init__(self, chunk):
        super().__init__(f"chunk {chunk} not fetched yet")
        self.chunk = chunk


_POSE_KEYS = ("px", "py", "pz", "lx", "ly", "lz", "ux", "uy", "uz")
_POSE_DEFAULT = {"px": 0.5, "py": 1.1, "pz": 2.4, "lx": 0.5, "ly": 0.5,
                 "lz": 0.5, "ux": 0.0, "uy": 1.0, "uz": 0.0}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # tests stay quiet
        if self.server.verbose:
            super().log_message(fmt, *args)

    def _reply(self, code, body, content_type):
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _json(self, code, payload):
        self._reply(code, json.dumps(payload).encode(), "application/json")

    def do_GET(self):
        session = self.server.session
        url = urlparse(self.path)
        try:
            if url.path == "/manifest":
                self._json(200, session.manifest.to_dict())
                return
            m = re.fullmatch(r"/chunk/(\d+)", url.path)
            if m:
                try:
                    data = session.chunk(int(m.group(1)))
                except IndexError:
                    self._json(404, {"error": "chunk out of range",
                                     "chunks": session.manifest.T})
                    return
                self._reply(200, data, "application/octet-stream")
                return
            if url.path == "/render":
                self._handle_render(session, parse_qs(url.query))
                return
            if url.path == "/metrics":
                self._json(200, session.metrics())
                return
            self._json(404, {"error": f"no route {url.path}"})
        except BrokenPipeError:
            pass
        except Exception as exc:  # pragma: no cover - defensive 500
            self._json(500, {"error": str(exc)})

    def _handle_render(self, session, query):
        try:
            t = float(query["t"][0])
            if not math.isfinite(t):
                raise ValueError("non-finite t")
            pose = [float(query.get(k, [_POSE_DEFAULT[k]])[0])
                    for k in _POSE_KEYS]
            if any(not math.isfinite(v) for v in pose):
                raise ValueError("non-finite pose")
            width = int(query.get("w", ["128"])[0])
            height = int(query.get("h", ["128"])[0])
            if not (0 < width <= MAX_IMAGE_SIZE
                    and 0 < height <= MAX_IMAGE_SIZE):
                raise ValueError(f"image size {width}x{height} out of range")
            overlay = query.get("overlay", ["none"])[0]
            if overlay not in ("none", "decomposition"):
                raise ValueError(f"unknown overlay {overlay!r}")
        except (KeyError, ValueError, IndexError) as exc:
            self._json(400, {"error": f"bad render query: {exc}"})
            return
        try:
            png = session.render_png(t, pose, width, height,
                                     overlay == "decomposition")
        except ChunkNeeded as exc:
            self._json(409, {"error": "frame not loaded yet",
                             "required_chunk": exc.chunk})
            return
        except ValueError as exc:
            self._json(400, {"error": str(exc)})
            return
        self._reply(200, png, "image/png")


def serve(stream_path, bind="127.0.0.1:0", cache_size=64, n_samples=32,
          verbose=False):
    """Build a ready-to-run HTTP server over one packed stream."""
    host, _, port = bind.rpartition(":")
    session = StreamSession(stream_path, cache_size=cache_size,
                            n_samples=n_samples)
    httpd = ThreadingHTTPServer((host or "127.0.0.1", int(port)), _Handler)
    httpd.session = session
    httpd.verbose = verbose
    return httpd


def run_server(stream_path, bind, cache_size=64, n_samples=32):
    """serve() + serve_forever with clean SIGINT/SIGTERM shutdown."""
    import signal

    httpd = serve(stream_path, bind, cache_size=cache_size,
                  n_samples=n_samples, verbose=True)
    host, port = httpd.server_address

    def _stop(signum, frame):
        threading.Thread(target=httpd.shutdown).start()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    print(f"serving {stream_path} on http://{host}:{port}", flush=True)
    try:
        httpd.serve_forever()
    finally:
        httpd.server_close()
    return 0
