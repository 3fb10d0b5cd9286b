"""Bit-exact pack/unpack of a trained model into a streamable file.

Layout of an NFPS file (all integers little-endian):

    bytes 0..3    magic "NFPS"
    bytes 4..7    version (u32, currently 1)
    bytes 8..15   manifest length M (u64)
    bytes 16..    manifest: canonical JSON (sorted keys, no whitespace)
    then          chunk 0 (base payload), chunk 1, ..., chunk T-1

Chunk offsets in the manifest are relative to the end of the header, so the
manifest never depends on its own length.  Chunk 0 holds the frame-0 window
channels of both streamed grids, the full static grid and every decoder
weight; chunk t holds the channels newly stored at frame t.  Scalars are
float32 little-endian; training happens in float64 and parameters are
rounded once at pack time, so a pack/unpack round trip is exact.

Every chunk carries a CRC-32.  k is stored as an exact integer ratio.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import grad
from .fields import ModelConfig, SceneModel

__all__ = [
    "MAGIC",
    "VERSION",
    "StreamError",
    "ChunkRecord",
    "StreamManifest",
    "pack",
    "unpack",
    "apply_chunk",
    "read_chunk_bytes",
    "predicted_chunk_bytes",
    "mean_bitrate",
    "read_manifest",
]

MAGIC = b"NFPS"
VERSION = 1
STREAMED_GRIDS = ("decomp_grid", "new_grid")  # V_s and decoders ship in base


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkRecord:
    offset: int   # relative to the end of the header
    length: int
    crc32: int


@dataclass
class StreamManifest:
    version: int
    model: dict            # serialized ModelConfig
    ablate: str
    chunks: list           # ChunkRecord per frame, chunk 0 is the base
    weights: list          # (name, shape, offset, length) in the base payload
    header_bytes: int      # absolute offset of chunk data
    total_bytes: int

    @property
    def T(self):
        return int(self.model["T"])

    @property
    def F(self):
        return int(self.model["F"])

    @property
    def dims(self):
        return tuple(self.model["dims"])

    @property
    def k(self):
        return Fraction(self.model["k_num"], self.model["k_den"])

    @property
    def backbone(self):
        return self.model["backbone"]

    @property
    def rank(self):
        return self.model["rank"] if self.backbone == "cp" else None

    def to_dict(self):
        return {
            "magic": MAGIC.decode(),
            "version": self.version,
            "dtype": "f32le",
            "model": self.model,
            "ablate": self.ablate,
            "streamed_grids": list(STREAMED_GRIDS),
            "chunks": [[c.offset, c.length, c.crc32] for c in self.chunks],
            "weights": [[n, list(s), o, l] for n, s, o, l in self.weights],
        }

    @classmethod
    def from_dict(cls, d, header_bytes, total_bytes):
        if d.get("magic") != MAGIC.decode() or d.get("dtype") != "f32le":
            raise StreamError("manifest does not describe an NFPS stream")
        chunks = [ChunkRecord(*c) for c in d["chunks"]]
        weights = [(n, tuple(s), o, l) for n, s, o, l in d["weights"]]
        return cls(version=d["version"], model=d["model"], ablate=d["ablate"],
                   chunks=chunks, weights=weights,
                   header_bytes=header_bytes, total_bytes=total_bytes)


# ---------------------------------------------------------------------------
# per-channel payloads


def _channel_bytes(grid, c):
    if grid.backbone == "dense":
        return np.ascontiguousarray(
            grid.storage.data[:, c]).astype("<f4").tobytes()
    return b"".join(f.data.astype("<f4").tobytes() for f in grid.factors[c])


def _load_channel(grid, c, blob, offset):
    if grid.backbone == "dense":
        n = grid.n_nodes
        col = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        grid.storage.data[:, c] = col.astype(np.float64)
        return offset + 4 * n
    for f in grid.factors[c]:
        n = f.data.size
        vals = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        f.data[:] = vals.astype(np.float64).reshape(f.shape)
        offset += 4 * n
    return offset


def _channel_nbytes(grid):
    if grid.backbone == "dense":
        return 4 * grid.n_nodes
    return 4 * grid.rank * sum(grid.dims)


def _streamed(model):
    return [g for g in (model.V_f, model.V_s, model.V_n)
            if g.name in STREAMED_GRIDS]


def _chunk_payload(model, t):
    """Raw bytes of the channels newly stored at frame t (t >= 1)."""
    parts = []
    for g in _streamed(model):
        for c in g.chunk_channels(t):
            parts.append(_channel_bytes(g, c))
    return b"".join(parts)


def _base_payload(model):
    """Frame-0 windows of streamed grids + static grid + all weights."""
    parts = []
    weights = []
    pos = 0
    for g in _streamed(model):
        for c in g.window(0).slot_channels:
            blob = _channel_bytes(g, c)
            parts.append(blob)
            pos += len(blob)
    for c in range(model.V_s.n_channels):
        blob = _channel_bytes(model.V_s, c)
        parts.append(blob)
        pos += len(blob)
    for name, mlp in model.mlps().items():
        for p in mlp.parameters():
            blob = p.data.astype("<f4").tobytes()
            weights.append((p.name, tuple(p.shape), pos, len(blob)))
            parts.append(blob)
            pos += len(blob)
    return b"".join(parts), weights


# ---------------------------------------------------------------------------
# pack / unpack


def pack(model, path):
    """Write the model as an NFPS stream; returns its manifest."""
    for p in model.parameters():
        if not np.all(np.isfinite(p.data)):
            raise StreamError(f"parameter {p.name} has non-finite values")
    base, weights = _base_payload(model)
    blobs = [base]
    for t in range(1, model.config.T):
        blobs.append(_chunk_payload(model, t))
    chunks = []
    offset = 0
    for blob in blobs:
        chunks.append(ChunkRecord(offset=offset, length=len(blob),
                                  crc32=zlib.crc32(blob)))
        offset += len(blob)
    manifest = StreamManifest(
        version=VERSION, model=model.config.to_dict(),
        ablate=model.ablate, chunks=chunks, weights=weights,
        header_bytes=0, total_bytes=0)
    body = json.dumps(manifest.to_dict(), sort_keys=True,
                      separators=(",", ":")).encode()
    header = MAGIC + VERSION.to_bytes(4, "little") \
        + len(body).to_bytes(8, "little") + body
    manifest.header_bytes = len(header)
    manifest.total_bytes = len(header) + offset
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return manifest


def read_manifest(path):
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise StreamError(f"{path} is not an NFPS stream")
        version = int.from_bytes(head[4:8], "little")
        if version != VERSION:
            raise StreamError(f"unsupported stream version {version}")
        mlen = int.from_bytes(head[8:16], "little")
        body = fh.read(mlen)
        if len(body) != mlen:
            raise StreamError("truncated stream: manifest cut short")
    manifest = StreamManifest.from_dict(json.loads(body.decode()),
                                        header_bytes=16 + mlen,
                                        total_bytes=size)
    _validate_manifest(manifest)
    return manifest


def _validate_manifest(m):
    if len(m.chunks) != m.T:
        raise StreamError(
            f"chunk count {len(m.chunks)} != frame count {m.T}")
    pos = 0
    for i, c in enumerate(m.chunks):
        if c.offset != pos:
            raise StreamError(f"chunk {i} offset {c.offset} is not contiguous")
        pos += c.length
    if m.header_bytes + pos != m.total_bytes:
        raise StreamError(
            f"truncated stream: expected {m.header_bytes + pos} bytes, "
            f"file has {m.total_bytes}")


def read_chunk_bytes(path, manifest, t):
    """Exact on-disk bytes of chunk t (no checksum verification)."""
    rec = manifest.chunks[t]
    with open(path, "rb") as fh:
        fh.seek(manifest.header_bytes + rec.offset)
        data = fh.read(rec.length)
    if len(data) != rec.length:
        raise StreamError(f"truncated stream: chunk {t} cut short")
    return data


def _verify(rec, data, t):
    if zlib.crc32(data) != rec.crc32:
        raise StreamError(f"checksum mismatch on chunk {t}")


def apply_chunk(model, manifest, t, data):
    """Load one frame chunk's channels into the model's streamed grids."""
    if not 1 <= t <= manifest.T - 1:
        raise StreamError(f"chunk index {t} out of range [1, {manifest.T - 1}]")
    _verify(manifest.chunks[t], data, t)
    offset = 0
    for g in _streamed(model):
        for c in g.chunk_channels(t):
            offset = _load_channel(g, c, data, offset)
    if offset != len(data):
        raise StreamError(f"chunk {t}: {len(data)} bytes, used {offset}")


def unpack(path, up_to_frame=None):
    """Rebuild a renderable model from a stream.

    With up_to_frame=t only chunks 0..t are loaded; the model then renders
    any time <= t, and applying the remaining chunks later yields a model
    identical to a full unpack.  Returns (model, manifest).
    """
    manifest = read_manifest(path)
    config = ModelConfig.from_dict(manifest.model)
    model = SceneModel(config, rng=np.random.default_rng(config.seed))
    model.ablate = manifest.ablate
    for g in (model.V_f, model.V_s, model.V_n):
        for p in g.parameters():
            p.data[:] = 0.0

    base = read_chunk_bytes(path, manifest, 0)
    _verify(manifest.chunks[0], base, 0)
    offset = 0
    for g in _streamed(model):
        for c in g.window(0).slot_channels:
            offset = _load_channel(g, c, base, offset)
    for c in range(model.V_s.n_channels):
        offset = _load_channel(model.V_s, c, base, offset)
    by_name = {}
    for mlp in model.mlps().values():
        for p in mlp.parameters():
            by_name[p.name] = p
    for name, shape, w_off, length in manifest.weights:
        p = by_name.pop(name, None)
        if p is None or tuple(p.shape) != tuple(shape):
            raise StreamError(f"weight record {name} {shape} does not match "
                              f"the model architecture")
        vals = np.frombuffer(base, dtype="<f4", count=p.data.size,
                             offset=w_off)
        p.data[:] = vals.astype(np.float64).reshape(p.shape)
    if by_name:
        raise StreamError(f"stream is missing weights for {sorted(by_name)}")

    last = manifest.T - 1 if up_to_frame is None else int(up_to_frame)
    for t in range(1, last + 1):
        apply_chunk(model, manifest, t, read_chunk_bytes(path, manifest, t))
    return model, manifest


# ---------------------------------------------------------------------------
# bitrate accounting


def predicted_chunk_bytes(manifest, t):
    """Exact size of chunk t from the channel schedule alone."""
    from .feature_grid import frame_chunk_channels

    if not 0 < t <= manifest.T - 1:
        raise ValueError(f"chunk index {t} out of range [1, {manifest.T - 1}]")
    n_new = len(frame_chunk_channels(t, manifest.k, manifest.F, manifest.T))
    if manifest.backbone == "dense":
        per_channel = 4 * int(np.prod(manifest.dims))
    else:
        per_channel = 4 * manifest.rank * sum(manifest.dims)
    return n_new * per_channel * len(STREAMED_GRIDS)


def mean_bitrate(manifest):
    """Total file bytes over the frame count."""
    return manifest.total_bytes / manifest.T
