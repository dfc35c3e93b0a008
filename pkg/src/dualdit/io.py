"""On-disk formats: 16-bit WAV, ``VDT1`` tensor files, checkpoints, embedding sidecars.

Tensor file layout (all little-endian)::

    b"VDT1" | dtype u8 (1 = f32) | rank u8 | dims rank x u32 | payload f32 row-major

Checkpoint layout::

    b"VDCK" | version u32 | header_len u32 | header (UTF-8 JSON, sorted keys)
    | for each tensor in header["tensors"] order: name_len u16 | name | tensor file block

The JSON header carries config, step, RNG state and any other scalar state.
"""

from __future__ import annotations

import io
import json
import struct
import wave
from pathlib import Path
from typing import Mapping

import numpy as np

from .dsp import Waveform
from .errors import FormatError

TENSOR_MAGIC = b"VDT1"
CHECKPOINT_MAGIC = b"VDCK"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 1


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit mono PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    x = w.samples
    peak = float(np.max(np.abs(x)))
    if peak > 1.0:
        x = x / peak
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------


def tensor_to_bytes(a) -> bytes:
    a = np.array(a, dtype="<f4", order="C")
    if a.ndim > 255:
        raise FormatError("rank too large")
    head = TENSOR_MAGIC + struct.pack("<BB", DTYPE_F32, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _read_tensor(buf: io.BytesIO) -> np.ndarray:
    magic = buf.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    dtype, rank = struct.unpack("<BB", buf.read(2))
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    dims = struct.unpack(f"<{rank}I", buf.read(4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = buf.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    out = _read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return out


def save_tensor(path, a) -> None:
    Path(path).write_bytes(tensor_to_bytes(a))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_to_bytes(tensors: Mapping[str, np.ndarray], header: dict | None = None) -> bytes:
    names = sorted(tensors)
    header = dict(header or {})
    header["tensors"] = names
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    for name in names:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(tensor_to_bytes(tensors[name]))
    return b"".join(out)


def checkpoint_from_bytes(data: bytes, prefix: str | None = None):
    """Parse a checkpoint. With ``prefix`` only tensors under it are kept."""
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, head_len = struct.unpack("<II", buf.read(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(head_len).decode())
    tensors = {}
    for expected in header.pop("tensors"):
        (n,) = struct.unpack("<H", buf.read(2))
        name = buf.read(n).decode()
        if name != expected:
            raise FormatError(f"checkpoint tensor order mismatch at {name!r}")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        t = _read_tensor(buf)
        if prefix is None or name.startswith(prefix):
            tensors[name] = t
    return tensors, header


def save_checkpoint(path, tensors, header=None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(tensors, header))


def load_checkpoint(path, prefix=None):
    return checkpoint_from_bytes(Path(path).read_bytes(), prefix=prefix)


# ---------------------------------------------------------------------------
# Embedding files with a sidecar index
# ---------------------------------------------------------------------------


def save_embeddings(path, vectors, ids=None) -> None:
    """Write an (n, E) tensor file plus ``<path>.index.json`` mapping ids to rows."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors[None, :]
    save_tensor(path, vectors)
    if ids is not None:
        index = {str(k): i for i, k in enumerate(ids)}
        Path(str(path) + ".index.json").write_text(json.dumps(index, sort_keys=True, indent=1))


def load_embeddings(path, mean_pool: bool = False):
    """Read an embedding file. Rank-3 files (n, frames, E) are mean-pooled over
    frames when ``mean_pool`` is set. Returns (vectors, index or None)."""
    a = load_tensor(path).astype(np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim == 3:
        if not mean_pool:
            raise FormatError("rank-3 embedding file needs mean_pool=True")
        a = a.mean(axis=1)
    if a.ndim != 2:
        raise FormatError(f"embedding file must be rank 1-3, got rank {a.ndim}")
    side = Path(str(path) + ".index.json")
    index = json.loads(side.read_text()) if side.exists() else None
    return a, index
