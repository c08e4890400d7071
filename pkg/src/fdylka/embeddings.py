"""External clip embeddings: file format, deterministic stub source, time alignment."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FdyLkaError, FormatError, InputError

EMBEDDING_DIM = 768
TARGET_FRAMES = 250
STUB_FRAMES = 496
MAGIC = b"EMB1"


class EmbeddingIOError(FdyLkaError, OSError):
    def __init__(self, clip_id: str, message: str):
        super().__init__(f"embedding for clip {clip_id!r}: {message}")
        self.clip_id = clip_id


def align(e: np.ndarray, method: str = "average_pool", frames: int = TARGET_FRAMES) -> np.ndarray:
    """Resample an ``(N, D)`` embedding sequence to ``frames`` rows.

    ``average_pool`` averages the input rows falling in each output bin
    (falls back to nearest when N < frames); ``nearest_interpolation``
    copies row ``round(i * (N - 1) / (frames - 1))``.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise InputError(f"embedding must be a non-empty (N, D) matrix, got shape {e.shape}")
    n = e.shape[0]
    if method == "average_pool" and n >= frames:
        edges = (np.arange(frames + 1) * n) // frames
        counts = (edges[1:] - edges[:-1])[:, None]
        return np.add.reduceat(e, edges[:-1], axis=0) / counts
    if method not in ("average_pool", "nearest_interpolation"):
        raise InputError(f"unknown alignment method {method!r}")
    if frames == 1:
        return e[:1].copy()
    idx = np.floor(np.arange(frames) * (n - 1) / (frames - 1) + 0.5).astype(int)
    return e[idx]


def write_embedding(path, e: np.ndarray) -> None:
    e = np.asarray(e)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", e.shape[0], e.shape[1]))
        fh.write(np.ascontiguousarray(e, dtype="<f4").tobytes())


def read_embedding(path, clip_id: str | None = None) -> np.ndarray:
    clip_id = clip_id if clip_id is not None else Path(path).stem
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise EmbeddingIOError(clip_id, f"cannot read {path}: {exc.strerror}") from exc
    if raw[:4] != MAGIC or len(raw) < 12:
        raise EmbeddingIOError(clip_id, f"{path} is not an EMB1 file")
    n, dim = struct.unpack("<II", raw[4:12])
    if dim != EMBEDDING_DIM:
        raise FormatError(
            f"embedding for clip {clip_id!r}: dimension {dim}, expected {EMBEDDING_DIM}"
        )
    body = raw[12:]
    if n == 0 or len(body) != n * dim * 4:
        raise EmbeddingIOError(clip_id, f"{path} payload is truncated or empty")
    return np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)


def stub_embedding(clip_id: str, seed: int = 0, frames: int = STUB_FRAMES) -> np.ndarray:
    """Pseudo-random ``(frames, 768)`` matrix keyed by ``(clip_id, seed)``."""
    digest = hashlib.sha256(f"{seed}:{clip_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal((frames, EMBEDDING_DIM))


def provide(clip_id: str, source: str = "stub", seed: int = 0, directory=None) -> np.ndarray:
    """Raw embedding for a clip from ``<directory>/<clip_id>.emb`` or the stub."""
    if source == "stub":
        return stub_embedding(clip_id, seed)
    if source == "file":
        if directory is None:
            raise InputError("file embedding source needs a directory")
        return read_embedding(Path(directory) / f"{clip_id}.emb", clip_id)
    raise InputError(f"unknown embedding source {source!r}")
