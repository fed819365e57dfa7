"""Per-modality embeddings at clip and segment level, plus an on-disk cache.

Encoders are adapters with an ``encode(clip, span, media)`` method. Real
foundation-model adapters can be plugged in; the mock encoders here are pure
functions of a seed and the clip identity, with an optional label-conditioned
mode whose vectors sit near per-label centroids.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .media import SegmentSpan, segment_clip
from .taxonomy import ClipRecord, DatasetManifest

logger = logging.getLogger(__name__)

MODALITIES = ("image", "video", "audio", "speech")
LEVELS = ("clip", "segment")
REFERENCE_DIM = 1024
DTYPE = np.dtype("<f4")

CACHE_MAGIC = b"AVFC"
CACHE_VERSION = 1


class EncoderAdapter(Protocol):
    name: str
    modality: str
    level: str
    dim: int

    def encode(self, clip: ClipRecord, span: SegmentSpan | None, media=None) -> np.ndarray:
        ...


def pool_time(frame_features) -> np.ndarray:
    """Element-wise mean over the time axis of a ``(frames, dim)`` sequence."""
    arr = np.asarray(frame_features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("pool_time needs a non-empty sequence of equal-length vectors (no speech frames?)")
    return arr.mean(axis=0)


def _rng_for(*parts) -> np.random.Generator:
    key = "|".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=16).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype="<u8"))


@dataclass
class MockEncoder:
    """Deterministic stand-in for a foundation-model encoder.

    Output depends only on ``(seed, modality, clip_id, segment_index)``. In
    ``separable`` mode each vector is the sum of unit-variance centroids of
    the clip's labels plus Gaussian noise of scale ``noise``; restricting
    ``label_subset`` makes the modality blind to the other labels.
    """

    seed: int
    modality: str
    level: str
    dim: int = REFERENCE_DIM
    separable: bool = False
    noise: float = 0.5
    label_subset: frozenset[int] | None = None
    name: str = "mock"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.modality not in MODALITIES or self.level not in LEVELS:
            raise ValueError(f"bad modality/level {self.modality}/{self.level}")

    def centroid(self, label: int) -> np.ndarray:
        return _rng_for(self.seed, self.modality, "centroid", label).standard_normal(self.dim)

    def _vector(self, clip: ClipRecord, index: int) -> np.ndarray:
        rng = _rng_for(self.seed, self.modality, clip.clip_id, index)
        if not self.separable:
            return rng.standard_normal(self.dim)
        v = self.noise * rng.standard_normal(self.dim)
        for c in sorted(clip.labels):
            if self.label_subset is None or c in self.label_subset:
                v += self.centroid(c)
        return v

    def encode(self, clip: ClipRecord, span: SegmentSpan | None, media=None) -> np.ndarray:
        index = -1 if span is None else span.index
        return self._vector(clip, index).astype(DTYPE)


@dataclass
class MockSpeechFrames(MockEncoder):
    """Frame-level speech mock: ``frames_per_segment`` vectors per 1-second span."""

    frames_per_segment: int = 50

    def frames(self, clip: ClipRecord, span: SegmentSpan) -> np.ndarray:
        base = self._vector(clip, span.index)
        jitter = _rng_for(self.seed, "speech-frames", clip.clip_id, span.index)
        return base + self.noise * jitter.standard_normal((self.frames_per_segment, self.dim))


@dataclass
class PooledSpeechEncoder:
    """Speech features: time-pooled per segment; clip level is the mean of segments."""

    frame_encoder: MockSpeechFrames
    level: str = "segment"
    modality: str = "speech"
    name: str = "pooled-speech"

    @property
    def dim(self) -> int:
        return self.frame_encoder.dim

    def encode(self, clip: ClipRecord, span: SegmentSpan | None, media=None) -> np.ndarray:
        if span is not None:
            return pool_time(self.frame_encoder.frames(clip, span)).astype(DTYPE)
        segs = [pool_time(self.frame_encoder.frames(clip, s)) for s in segment_clip(clip.duration)]
        return pool_time(segs).astype(DTYPE)


def mock_encoder(seed: int, modality: str, level: str, dim: int = REFERENCE_DIM, **kwargs):
    """Build the mock adapter for ``modality``; speech goes through time pooling."""
    if modality == "speech":
        frame_kwargs = {k: v for k, v in kwargs.items() if k != "name"}
        frames = MockSpeechFrames(seed, "speech", "segment", dim, **frame_kwargs)
        return PooledSpeechEncoder(frames, level=level)
    return MockEncoder(seed, modality, level, dim, **kwargs)


@dataclass
class FeatureTable:
    modality: str
    level: str
    dim: int
    keys: list[tuple[str, int]] = field(default_factory=list)
    values: np.ndarray = None
    failures: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros((0, self.dim), dtype=DTYPE)
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE)
        if self.values.shape != (len(self.keys), self.dim):
            raise ValueError(f"values shape {self.values.shape} != ({len(self.keys)}, {self.dim})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("duplicate feature keys")
        self._rows: dict[str, list[int]] = {}
        for row, (cid, t) in enumerate(self.keys):
            if (t == -1) != (self.level == "clip"):
                raise ValueError(f"segment index {t} inconsistent with level {self.level}")
            self._rows.setdefault(cid, []).append(row)
        if self.level == "segment":
            for cid, rows in self._rows.items():
                if [self.keys[r][1] for r in rows] != list(range(1, len(rows) + 1)):
                    raise ValueError(f"clip {cid!r}: segment indices not contiguous from 1")

    def __len__(self) -> int:
        return len(self.keys)

    def clip_ids(self) -> list[str]:
        return list(self._rows)

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._rows

    def clip_vector(self, clip_id: str) -> np.ndarray:
        if self.level != "clip":
            raise ValueError("clip_vector needs a clip-level table")
        return self.values[self._rows[clip_id][0]]

    def clip_segments(self, clip_id: str) -> np.ndarray:
        """``(T, dim)`` segment matrix for one clip, in segment order."""
        return self.values[self._rows[clip_id]]

    def equals(self, other: "FeatureTable") -> bool:
        """Bit-level equality, including float payload bytes."""
        return (
            (self.modality, self.level, self.dim, self.keys) == (other.modality, other.level, other.dim, other.keys)
            and self.values.tobytes() == other.values.tobytes()
        )


def extract_features(
    manifest: DatasetManifest | Iterable[ClipRecord],
    adapter,
    media_resolver: Callable[[ClipRecord], object] | None = None,
    workers: int = 1,
) -> FeatureTable:
    """Encode every clip (or every segment of every clip) with ``adapter``.

    A clip whose media cannot be resolved or encoded is recorded in
    ``table.failures`` and skipped; the rest of the batch continues. Output
    order follows manifest order regardless of ``workers``.
    """
    clips = list(manifest.clips if isinstance(manifest, DatasetManifest) else manifest)

    def one(clip: ClipRecord):
        try:
            media = media_resolver(clip) if media_resolver is not None else None
            if adapter.level == "clip":
                return [(-1, adapter.encode(clip, None, media))], None
            return [(s.index, adapter.encode(clip, s, media)) for s in segment_clip(clip.duration)], None
        except Exception as exc:  # noqa: BLE001 - per-clip failure ledger
            return None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, clips))
    else:
        results = [one(c) for c in clips]

    keys, rows, failures = [], [], {}
    for clip, (vecs, err) in zip(clips, results):
        if err is not None:
            logger.warning("feature extraction failed for %s: %s", clip.clip_id, err)
            failures[clip.clip_id] = err
            continue
        for t, v in vecs:
            keys.append((clip.clip_id, t))
            rows.append(np.asarray(v, dtype=DTYPE))
    values = np.stack(rows) if rows else np.zeros((0, adapter.dim), dtype=DTYPE)
    return FeatureTable(adapter.modality, adapter.level, adapter.dim, keys, values, failures)


# ---------------------------------------------------------------------------
# Cache file
# ---------------------------------------------------------------------------


class CacheError(ValueError):
    pass


class CacheFormatError(CacheError):
    pass


class CacheVersionError(CacheError):
    pass


class CacheTruncatedError(CacheError):
    pass


class CacheChecksumError(CacheError):
    pass


def dumps_cache(table: FeatureTable) -> bytes:
    header = {"modality": table.modality, "level": table.level, "dim": table.dim,
              "count": len(table), "dtype": "f32le"}
    parts = [json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    for cid, t in table.keys:
        raw = cid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<i", t))
    parts.append(table.values.astype(DTYPE, copy=False).tobytes())
    body = b"".join(parts)
    return CACHE_MAGIC + bytes([CACHE_VERSION]) + body + struct.pack("<I", zlib.crc32(body))


def loads_cache(data: bytes) -> FeatureTable:
    if data[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic {data[:4]!r}")
    if len(data) < 5:
        raise CacheTruncatedError("missing version byte")
    if data[4] != CACHE_VERSION:
        raise CacheVersionError(f"unsupported cache version {data[4]}")
    nl = data.find(b"\n", 5)
    if nl < 0:
        raise CacheTruncatedError("header line not terminated")
    try:
        header = json.loads(data[5:nl].decode("utf-8"))
        dim, count = int(header["dim"]), int(header["count"])
        if header.get("dtype") != "f32le" or dim < 1 or count < 0:
            raise ValueError(header)
    except (ValueError, KeyError, TypeError) as exc:
        raise CacheFormatError(f"malformed header: {exc}") from exc

    pos = nl + 1
    keys = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n + 4 > len(data):
                raise CacheTruncatedError("index section truncated")
            cid = data[pos:pos + n].decode("utf-8")
            pos += n
            (t,) = struct.unpack_from("<i", data, pos)
            pos += 4
            keys.append((cid, t))
    except struct.error as exc:
        raise CacheTruncatedError("index section truncated") from exc
    except UnicodeDecodeError as exc:
        raise CacheFormatError(f"clip id is not UTF-8: {exc}") from exc

    nbytes = count * dim * DTYPE.itemsize
    if len(data) < pos + nbytes + 4:
        raise CacheTruncatedError(f"payload truncated: need {pos + nbytes + 4} bytes, have {len(data)}")
    if len(data) > pos + nbytes + 4:
        raise CacheFormatError("trailing bytes after checksum")
    (crc,) = struct.unpack_from("<I", data, pos + nbytes)
    if zlib.crc32(data[5:pos + nbytes]) != crc:
        raise CacheChecksumError("CRC mismatch")
    values = np.frombuffer(data, dtype=DTYPE, count=count * dim, offset=pos).reshape(count, dim)
    try:
        return FeatureTable(header["modality"], header["level"], dim, keys, values.copy())
    except ValueError as exc:
        raise CacheFormatError(str(exc)) from exc


def write_cache(table: FeatureTable, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_cache(table))
    return path


def read_cache(path) -> FeatureTable:
    return loads_cache(Path(path).read_bytes())


def cache_name(modality: str, level: str) -> str:
    return f"{modality}.{level}.avfc"
