"""Clip-to-carrier conversion: 3x3 composite previews and 1-second segments.

Frames are plain ``(H, W, C)`` uint8 arrays; decoding real video is left to
whatever adapter produces the :class:`FrameSequence`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

GRID = 3
GRID_CELLS = GRID * GRID
SEGMENT_SECONDS = 1.0
MIN_RESIDUAL_SECONDS = 0.5


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[np.ndarray, ...]
    timestamps: tuple[float, ...]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a frame sequence needs at least one frame")
        if len(self.frames) != len(self.timestamps):
            raise ValueError("frames and timestamps differ in length")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def fps(self) -> float:
        if len(self) < 2:
            return 1.0
        return (len(self) - 1) / (self.timestamps[-1] - self.timestamps[0])


@dataclass(frozen=True)
class CompositeImage:
    pixels: np.ndarray
    source_indices: tuple[int, ...]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def cell(self, row: int, col: int) -> np.ndarray:
        h, w = self.height // GRID, self.width // GRID
        return self.pixels[row * h:(row + 1) * h, col * w:(col + 1) * w]

    def digest_bytes(self) -> bytes:
        return repr(self.pixels.shape).encode() + self.pixels.tobytes()


@dataclass(frozen=True)
class SegmentSpan:
    index: int
    start_s: float
    end_s: float
    padded: bool = False


def select_grid_frames(n: int) -> list[int]:
    """Nine frame indices spread evenly over ``n`` frames, endpoints included.

    ``i_k = round_half_up(k * (n - 1) / 8)``; evaluated in integers so ties
    never depend on float representation.

    >>> select_grid_frames(5)
    [0, 1, 1, 2, 2, 3, 3, 4, 4]
    """
    if n < 1:
        raise ValueError(f"need at least one frame, got n={n}")
    last = GRID_CELLS - 1
    return [(2 * k * (n - 1) + last) // (2 * last) for k in range(GRID_CELLS)]


def compose_grid(frames: FrameSequence, indices: Sequence[int] | None = None) -> CompositeImage:
    """Tile nine frames row-major into a ``3h x 3w`` image (no borders)."""
    if indices is None:
        indices = select_grid_frames(len(frames))
    indices = [int(i) for i in indices]
    if len(indices) != GRID_CELLS:
        raise ValueError(f"expected {GRID_CELLS} indices, got {len(indices)}")
    for i in indices:
        if not 0 <= i < len(frames):
            raise IndexError(f"frame index {i} out of range for {len(frames)} frames")
    shapes = {f.shape for f in frames.frames}
    if len(shapes) != 1:
        raise ValueError(f"frames must share one size, got {sorted(shapes)}")
    cells = [frames.frames[i] for i in indices]
    rows = [np.concatenate(cells[r * GRID:(r + 1) * GRID], axis=1) for r in range(GRID)]
    return CompositeImage(np.concatenate(rows, axis=0), tuple(indices))


def segment_clip(duration: float) -> list[SegmentSpan]:
    """Split a clip into 1-second spans.

    A trailing remainder of at least half a second becomes one extra span
    flagged ``padded``; shorter remainders are dropped.
    """
    if not math.isfinite(duration) or duration < SEGMENT_SECONDS:
        raise ValueError(f"clip duration {duration} is shorter than {SEGMENT_SECONDS}s")
    full = int(math.floor(duration))
    spans = [SegmentSpan(t + 1, float(t), float(t + 1)) for t in range(full)]
    if duration - full >= MIN_RESIDUAL_SECONDS - 1e-9:
        spans.append(SegmentSpan(full + 1, float(full), float(duration), padded=True))
    return spans


def cut_audio(samples: np.ndarray, rate: int, spans: Sequence[SegmentSpan]) -> list[np.ndarray]:
    """Slice a mono waveform into one ``rate``-sample chunk per span, zero-padding short ones."""
    out = []
    for span in spans:
        lo = int(round(span.start_s * rate))
        chunk = samples[lo:lo + rate]
        if len(chunk) < rate:
            chunk = np.concatenate([chunk, np.zeros(rate - len(chunk), dtype=samples.dtype)])
        out.append(chunk)
    return out


def cut_frames(frames: FrameSequence, spans: Sequence[SegmentSpan]) -> list[FrameSequence]:
    """Group frames by span; a padded span repeats its last frame to fill one second."""
    ts = np.asarray(frames.timestamps)
    per_second = max(1, int(round(frames.fps)))
    out = []
    for span in spans:
        idx = np.flatnonzero((ts >= span.start_s) & (ts < span.start_s + SEGMENT_SECONDS))
        if len(idx) == 0:
            idx = np.array([np.searchsorted(ts, span.start_s, side="right") - 1]).clip(0)
        picked = [frames.frames[i] for i in idx]
        stamps = [float(ts[i]) for i in idx]
        if span.padded:
            step = 1.0 / per_second
            while len(picked) < per_second:
                picked.append(picked[-1])
                stamps.append(stamps[-1] + step)
        out.append(FrameSequence(tuple(picked), tuple(stamps)))
    return out


def synthetic_frames(n: int, width: int = 32, height: int = 32, fps: float = 30.0, seed: int = 0) -> FrameSequence:
    """Frames whose pixels encode their own index (channel 0) plus seeded noise."""
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n):
        f = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
        f[..., 0] = i % 256
        frames.append(f)
    return FrameSequence(tuple(frames), tuple(i / fps for i in range(n)))


def write_composite(image: CompositeImage, out_dir, clip_id: str) -> Path:
    """Save ``<clip_id>.grid.png`` and append its source indices to ``grids.jsonl``."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{clip_id}.grid.png"
    Image.fromarray(image.pixels).save(path, format="PNG")
    with open(out_dir / "grids.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"clip_id": clip_id, "image": path.name,
                             "source_indices": list(image.source_indices)}) + "\n")
    return path


def read_composite(path) -> CompositeImage:
    from PIL import Image

    path = Path(path)
    pixels = np.asarray(Image.open(path))
    indices: tuple[int, ...] = ()
    sidecar = path.parent / "grids.jsonl"
    if sidecar.exists():
        for line in sidecar.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if rec["image"] == path.name:
                indices = tuple(rec["source_indices"])
    return CompositeImage(pixels, indices)
