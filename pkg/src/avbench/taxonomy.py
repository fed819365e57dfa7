"""Behavior taxonomy, clip manifests and dataset statistics.

The taxonomy has ten categories: nine autism-related behaviors and a
``Background`` class meaning none of the nine are present. Manifests are
line-delimited JSON files, one clip per line, with canonical label names.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "BehaviorCategory",
    "ClipRecord",
    "DatasetManifest",
    "ManifestParseError",
    "ManifestValidationError",
    "ManifestSpec",
    "StatisticsReport",
    "PAPER_SPEC",
    "BACKGROUND",
    "NUM_CLASSES",
    "SPLITS",
    "taxonomy",
    "category_names",
    "category_id",
    "load_manifest",
    "save_manifest",
    "serialize_manifest",
    "parse_manifest",
    "validate_paper_statistics",
    "propagate_segment_labels",
    "synthesize_manifest",
]

NUM_CLASSES = 10
BACKGROUND = 9
SPLITS = ("train", "val", "test")
MIN_CLIP_SECONDS = 1.0
MANIFEST_KEYS = ("clip_id", "video_id", "start_s", "end_s", "labels", "split")


class ManifestParseError(ValueError):
    """A manifest line could not be decoded."""


class ManifestValidationError(ValueError):
    """A manifest record violates a clip or dataset invariant."""


@dataclass(frozen=True)
class BehaviorCategory:
    id: int
    canonical_name: str
    description: str
    is_social: bool


@lru_cache(maxsize=1)
def taxonomy() -> tuple[BehaviorCategory, ...]:
    """The ten categories in id order, loaded from the packaged resource."""
    raw = resources.files("avbench").joinpath("data/taxonomy.json").read_text("utf-8")
    cats = tuple(
        BehaviorCategory(c["id"], c["name"], c["description"], c["is_social"])
        for c in json.loads(raw)["categories"]
    )
    assert len(cats) == NUM_CLASSES
    assert len({c.canonical_name for c in cats}) == NUM_CLASSES
    assert sum(c.is_social for c in cats) == 3
    return cats


def category_names() -> tuple[str, ...]:
    return tuple(c.canonical_name for c in taxonomy())


@lru_cache(maxsize=1)
def _name_index() -> dict[str, int]:
    return {c.canonical_name.casefold(): c.id for c in taxonomy()}


def category_id(name: str) -> int:
    """Look up a category id by name, case-insensitively."""
    try:
        return _name_index()[" ".join(name.split()).casefold()]
    except KeyError:
        raise KeyError(f"unknown behavior category {name!r}") from None


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    video_id: str
    start_s: float
    end_s: float
    labels: frozenset[int]
    split: str

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s

    @property
    def label_names(self) -> list[str]:
        names = category_names()
        return [names[i] for i in sorted(self.labels)]

    def validate(self) -> None:
        def fail(msg: str):
            raise ManifestValidationError(f"clip {self.clip_id!r}: {msg}")

        if not self.clip_id:
            fail("empty clip_id")
        if not (math.isfinite(self.start_s) and math.isfinite(self.end_s)):
            fail("non-finite timestamps")
        if self.start_s < 0:
            fail(f"start_s={self.start_s} is negative")
        if self.end_s <= self.start_s:
            fail(f"end_s={self.end_s} must exceed start_s={self.start_s}")
        if self.duration < MIN_CLIP_SECONDS:
            fail(f"duration {self.duration:.3f}s is shorter than {MIN_CLIP_SECONDS}s")
        if not self.labels:
            fail("empty label set")
        if any(not (0 <= c < NUM_CLASSES) for c in self.labels):
            fail(f"label ids out of range: {sorted(self.labels)}")
        if BACKGROUND in self.labels and len(self.labels) > 1:
            fail("Background cannot be combined with other labels")
        if self.split not in SPLITS:
            fail(f"split {self.split!r} not in {SPLITS}")

    def to_json(self) -> str:
        obj = {
            "clip_id": self.clip_id,
            "video_id": self.video_id,
            "start_s": float(self.start_s),
            "end_s": float(self.end_s),
            "labels": self.label_names,
            "split": self.split,
        }
        return json.dumps(obj, ensure_ascii=False)


@dataclass(frozen=True)
class DatasetManifest:
    clips: tuple[ClipRecord, ...]
    taxonomy: tuple[BehaviorCategory, ...] = field(default_factory=taxonomy)

    def __post_init__(self):
        seen = set()
        for clip in self.clips:
            clip.validate()
            if clip.clip_id in seen:
                raise ManifestValidationError(f"clip {clip.clip_id!r}: duplicate clip_id")
            seen.add(clip.clip_id)

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self):
        return iter(self.clips)

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def by_id(self) -> dict[str, ClipRecord]:
        return {c.clip_id: c for c in self.clips}

    def label_matrix(self, split: str | None = None) -> np.ndarray:
        clips = self.clips if split is None else self.split(split)
        y = np.zeros((len(clips), NUM_CLASSES), dtype=bool)
        for i, c in enumerate(clips):
            y[i, sorted(c.labels)] = True
        return y


def _record_from_obj(obj, lineno: int) -> ClipRecord:
    if not isinstance(obj, dict) or set(obj) != set(MANIFEST_KEYS):
        keys = sorted(obj) if isinstance(obj, dict) else type(obj).__name__
        raise ManifestParseError(f"line {lineno}: expected keys {list(MANIFEST_KEYS)}, got {keys}")
    try:
        labels = frozenset(category_id(n) for n in obj["labels"])
        if len(labels) != len(obj["labels"]):
            raise ManifestParseError(f"line {lineno}: duplicate labels")
        return ClipRecord(
            clip_id=str(obj["clip_id"]),
            video_id=str(obj["video_id"]),
            start_s=float(obj["start_s"]),
            end_s=float(obj["end_s"]),
            labels=labels,
            split=str(obj["split"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ManifestParseError):
            raise
        raise ManifestParseError(f"line {lineno}: {exc}") from exc


def parse_manifest(text: str) -> DatasetManifest:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"line {lineno}: {exc.msg}") from exc
        records.append(_record_from_obj(obj, lineno))
    return DatasetManifest(tuple(records))


def load_manifest(path) -> DatasetManifest:
    """Read a line-delimited manifest, enforcing all record invariants.

    Raises:
        ManifestParseError: a line is not a well-formed record (message
            names the 1-based line number).
        ManifestValidationError: a record breaks an invariant (message
            names the clip_id).
    """
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def serialize_manifest(manifest: DatasetManifest) -> str:
    return "".join(c.to_json() + "\n" for c in manifest.clips)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.write_text(serialize_manifest(manifest), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestSpec:
    """Target composition for a synthetic manifest.

    ``split_fractions`` are turned into integer split sizes by largest
    remainder. Duration targets are optional; when given, the generated
    durations hit them exactly (to 0.01 s).
    """

    category_counts: tuple[int, ...]
    n_clips: int
    split_fractions: tuple[float, float, float]
    n_videos: int | None = None
    mean_duration: float | None = None
    median_duration: float | None = None
    min_duration: float | None = None
    max_duration: float | None = None
    mean_labels: float | None = None

    def split_sizes(self) -> tuple[int, int, int]:
        return _largest_remainder(self.n_clips, self.split_fractions)


PAPER_SPEC = ManifestSpec(
    category_counts=(161, 126, 108, 129, 110, 166, 42, 113, 296, 177),
    n_clips=928,
    split_fractions=(553 / 928, 193 / 928, 182 / 928),
    n_videos=569,
    mean_duration=25.88,
    median_duration=10.00,
    min_duration=1.00,
    max_duration=887.01,
    mean_labels=1.54,
)


def _largest_remainder(total: int, fractions: Sequence[float]) -> tuple[int, ...]:
    raw = [total * f for f in fractions]
    sizes = [math.floor(r + 1e-9) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: total - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


@dataclass
class StatisticsReport:
    n_clips: int
    category_counts: tuple[int, ...]
    split_sizes: dict[str, int]
    label_total: int
    mean_labels: float
    mean_duration: float
    median_duration: float
    min_duration: float
    max_duration: float
    n_videos: int
    flags: dict[str, bool]

    @property
    def passed(self) -> bool:
        return bool(self.flags) and all(self.flags.values())

    def to_dict(self) -> dict:
        return {
            "n_clips": self.n_clips,
            "category_counts": dict(zip(category_names(), self.category_counts)),
            "split_sizes": self.split_sizes,
            "label_total": self.label_total,
            "mean_labels": self.mean_labels,
            "mean_duration": self.mean_duration,
            "median_duration": self.median_duration,
            "min_duration": self.min_duration,
            "max_duration": self.max_duration,
            "n_videos": self.n_videos,
            "flags": self.flags,
            "passed": self.passed,
        }


def validate_paper_statistics(
    manifest: DatasetManifest, expected: ManifestSpec = PAPER_SPEC
) -> StatisticsReport:
    """Count categories, splits and durations and compare with ``expected``.

    Rates (mean labels, durations) are compared after rounding to two
    decimals, the precision the reference statistics are published at.
    An empty manifest yields zero counts and every flag false.
    """
    counts = [0] * NUM_CLASSES
    for clip in manifest.clips:
        for c in clip.labels:
            counts[c] += 1
    splits = {s: sum(c.split == s for c in manifest.clips) for s in SPLITS}
    n = len(manifest.clips)
    durations = [c.duration for c in manifest.clips]
    label_total = sum(counts)
    empty = n == 0
    report = StatisticsReport(
        n_clips=n,
        category_counts=tuple(counts),
        split_sizes=splits,
        label_total=label_total,
        mean_labels=label_total / n if n else 0.0,
        mean_duration=statistics.fmean(durations) if n else 0.0,
        median_duration=statistics.median(durations) if n else 0.0,
        min_duration=min(durations) if n else 0.0,
        max_duration=max(durations) if n else 0.0,
        n_videos=len({c.video_id for c in manifest.clips}),
        flags={},
    )

    def close(value: float, target: float | None) -> bool | None:
        if target is None:
            return None
        return round(value, 2) == round(target, 2)

    flags = {
        "total": n == expected.n_clips,
        "category_counts": tuple(counts) == tuple(expected.category_counts),
        "split_sizes": tuple(splits[s] for s in SPLITS) == expected.split_sizes(),
        "background_exclusive": all(
            c.labels == {BACKGROUND} for c in manifest.clips if BACKGROUND in c.labels
        ),
    }
    optional = {
        "mean_labels": close(report.mean_labels, expected.mean_labels),
        "mean_duration": close(report.mean_duration, expected.mean_duration),
        "median_duration": close(report.median_duration, expected.median_duration),
        "min_duration": close(report.min_duration, expected.min_duration),
        "max_duration": close(report.max_duration, expected.max_duration),
        "n_videos": None if expected.n_videos is None else report.n_videos == expected.n_videos,
    }
    flags.update({k: v for k, v in optional.items() if v is not None})
    report.flags = {k: (False if empty else bool(v)) for k, v in flags.items()}
    return report


# ---------------------------------------------------------------------------
# Segment labels
# ---------------------------------------------------------------------------


def propagate_segment_labels(
    manifest: DatasetManifest, segmentation: Mapping[str, int]
) -> dict[tuple[str, int], frozenset[int]]:
    """Give every 1-based segment of a clip the clip's full label set."""
    table = {}
    for clip in manifest.clips:
        if clip.clip_id not in segmentation:
            raise KeyError(f"clip {clip.clip_id!r} missing from segmentation")
        count = int(segmentation[clip.clip_id])
        if count < 1:
            raise ValueError(f"clip {clip.clip_id!r}: segment count {count} < 1")
        for t in range(1, count + 1):
            table[(clip.clip_id, t)] = clip.labels
    return table


# ---------------------------------------------------------------------------
# Synthetic manifests
# ---------------------------------------------------------------------------


def _assign_labels(rng: np.random.Generator, n_behavior: int, counts: Sequence[int]) -> list[set[int]]:
    # Categories are placed largest first; clips still without a label are
    # served before clips that already have one.
    label_sets: list[set[int]] = [set() for _ in range(n_behavior)]
    for c in sorted(range(len(counts)), key=lambda c: (-counts[c], c)):
        k = counts[c]
        empty = [i for i in range(n_behavior) if not label_sets[i]]
        rest = [i for i in range(n_behavior) if label_sets[i]]
        rng.shuffle(empty)
        rng.shuffle(rest)
        for i in (empty + rest)[:k]:
            label_sets[i].add(c)
    if any(not s for s in label_sets):
        raise ValueError("infeasible spec: behavior label counts cannot cover every non-Background clip")
    return label_sets


def _durations(rng: np.random.Generator, spec: ManifestSpec) -> list[float]:
    n = spec.n_clips
    raw = np.exp(rng.normal(np.log(10.0), 0.8, size=n))
    if spec.mean_duration is None and spec.median_duration is None:
        hi = spec.max_duration or 60.0
        lo = spec.min_duration or MIN_CLIP_SECONDS
        return [round(float(x), 2) for x in np.clip(raw, lo, hi)]
    return _durations_with_targets(raw, spec)


def _durations_with_targets(raw: np.ndarray, spec: ManifestSpec) -> list[float]:
    """Shape ``raw`` into durations with exact (to 0.01 s) summary statistics.

    Order statistics are pinned first (min, max, median pair) and the upper
    half is rescaled so that the total hits ``n * mean``. Everything is done
    in integer centiseconds.
    """
    n = len(raw)
    lo = round((spec.min_duration or MIN_CLIP_SECONDS) * 100)
    med = round((spec.median_duration or 10.0) * 100)
    hi = round((spec.max_duration or 60.0) * 100)
    if not (lo <= med <= hi) or n < 4:
        raise ValueError("infeasible duration targets")
    order = np.argsort(raw, kind="stable")
    cs = np.empty(n, dtype=np.int64)
    half = n // 2
    lower = order[:half]
    upper = order[half:]
    # lower half in [lo, med], upper half in [med, hi]
    low_vals = np.interp(np.arange(half), [0, half - 1], [0.0, 1.0])
    cs[lower] = np.round(lo + low_vals ** 2 * (med - lo)).astype(np.int64)
    cs[lower[0]] = lo
    cs[lower[-1]] = med
    cs[upper[0]] = med
    cs[upper[-1]] = hi
    if spec.mean_duration is not None:
        target_total = round(spec.mean_duration * 100 * n)
        fixed = int(cs[lower].sum()) + med + hi
        free = upper[1:-1]
        budget = target_total - fixed
        if not (len(free) * med <= budget <= len(free) * hi):
            raise ValueError("infeasible duration targets")
        shape = np.sort(raw[free]) - raw[free].min()
        excess = budget - len(free) * med
        vals = med + (np.floor(shape / shape.sum() * excess) if shape.sum() > 0 else 0)
        vals = np.minimum(vals, hi).astype(np.int64)
        short = budget - int(vals.sum())
        j = len(vals) - 1
        while short > 0 and j >= 0:
            add = min(short, hi - int(vals[j]))
            vals[j] += add
            short -= add
            j -= 1
        cs[free[np.argsort(raw[free], kind="stable")]] = vals
    else:
        cs[upper[1:-1]] = np.clip(np.round(raw[upper[1:-1]] * 100), med, hi)
    return [int(c) / 100 for c in cs]


def synthesize_manifest(seed: int, spec: ManifestSpec) -> DatasetManifest:
    """Build a deterministic manifest with exactly the requested composition.

    Background clips are single-label; the remaining clips receive the nine
    behavior counts so that each carries at least one label. Splits are
    assigned by a seeded shuffle. The same seed and spec always produce the
    same records.

    Raises:
        ValueError: if the counts cannot be realized (e.g. a behavior count
            exceeds the number of non-Background clips, or Background clips
            would need extra labels to absorb the behavior counts).
    """
    counts = tuple(int(c) for c in spec.category_counts)
    if len(counts) != NUM_CLASSES or any(c < 0 for c in counts):
        raise ValueError("category_counts must be 10 non-negative integers")
    if abs(sum(spec.split_fractions) - 1.0) > 1e-9 or any(f < 0 for f in spec.split_fractions):
        raise ValueError("split_fractions must be non-negative and sum to 1")
    n = spec.n_clips
    n_bg = counts[BACKGROUND]
    n_behavior = n - n_bg
    behavior = counts[:BACKGROUND]
    if n == 0:
        if any(counts):
            raise ValueError("infeasible spec: labels requested for zero clips")
        return DatasetManifest(())
    if n_behavior < 0:
        raise ValueError("infeasible spec: more Background clips than clips")
    if n_behavior == 0 and any(behavior):
        raise ValueError("infeasible spec: behavior labels would have to go on Background clips")
    if any(c > n_behavior for c in behavior) or sum(behavior) < n_behavior:
        raise ValueError("infeasible spec: behavior counts incompatible with clip count")

    rng = np.random.default_rng(seed)
    label_sets = [{BACKGROUND} for _ in range(n_bg)] + _assign_labels(rng, n_behavior, behavior)
    perm = rng.permutation(n)
    label_sets = [label_sets[i] for i in perm]

    sizes = spec.split_sizes()
    split_of = np.repeat(np.arange(3), sizes)
    rng.shuffle(split_of)

    durations = _durations(rng, spec)
    rng.shuffle(durations)

    n_videos = spec.n_videos or max(1, math.ceil(n * 0.6))
    n_videos = min(n_videos, n)
    # every video gets at least one clip
    video_of = np.concatenate([np.arange(n_videos), rng.integers(0, n_videos, size=n - n_videos)])
    rng.shuffle(video_of)

    # whole-second starts keep end_s - start_s exact for integral durations
    offsets: dict[int, int] = {}
    clips = []
    width = len(str(n))
    for i in range(n):
        v = int(video_of[i])
        start = float(offsets.get(v, 0))
        end = start + durations[i]
        offsets[v] = math.ceil(end) + 1
        clips.append(
            ClipRecord(
                clip_id=f"clip_{i:0{width}d}",
                video_id=f"video_{v:04d}",
                start_s=start,
                end_s=end,
                labels=frozenset(label_sets[i]),
                split=SPLITS[int(split_of[i])],
            )
        )
    return DatasetManifest(tuple(clips))


def clips_from_labels(
    label_sets: Iterable[Iterable[int]], durations: Iterable[float], splits: Iterable[str]
) -> DatasetManifest:
    """Small helper for hand-built manifests in tests and demos."""
    clips = [
        ClipRecord(f"clip_{i:04d}", f"video_{i:04d}", 0.0, float(d), frozenset(ls), s)
        for i, (ls, d, s) in enumerate(zip(label_sets, durations, splits))
    ]
    return DatasetManifest(tuple(clips))
