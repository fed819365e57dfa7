"""Late fusion of per-modality feature vectors.

Four operators: average, element-wise max, concatenation and a weighted
average normalized by the weight sum. Modalities are always combined in the
fixed order audio, visual, speech, which only matters for concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

FUSION_METHODS = ("average", "max", "concat", "weighted")
MODALITY_ORDER = ("audio", "visual", "speech")
MODALITY_ABBREV = {"a": "audio", "v": "visual", "s": "speech"}
REFERENCE_WEIGHT_GRID = (1.0, 2.0)


def canonical_modality(name: str) -> str:
    name = name.strip().lower()
    name = MODALITY_ABBREV.get(name, name)
    if name not in MODALITY_ORDER:
        raise ValueError(f"unknown modality {name!r}; expected one of {MODALITY_ORDER}")
    return name


def order_modalities(names) -> tuple[str, ...]:
    names = {canonical_modality(n) for n in names}
    return tuple(m for m in MODALITY_ORDER if m in names)


@dataclass(frozen=True)
class FusionSpec:
    method: str = "average"
    modalities: tuple[str, ...] = MODALITY_ORDER
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.method not in FUSION_METHODS:
            raise ValueError(f"fusion method must be one of {FUSION_METHODS}, got {self.method!r}")
        mods = order_modalities(self.modalities)
        if len(mods) != len(self.modalities):
            raise ValueError(f"duplicate or unordered modalities {self.modalities}")
        if not mods:
            raise ValueError("empty modality set")
        if self.method == "weighted":
            if self.weights is None or len(self.weights) != len(mods):
                raise ValueError(f"weighted fusion needs {len(mods)} weights, got {self.weights}")
            if any(not (w > 0) for w in self.weights):
                raise ValueError("fusion weights must be positive")

    @classmethod
    def create(cls, method: str, modalities, weights: Mapping[str, float] | Sequence[float] | None = None):
        """Build a spec, reordering modalities (and a weight mapping) canonically."""
        mods = order_modalities(modalities)
        w = None
        if weights is not None:
            if isinstance(weights, Mapping):
                given = {canonical_modality(k): float(v) for k, v in weights.items()}
                w = tuple(given[m] for m in mods)
            else:
                w = tuple(float(x) for x in weights)
        return cls(method, mods, w)

    @classmethod
    def parse(cls, text: str, modalities=None) -> "FusionSpec":
        """Parse ``"average"`` or ``"weighted:a=1,v=1,s=2"``."""
        method, _, rest = text.strip().partition(":")
        weights = None
        if rest:
            weights = {}
            for item in rest.split(","):
                k, _, v = item.partition("=")
                weights[canonical_modality(k)] = float(v)
            if modalities is None:
                modalities = weights.keys()
        return cls.create(method, modalities if modalities is not None else MODALITY_ORDER, weights)

    def to_text(self) -> str:
        if self.method != "weighted":
            return self.method
        body = ",".join(f"{m[0]}={w:g}" for m, w in zip(self.modalities, self.weights))
        return f"weighted:{body}"

    @property
    def ratio_label(self) -> str:
        return ":".join(f"{w:g}" for w in self.weights) if self.weights else ""

    def output_dim(self, dim: int) -> int:
        return dim * len(self.modalities) if self.method == "concat" else dim


def fuse(spec: FusionSpec, features: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Combine per-modality vectors (or row-stacked batches) into one.

    ``features`` is a mapping keyed by modality name, or a sequence already
    in ``spec.modalities`` order. Trailing dimensions must agree except for
    concatenation.
    """
    if isinstance(features, Mapping):
        given = {canonical_modality(k): v for k, v in features.items()}
        if set(given) != set(spec.modalities):
            raise ValueError(f"features for {sorted(given)} do not match spec modalities {spec.modalities}")
        xs = [np.asarray(given[m], dtype=np.float64) for m in spec.modalities]
    else:
        xs = [np.asarray(x, dtype=np.float64) for x in features]
    if not xs:
        raise ValueError("empty modality set")
    if len(xs) != len(spec.modalities):
        raise ValueError(f"expected {len(spec.modalities)} modalities, got {len(xs)}")
    if spec.method == "concat":
        return np.concatenate(xs, axis=-1)
    if len({x.shape for x in xs}) != 1:
        raise ValueError(f"dimension mismatch across modalities: {[x.shape for x in xs]}")
    stack = np.stack(xs)
    # equal weights reduce to the plain mean, bit for bit
    if spec.method == "average" or (spec.method == "weighted" and len(set(spec.weights)) == 1):
        return stack.mean(axis=0)
    if spec.method == "max":
        return stack.max(axis=0)
    total = np.zeros_like(xs[0])
    for w, x in zip(spec.weights, xs):
        total += w * x
    return total / sum(spec.weights)


def fuse_torch(spec: FusionSpec, xs):
    """Same operators on a list of torch tensors (already in spec order)."""
    import torch

    if spec.method == "concat":
        return torch.cat(xs, dim=-1)
    stack = torch.stack(xs)
    if spec.method == "average" or (spec.method == "weighted" and len(set(spec.weights)) == 1):
        return stack.mean(dim=0)
    if spec.method == "max":
        return stack.max(dim=0).values
    w = torch.tensor(spec.weights, dtype=stack.dtype).view(-1, *([1] * (stack.dim() - 1)))
    return (w * stack).sum(dim=0) / w.sum()


def weight_grid(n_modalities: int, values=REFERENCE_WEIGHT_GRID, include_uniform: bool = False):
    """Distinct weight ratios from ``values ** M``; uniform ratios duplicate average fusion."""
    import itertools

    seen, out = set(), []
    for combo in itertools.product(values, repeat=n_modalities):
        key = tuple(np.round(np.asarray(combo) / min(combo), 9))
        if key in seen:
            continue
        seen.add(key)
        if not include_uniform and len(set(combo)) == 1:
            continue
        out.append(tuple(float(c) for c in combo))
    return out
