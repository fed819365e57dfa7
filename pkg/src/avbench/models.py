"""Classifiers over fused modality features.

Three families share one interface:

* ``linear``: one-vs-rest logistic regression on fused clip vectors.
* ``mlp``: one hidden ReLU layer on fused clip vectors.
* ``temporal``: a transformer encoder per modality over 10-second windows of
  1-second segment features, masked mean pooling, fusion, and a linear
  sigmoid head trained with class-weighted binary cross-entropy.

Temporal clip predictions take the maximum probability over a clip's windows.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureTable
from .fusion import FusionSpec, fuse
from .metrics import PredictionMatrix, evaluate
from .taxonomy import NUM_CLASSES, ClipRecord, DatasetManifest, propagate_segment_labels

logger = logging.getLogger(__name__)

WINDOW = 10
EPS = 1e-7
THRESHOLD = 0.5
CLASSIFIER_KINDS = ("linear", "mlp", "temporal")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass
class ClipBatch:
    """Clip-level features per modality, row-aligned with ``clip_ids``."""

    clip_ids: list[str]
    features: dict[str, np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.clip_ids)


@dataclass
class WindowSequence:
    clip_id: str
    window_index: int
    features: dict[str, np.ndarray]
    pad_mask: np.ndarray
    labels: frozenset[int]

    @property
    def n_real(self) -> int:
        return int((~self.pad_mask).sum())


def _labels_to_row(labels) -> np.ndarray:
    row = np.zeros(NUM_CLASSES, dtype=bool)
    row[sorted(labels)] = True
    return row


def _usable_clips(clips: Sequence[ClipRecord], tables: Mapping[str, FeatureTable]) -> list[ClipRecord]:
    out = []
    for clip in clips:
        missing = [m for m, t in tables.items() if clip.clip_id not in t]
        if missing:
            logger.warning("skipping clip %s: no features for %s", clip.clip_id, missing)
            continue
        out.append(clip)
    return out


def clip_dataset(manifest: DatasetManifest, tables: Mapping[str, FeatureTable], split: str | None) -> ClipBatch:
    """Gather clip-level vectors for ``split``; clips missing a modality are skipped."""
    clips = manifest.clips if split is None else manifest.split(split)
    clips = _usable_clips(clips, tables)
    feats = {m: np.stack([t.clip_vector(c.clip_id) for c in clips]) if clips else np.zeros((0, t.dim), np.float32)
             for m, t in tables.items()}
    labels = np.stack([_labels_to_row(c.labels) for c in clips]) if clips else np.zeros((0, NUM_CLASSES), bool)
    return ClipBatch([c.clip_id for c in clips], feats, labels)


def make_windows(
    segment_features: Mapping[str, Mapping[str, np.ndarray]],
    labels: Mapping[tuple[str, int], frozenset[int]],
    width: int = WINDOW,
) -> list[WindowSequence]:
    """Cut each clip's aligned segment sequences into non-overlapping windows.

    Args:
        segment_features: ``clip_id -> modality -> (T, dim)`` arrays.
        labels: ``(clip_id, t) -> label set`` for 1-based segment ``t``.
        width: window length in segments.

    Windows start at t = 1, 1 + width, ...; a short final window is
    zero-padded and its padded positions flagged in ``pad_mask``. A window's
    labels are the union over its real segments.
    """
    windows = []
    for clip_id, per_mod in segment_features.items():
        lengths = {m: len(a) for m, a in per_mod.items()}
        if len(set(lengths.values())) != 1:
            raise ValueError(f"clip {clip_id!r}: modality segment counts disagree {lengths}")
        T = next(iter(lengths.values()))
        if T < 1:
            raise ValueError(f"clip {clip_id!r}: no segments")
        for w, start in enumerate(range(0, T, width)):
            stop = min(start + width, T)
            n = stop - start
            mask = np.zeros(width, dtype=bool)
            mask[n:] = True
            feats = {}
            for m, a in per_mod.items():
                block = np.zeros((width, a.shape[1]), dtype=np.float32)
                block[:n] = a[start:stop]
                feats[m] = block
            lab = frozenset().union(*(labels[(clip_id, t)] for t in range(start + 1, stop + 1)))
            windows.append(WindowSequence(clip_id, w, feats, mask, lab))
    return windows


def window_dataset(
    manifest: DatasetManifest, tables: Mapping[str, FeatureTable], split: str | None, width: int = WINDOW
) -> list[WindowSequence]:
    """Windows for every usable clip of ``split`` from segment-level tables."""
    clips = manifest.clips if split is None else manifest.split(split)
    clips = _usable_clips(clips, tables)
    seg = {c.clip_id: {m: t.clip_segments(c.clip_id) for m, t in tables.items()} for c in clips}
    counts = {cid: len(next(iter(v.values()))) for cid, v in seg.items()}
    sub = DatasetManifest(tuple(clips))
    return make_windows(seg, propagate_segment_labels(sub, counts), width)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.weights) != NUM_CLASSES or any(not (w > 0) for w in self.weights):
            raise ValueError("loss needs 10 positive class weights")


def class_weights_from_labels(labels: np.ndarray, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """``w_c = N / (C * n_c)``, with ``w_c = 1`` for classes absent from ``labels``."""
    labels = np.asarray(labels, dtype=bool)
    n = labels.shape[0]
    counts = labels.sum(axis=0)
    return np.where(counts > 0, n / (n_classes * np.maximum(counts, 1)), 1.0)


def class_weights(manifest: DatasetManifest, split: str = "train") -> LossConfig:
    y = manifest.label_matrix(split)
    if y.shape[0] == 0:
        raise ValueError(f"split {split!r} is empty")
    return LossConfig(tuple(float(w) for w in class_weights_from_labels(y)))


def weighted_bce(p, y, w, eps: float = EPS) -> float:
    """Class-weighted binary cross-entropy, averaged over every entry.

    The class weight scales only the positive term:
    ``w_c * -y ln p - (1 - y) ln(1 - p)``, with ``p`` clamped to
    ``[eps, 1 - eps]``.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if p.shape != y.shape or p.shape[-1] != w.shape[-1]:
        raise ValueError(f"shape mismatch: p{p.shape} y{y.shape} w{w.shape}")
    p = np.clip(p, eps, 1 - eps)
    terms = -w * y * np.log(p) - (1 - y) * np.log1p(-p)
    return float(terms.mean())


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def weighted_bce_from_logits(z, y, w, eps: float = EPS) -> float:
    return weighted_bce(sigmoid(z), y, w, eps)


def weighted_bce_logit_grad(z, y, w, eps: float = EPS) -> np.ndarray:
    """Analytic d(loss)/d(logits) for :func:`weighted_bce_from_logits`.

    Inside the clamp range this is ``(w y (p - 1) + (1 - y) p) / n``;
    entries whose probability is clamped have zero gradient.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    p = sigmoid(z)
    g = (w * y * (p - 1) + (1 - y) * p) / z.size
    return np.where((p > eps) & (p < 1 - eps), g, 0.0)


def weighted_bce_torch(logits, y, w, eps: float = EPS):
    import torch

    p = torch.sigmoid(logits).clamp(eps, 1 - eps)
    return (-w * y * torch.log(p) - (1 - y) * torch.log1p(-p)).mean()


# ---------------------------------------------------------------------------
# Configuration and trained model
# ---------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    kind: str = "temporal"
    seed: int = 0
    fusion: FusionSpec = field(default_factory=FusionSpec)
    max_iterations: int = 3000
    l2_strength: float = 1.0
    hidden_units: int = 100
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 1024
    heads: int = 8
    ff_dim: int = 2048
    dropout: float = 0.1
    layers: int = 1
    eval_every: int = 10
    window: int = WINDOW

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ValueError(f"kind must be one of {CLASSIFIER_KINDS}")
        if self.seed is None:
            raise ValueError("seed is mandatory")
        positive = ["max_iterations", "l2_strength", "hidden_units", "learning_rate", "epochs",
                    "batch_size", "heads", "ff_dim", "layers", "eval_every", "window"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.to_text()
        d["modalities"] = list(self.fusion.modalities)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassifierConfig":
        d = dict(d)
        mods = d.pop("modalities", None)
        fusion = d.pop("fusion", "average")
        if isinstance(fusion, str):
            fusion = FusionSpec.parse(fusion, mods)
        return cls(fusion=fusion, **d)


@dataclass
class TrainedModel:
    config: ClassifierConfig
    params: dict[str, np.ndarray]
    dim: int
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    loss_weights: tuple[float, ...] | None = None
    _module: object = field(default=None, repr=False, compare=False)

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.config.fusion.modalities

    def torch_module(self):
        if self._module is None:
            import torch

            net = TemporalNet(self.config, self.dim)
            state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
            net.load_state_dict(state)
            net.eval()
            self._module = net
        return self._module


# ---------------------------------------------------------------------------
# Temporal network
# ---------------------------------------------------------------------------


def _temporal_net_class():
    import torch
    from torch import nn

    from .fusion import fuse_torch

    class _TemporalNet(nn.Module):
        def __init__(self, config: ClassifierConfig, dim: int):
            super().__init__()
            if dim % config.heads:
                raise ValueError(f"feature dim {dim} not divisible by {config.heads} heads")
            self.spec = config.fusion
            self.encoders = nn.ModuleDict()
            for m in self.spec.modalities:
                layer = nn.TransformerEncoderLayer(
                    d_model=dim, nhead=config.heads, dim_feedforward=config.ff_dim,
                    dropout=config.dropout, batch_first=True,
                )
                self.encoders[m] = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
            self.head = nn.Linear(self.spec.output_dim(dim), NUM_CLASSES)

        def pooled(self, xs: Mapping[str, "torch.Tensor"], pad_mask: "torch.Tensor") -> list:
            """Per-modality masked mean over real window positions."""
            keep = (~pad_mask).unsqueeze(-1).to(next(self.parameters()).dtype)
            out = []
            for m in self.spec.modalities:
                h = self.encoders[m](xs[m], src_key_padding_mask=pad_mask)
                h = torch.where(keep.bool(), h, torch.zeros_like(h))
                out.append(h.sum(dim=1) / keep.sum(dim=1))
            return out

        def forward(self, xs, pad_mask):
            return self.head(fuse_torch(self.spec, self.pooled(xs, pad_mask)))

    return _TemporalNet


def TemporalNet(config: ClassifierConfig, dim: int):
    return _temporal_net_class()(config, dim)


def _window_tensors(windows: Sequence[WindowSequence], modalities):
    import torch

    xs = {m: torch.from_numpy(np.stack([w.features[m] for w in windows]).astype(np.float32)) for m in modalities}
    mask = torch.from_numpy(np.stack([w.pad_mask for w in windows]))
    y = torch.from_numpy(np.stack([_labels_to_row(w.labels) for w in windows]).astype(np.float32))
    return xs, mask, y


def _temporal_window_probs(net, windows: Sequence[WindowSequence], modalities, chunk: int = 1024) -> np.ndarray:
    import torch

    out = []
    net.eval()
    with torch.no_grad():
        for i in range(0, len(windows), chunk):
            xs, mask, _ = _window_tensors(windows[i:i + chunk], modalities)
            out.append(torch.sigmoid(net(xs, mask)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))


def aggregate_windows(windows: Sequence[WindowSequence], window_probs: np.ndarray):
    """Clip probability per class = max over the clip's windows (clip order = first appearance)."""
    order: dict[str, int] = {}
    for w in windows:
        order.setdefault(w.clip_id, len(order))
    probs = np.zeros((len(order), NUM_CLASSES))
    labels = np.zeros((len(order), NUM_CLASSES), dtype=bool)
    for w, p in zip(windows, window_probs):
        i = order[w.clip_id]
        probs[i] = np.maximum(probs[i], p)
        labels[i] |= _labels_to_row(w.labels)
    return list(order), probs, labels


def _train_temporal(config: ClassifierConfig, train: Sequence[WindowSequence],
                    val: Sequence[WindowSequence] | None, loss: LossConfig | None) -> TrainedModel:
    import torch

    mods = config.fusion.modalities
    dims = {train[0].features[m].shape[1] for m in mods}
    if len(dims) != 1:
        raise ValueError(f"temporal fusion needs equal feature dims, got {dims}")
    dim = dims.pop()
    if loss is None:
        _, _, clip_y = aggregate_windows(train, np.zeros((len(train), NUM_CLASSES)))
        loss = LossConfig(tuple(float(x) for x in class_weights_from_labels(clip_y)))

    torch.manual_seed(config.seed)
    net = TemporalNet(config, dim)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    xs, mask, y = _window_tensors(train, mods)
    w = torch.tensor(loss.weights, dtype=torch.float32)
    n = len(train)

    log, best_f1, best_epoch, best_state = [], -1.0, None, None
    for epoch in range(1, config.epochs + 1):
        net.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            logits = net({m: xs[m][idx] for m in mods}, mask[idx])
            batch_loss = weighted_bce_torch(logits, y[idx], w)
            if not torch.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"logit range [{logits.min().item():.3g}, {logits.max().item():.3g}]"
                )
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            total += batch_loss.item() * len(idx)
        entry = {"epoch": epoch, "loss": total / n, "val_macro_f1": None}
        if val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            ids, probs, truth = aggregate_windows(val, _temporal_window_probs(net, val, mods))
            f1 = evaluate(PredictionMatrix(tuple(ids), truth, probs >= THRESHOLD)).macro_f1
            entry["val_macro_f1"] = f1
            if f1 > best_f1:
                best_f1, best_epoch, best_state = f1, epoch, copy.deepcopy(net.state_dict())
        log.append(entry)
    if best_state is None:
        best_epoch, best_state = config.epochs, net.state_dict()
    params = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in best_state.items()}
    return TrainedModel(config, params, dim, log, best_epoch, loss.weights)


def _fused(config: ClassifierConfig, batch: ClipBatch) -> np.ndarray:
    return fuse(config.fusion, [batch.features[m] for m in config.fusion.modalities])


CONSTANT_LOGIT = 20.0


def _train_sklearn(config: ClassifierConfig, train: ClipBatch, val: ClipBatch | None) -> TrainedModel:
    from sklearn.exceptions import ConvergenceWarning

    X = _fused(config, train)
    Y = train.labels.astype(int)
    params: dict[str, np.ndarray] = {}
    log: list[dict] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        warnings.filterwarnings("ignore", message="Label .* is present in all training examples")
        if config.kind == "linear":
            from sklearn.linear_model import LogisticRegression

            W = np.zeros((NUM_CLASSES, X.shape[1]))
            b = np.zeros(NUM_CLASSES)
            # one-vs-rest; constant columns become a saturated bias
            for c in range(NUM_CLASSES):
                col = Y[:, c]
                if col.min() == col.max():
                    b[c] = CONSTANT_LOGIT if col[0] else -CONSTANT_LOGIT
                    continue
                clf = LogisticRegression(C=config.l2_strength, max_iter=config.max_iterations,
                                         random_state=config.seed)
                clf.fit(X, col)
                W[c], b[c] = clf.coef_[0], clf.intercept_[0]
            params = {"weight": W.astype(np.float32), "bias": b.astype(np.float32)}
        else:
            from sklearn.neural_network import MLPClassifier

            clf = MLPClassifier(hidden_layer_sizes=(config.hidden_units,), activation="relu",
                                max_iter=config.max_iterations, random_state=config.seed)
            clf.fit(X, Y)
            params = {
                "hidden.weight": clf.coefs_[0].T.astype(np.float32),
                "hidden.bias": clf.intercepts_[0].astype(np.float32),
                "out.weight": clf.coefs_[1].T.astype(np.float32),
                "out.bias": clf.intercepts_[1].astype(np.float32),
            }
            log = [{"epoch": i + 1, "loss": float(l), "val_macro_f1": None} for i, l in enumerate(clf.loss_curve_)]
    model = TrainedModel(config, params, X.shape[1])
    train_loss = weighted_bce(np.clip(_sklearn_probs(model, X), EPS, 1 - EPS), train.labels, np.ones(NUM_CLASSES))
    if not math.isfinite(train_loss):
        raise TrainingError("non-finite training loss")
    if config.kind == "linear":
        log = [{"epoch": 1, "loss": train_loss, "val_macro_f1": None}]
    if val is not None and len(val):
        _, probs, truth = predict_clip(model, val)
        log[-1]["val_macro_f1"] = evaluate(PredictionMatrix(tuple(val.clip_ids), truth, probs >= THRESHOLD)).macro_f1
    model.log = log
    model.best_epoch = len(log)
    return model


def _sklearn_probs(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    p = {k: v.astype(np.float64) for k, v in model.params.items()}
    if model.config.kind == "linear":
        return sigmoid(X @ p["weight"].T + p["bias"])
    h = np.maximum(X @ p["hidden.weight"].T + p["hidden.bias"], 0.0)
    return sigmoid(h @ p["out.weight"].T + p["out.bias"])


def train_classifier(config: ClassifierConfig, train, val=None, loss: LossConfig | None = None) -> TrainedModel:
    """Fit ``config.kind`` on ``train`` and select a checkpoint on ``val``.

    ``train``/``val`` are :class:`ClipBatch` for linear/mlp and sequences of
    :class:`WindowSequence` for temporal. Temporal models are scored on
    ``val`` every ``eval_every`` epochs (and at the last epoch); the best
    macro-F1 checkpoint is kept, or the last epoch when ``val`` is empty.

    Raises:
        ValueError: empty training set or mismatched inputs.
        TrainingError: the loss became non-finite.
    """
    if train is None or len(train) == 0:
        raise ValueError("training set is empty")
    if config.kind == "temporal":
        if not isinstance(train[0], WindowSequence):
            raise ValueError("temporal models train on WindowSequence inputs")
        return _train_temporal(config, list(train), list(val) if val else None, loss)
    if not isinstance(train, ClipBatch):
        raise ValueError(f"{config.kind} models train on ClipBatch inputs")
    return _train_sklearn(config, train, val)


def predict_clip(model: TrainedModel, data):
    """Clip ids, per-class probabilities and ground-truth rows for ``data``.

    Use ``probs >= 0.5`` for the predicted label set. Temporal models take
    the max over each clip's windows.
    """
    if model.config.kind == "temporal":
        windows = list(data)
        if not windows:
            return [], np.zeros((0, NUM_CLASSES)), np.zeros((0, NUM_CLASSES), bool)
        missing = set(model.modalities) - set(windows[0].features)
        if missing:
            raise ValueError(f"windows lack modalities {sorted(missing)}")
        probs = _temporal_window_probs(model.torch_module(), windows, model.modalities)
        return aggregate_windows(windows, probs)
    if not isinstance(data, ClipBatch):
        raise ValueError("linear/mlp prediction needs a ClipBatch")
    missing = set(model.modalities) - set(data.features)
    if missing:
        raise ValueError(f"features lack modalities {sorted(missing)}")
    return list(data.clip_ids), _sklearn_probs(model, _fused(model.config, data)), data.labels.copy()


def predict_labels(probs: np.ndarray, threshold: float = THRESHOLD) -> list[frozenset[int]]:
    return [frozenset(np.flatnonzero(row >= threshold).tolist()) for row in np.atleast_2d(probs)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1


def save_checkpoint(model: TrainedModel, path) -> Path:
    """Single file: magic, version, JSON header line, f32le tensor blob, CRC32."""
    index, blobs, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": model.config.to_dict(),
        "dim": model.dim,
        "best_epoch": model.best_epoch,
        "loss_weights": list(model.loss_weights) if model.loss_weights else None,
        "log": model.log,
        "tensors": index,
    }
    body = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(blobs)
    path = Path(path)
    path.write_bytes(CKPT_MAGIC + bytes([CKPT_VERSION]) + body + struct.pack("<I", zlib.crc32(body)))
    return path


def load_checkpoint(path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC or len(data) < 9:
        raise ValueError("not a model checkpoint")
    if data[4] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data[4]}")
    body, (crc,) = data[5:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError("checkpoint checksum mismatch")
    nl = body.index(b"\n")
    header = json.loads(body[:nl])
    blob = body[nl + 1:]
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    lw = header.get("loss_weights")
    return TrainedModel(ClassifierConfig.from_dict(header["config"]), params, header["dim"],
                        header["log"], header["best_epoch"], tuple(lw) if lw else None)
