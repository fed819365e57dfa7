"""Prompting and data generation for multimodal language models.

Covers the zero-shot protocol (composite image + prompt, optionally extended
with an audio caption and a speech transcription; then a text-only reformat
step and canonical-name matching), instruction-tuning pairs, and the
post-hoc -> ad-hoc explanation data: explanations generated with the
ground-truth labels in the prompt become training targets for a prompt that
omits them.
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .clients import REFORMAT_MARKER, TransportError, image_digest
from .media import CompositeImage, compose_grid, synthetic_frames
from .metrics import EvalReport, PredictionMatrix, evaluate
from .taxonomy import BACKGROUND, NUM_CLASSES, ClipRecord, DatasetManifest, category_names, taxonomy

logger = logging.getLogger(__name__)

AUDIO_CAPTION_LABEL = "Audio caption:"
SPEECH_LABEL = "Speech transcription:"
BACKGROUND_SYNONYMS = ("none of the above", "no autism-related behaviors")
GT_BLOCK = "The behaviors present are: {labels}. Explain the evidence for each."

DEFAULT_TASK = (
    "The image is a 3x3 grid of nine frames sampled evenly from one video clip, "
    "read left to right and top to bottom. Decide which of the behavior categories "
    "below are present in the clip. More than one category may apply."
)
DEFAULT_ANSWER_FORMAT = (
    "Answer with the names of all categories that apply, written exactly as listed above."
)
DEFAULT_REFORMAT = (
    "Rewrite the answer below as a comma-separated list of behavior category names, "
    "using only these names: {names}. If no category can be determined, reply Unknown."
)
DEFAULT_POSTHOC = (
    "The image is a 3x3 grid of nine frames sampled evenly from one video clip. "
    "Experts have annotated the behaviors in this clip."
)
DEFAULT_ADHOC = (
    "The image is a 3x3 grid of nine frames sampled evenly from one video clip. "
    "Describe the behaviors you observe that are relevant to autism screening, and explain "
    "the visual, audio and speech evidence for each."
)


@dataclass(frozen=True)
class PromptTemplate:
    task_description: str = DEFAULT_TASK
    answer_format_instruction: str = DEFAULT_ANSWER_FORMAT
    reformat_instruction: str = DEFAULT_REFORMAT
    posthoc_instruction: str = DEFAULT_POSTHOC
    adhoc_instruction: str = DEFAULT_ADHOC

    @property
    def category_block(self) -> str:
        lines = ["Categories:"]
        for c in taxonomy():
            lines.append(f"{c.id + 1}. {c.canonical_name}: {c.description}")
        return "\n".join(lines)

    def base_prompt(self) -> str:
        return "\n\n".join([self.task_description, self.category_block, self.answer_format_instruction])

    def reformat_prompt(self, free_text: str) -> str:
        names = "; ".join(category_names())
        return self.reformat_instruction.format(names=names) + "\n\n" + REFORMAT_MARKER + "\n" + free_text

    def validate(self) -> None:
        block = self.category_block
        missing = [n for n in category_names() if n not in block]
        if missing:
            raise ValueError(f"category block lacks {missing}")
        leaked = [n for n in category_names() if n in self.adhoc_instruction]
        if leaked:
            raise ValueError(f"ad-hoc instruction must not name categories, found {leaked}")

    @classmethod
    def load(cls, path) -> "PromptTemplate":
        """Override any subset of the default fields from a JSON object file."""
        fields = json.loads(Path(path).read_text(encoding="utf-8"))
        t = cls(**fields)
        t.validate()
        return t


@dataclass(frozen=True)
class PromptBundle:
    base: str
    audio_caption: str = ""
    speech_transcript: str = ""
    augmented: str = ""
    ground_truth_block: str = ""


def _augment(base: str, ac: str, st: str) -> str:
    parts = [base]
    if ac and ac.strip():
        parts.append(f"{AUDIO_CAPTION_LABEL} {' '.join(ac.split())}")
    if st and st.strip():
        parts.append(f"{SPEECH_LABEL} {' '.join(st.split())}")
    return "\n".join(parts)


def build_prompt(template: PromptTemplate, clip: ClipRecord | None = None, manifest: DatasetManifest | None = None,
                 ac: str | None = None, st: str | None = None) -> PromptBundle:
    """Assemble P and P' = P plus one line each for a non-empty audio caption and transcript."""
    base = template.base_prompt()
    ac, st = ac or "", st or ""
    return PromptBundle(base, ac, st, _augment(base, ac, st))


def extract_labels(text: str) -> frozenset[int]:
    """Canonical category names found in ``text`` (case-insensitive, per line).

    Each line is whitespace-normalized and searched for every canonical name
    as a substring; ``none of the above`` and ``no autism-related behaviors``
    count as Background. Nothing else is recognized, so a refusal yields the
    empty set. Matching per line keeps ``labels(a + "\\n" + b)`` equal to
    ``labels(a) | labels(b)``.
    """
    names = [n.casefold() for n in category_names()]
    found = set()
    for line in text.splitlines():
        line = " ".join(line.split()).casefold()
        if not line:
            continue
        for i, n in enumerate(names):
            if n in line:
                found.add(i)
        if any(s in line for s in BACKGROUND_SYNONYMS):
            found.add(BACKGROUND)
    return frozenset(found)


def format_labels(labels: Iterable[int]) -> str:
    names = category_names()
    return ", ".join(names[i] for i in sorted(labels))


@dataclass
class InferenceResult:
    clip_id: str
    free_text: str | None
    label_line: str | None
    labels: frozenset[int]
    error: str | None = None


def two_step_infer(client, image, bundle: PromptBundle, template: PromptTemplate | None = None,
                   reformat_client=None, clip_id: str = "") -> InferenceResult:
    """Ask with (image, P'), then reformat the free answer text-only.

    The second step goes to ``reformat_client`` (default: ``client``) without
    an image. A refusal is an ordinary answer; it simply extracts to no
    labels. Transport failures after retries are returned as a result with
    ``error`` set.
    """
    template = template or PromptTemplate()
    reformat_client = reformat_client or client
    try:
        free = client.send(image, bundle.augmented)
        line = reformat_client.send(None, template.reformat_prompt(free))
    except TransportError as exc:
        return InferenceResult(clip_id, None, None, frozenset(), f"transport: {exc}")
    return InferenceResult(clip_id, free, line, extract_labels(line))


# ---------------------------------------------------------------------------
# Side inputs
# ---------------------------------------------------------------------------


def load_sidecar(path) -> dict[str, tuple[str, str]]:
    """``clip_id -> (audio_caption, speech_transcript)`` from a line-delimited file."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if set(rec) != {"clip_id", "audio_caption", "speech_transcript"}:
            raise ValueError(f"sidecar line {lineno}: unexpected keys {sorted(rec)}")
        out[rec["clip_id"]] = (rec["audio_caption"] or "", rec["speech_transcript"] or "")
    return out


def save_sidecar(sidecar: Mapping[str, tuple[str, str]], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for cid, (ac, st) in sidecar.items():
            fh.write(json.dumps({"clip_id": cid, "audio_caption": ac, "speech_transcript": st},
                                ensure_ascii=False) + "\n")
    return path


_AMBIENT = ("a child is talking", "people are speaking in a room", "a television plays music",
            "footsteps and a door closing", "a child is crying", "birds chirp outside", "water is running")
_SPEECH = ("how old are you", "can you look at me", "I have hands", "do you want the ball",
           "say bye bye", "mommy is here", "what color is this")


def synthetic_sidecar(manifest: DatasetManifest, seed: int = 0) -> dict[str, tuple[str, str]]:
    """Label-free caption/transcript strings; roughly one clip in five has no speech."""
    rng = np.random.default_rng(seed)
    out = {}
    for clip in manifest.clips:
        ac = _AMBIENT[int(rng.integers(len(_AMBIENT)))]
        st = "" if rng.random() < 0.2 else _SPEECH[int(rng.integers(len(_SPEECH)))]
        out[clip.clip_id] = (ac, st)
    return out


def synthetic_composite(clip: ClipRecord, size: int = 16) -> CompositeImage:
    """A composite preview built from seeded synthetic frames of ``clip``."""
    seed = zlib.crc32(clip.clip_id.encode())
    n = max(1, int(clip.duration * 2))
    return compose_grid(synthetic_frames(n, size, size, fps=2.0, seed=seed))


# ---------------------------------------------------------------------------
# Instruction-tuning pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstructionPair:
    clip_id: str
    image: str
    prompt: str
    target: str

    def to_record(self) -> dict:
        return conversation_record(self.clip_id, self.image, self.prompt, self.target)


def conversation_record(rid: str, image: str, human: str, target: str) -> dict:
    return {"id": rid, "image": image,
            "conversations": [{"from": "human", "value": human}, {"from": "model", "value": target}]}


def write_conversations(pairs: Iterable, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")
    return path


def _image_ref(images: Mapping[str, object] | Callable | None, clip: ClipRecord) -> str | None:
    if images is None:
        return f"{clip.clip_id}.grid.png"
    if callable(images):
        return images(clip)
    ref = images.get(clip.clip_id)
    return None if ref is None else str(ref)


def build_instruction_pairs(
    manifest: DatasetManifest,
    split: str,
    template: PromptTemplate | None = None,
    sidecar: Mapping[str, tuple[str, str]] | None = None,
    images: Mapping[str, object] | Callable | None = None,
    use_audio_caption: bool = True,
    use_speech: bool = True,
    skipped: list | None = None,
) -> list[InstructionPair]:
    """One ``(image, P') -> labels`` pair per clip of ``split``.

    Targets list canonical names in taxonomy order, comma-separated. Clips
    with no composite image (``images`` maps them to ``None`` or lacks them)
    are appended to ``skipped`` instead.
    """
    template = template or PromptTemplate()
    sidecar = sidecar or {}
    clips = manifest.split(split)
    if not clips:
        raise ValueError(f"split {split!r} is empty")
    pairs = []
    for clip in clips:
        image = _image_ref(images, clip)
        if image is None:
            logger.warning("no composite image for %s; skipping", clip.clip_id)
            if skipped is not None:
                skipped.append(clip.clip_id)
            continue
        ac, st = sidecar.get(clip.clip_id, ("", ""))
        bundle = build_prompt(template, clip, manifest, ac if use_audio_caption else "", st if use_speech else "")
        pairs.append(InstructionPair(clip.clip_id, image, bundle.augmented, format_labels(clip.labels)))
    return pairs


# ---------------------------------------------------------------------------
# Post-hoc -> ad-hoc
# ---------------------------------------------------------------------------


@dataclass
class PostHocRecord:
    clip_id: str
    image: str
    audio_caption: str
    speech_transcript: str
    instruction: str
    ground_truth: list[str]
    prompt: str
    reasoning: str | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AdHocPair:
    clip_id: str
    image: str
    audio_caption: str
    speech_transcript: str
    instruction: str
    prompt: str
    target: str

    def to_record(self) -> dict:
        return conversation_record(self.clip_id, self.image, self.prompt, self.target)


def posthoc_prompt(template: PromptTemplate, clip: ClipRecord, ac: str, st: str) -> tuple[str, str]:
    gt = GT_BLOCK.format(labels=format_labels(clip.labels))
    return _augment(template.posthoc_instruction, ac, st) + "\n" + gt, gt


def _ordered_map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def generate_posthoc(
    client,
    manifest: DatasetManifest,
    split: str,
    template: PromptTemplate | None = None,
    sidecar: Mapping[str, tuple[str, str]] | None = None,
    images: Mapping[str, CompositeImage] | None = None,
    image_refs: Mapping[str, str] | None = None,
    workers: int = 1,
    skipped: list | None = None,
) -> list[PostHocRecord]:
    """Ask the model to explain the known labels of every clip in ``split``.

    The prompt ends with an explicit ground-truth sentence naming the labels.
    Client failures are skipped (and listed in ``skipped``); output keeps
    manifest order even with concurrent requests.
    """
    template = template or PromptTemplate()
    sidecar = sidecar or {}
    clips = manifest.split(split)

    def one(clip: ClipRecord):
        ac, st = sidecar.get(clip.clip_id, ("", ""))
        prompt, _ = posthoc_prompt(template, clip, ac, st)
        image = images.get(clip.clip_id) if images is not None else synthetic_composite(clip)
        try:
            reasoning = client.send(image, prompt)
        except TransportError as exc:
            return clip, None, str(exc)
        ref = (image_refs or {}).get(clip.clip_id, f"{clip.clip_id}.grid.png")
        return clip, PostHocRecord(clip.clip_id, ref, ac, st, template.posthoc_instruction,
                                   clip.label_names, prompt, reasoning), None

    records = []
    for clip, rec, err in _ordered_map(one, clips, workers):
        if rec is None:
            logger.warning("post-hoc generation failed for %s: %s", clip.clip_id, err)
            if skipped is not None:
                skipped.append(clip.clip_id)
            continue
        records.append(rec)
    return records


def build_adhoc_pairs(records: Sequence[PostHocRecord], template: PromptTemplate | None = None,
                      skipped: list | None = None) -> list[AdHocPair]:
    """Turn post-hoc explanations into targets for a label-free prompt.

    The pair's input is the ad-hoc instruction plus the same caption and
    transcript lines; the target is the post-hoc reasoning, byte for byte.
    Records without reasoning, and inputs that would still spell out one of
    the clip's ground-truth names, are skipped with a warning.
    """
    if not records:
        raise ValueError("no post-hoc records")
    template = template or PromptTemplate()
    pairs = []
    for rec in records:
        if not rec.reasoning:
            logger.warning("record %s has no reasoning text; skipping", rec.clip_id)
            if skipped is not None:
                skipped.append(rec.clip_id)
            continue
        prompt = _augment(template.adhoc_instruction, rec.audio_caption, rec.speech_transcript)
        leaked = [n for n in rec.ground_truth if n in prompt]
        if leaked:
            logger.warning("ad-hoc input for %s would contain %s; skipping", rec.clip_id, leaked)
            if skipped is not None:
                skipped.append(rec.clip_id)
            continue
        pairs.append(AdHocPair(rec.clip_id, rec.image, rec.audio_caption, rec.speech_transcript,
                               template.adhoc_instruction, prompt, rec.reasoning))
    return pairs


def write_posthoc(records: Iterable[PostHocRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    return path


def read_posthoc(path) -> list[PostHocRecord]:
    return [PostHocRecord(**json.loads(line))
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


FINETUNE_RECIPE = {
    "method": "lora",
    "lora_r": 128,
    "lora_alpha": 256,
    "projector_learning_rate": 2e-5,
    "epochs": 100,
    "validation_every_epochs": 10,
    "select_epoch_by": "validation macro-F1",
    "deepspeed": "zero3",
    "vision_encoder": "CLIP ViT-L/14@336px",
    "base_model": "llava-v1.5-13b",
    "objective": "token-level cross-entropy of the target text given image and prompt",
}


def write_training_recipe(path, data_file: str, **overrides) -> Path:
    """Emit the fine-tuning settings that accompany a conversation file.

    The optimization itself runs in an external trainer.
    """
    recipe = dict(FINETUNE_RECIPE, data_file=data_file, **overrides)
    path = Path(path)
    path.write_text(json.dumps(recipe, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Zero-shot runs
# ---------------------------------------------------------------------------


@dataclass
class ZeroShotRun:
    results: list[InferenceResult]
    report: EvalReport
    ledger_lines: list[str] = field(default_factory=list)


def run_zero_shot(
    client,
    manifest: DatasetManifest,
    split: str,
    template: PromptTemplate | None = None,
    sidecar: Mapping[str, tuple[str, str]] | None = None,
    images: Mapping[str, CompositeImage] | None = None,
    use_audio_caption: bool = False,
    use_speech: bool = False,
    reformat_client=None,
    workers: int = 1,
    ledger_path=None,
    provenance: Mapping | None = None,
) -> ZeroShotRun:
    """Two-step inference over a split, scored with macro F1.

    Refusals and transport failures count as all-negative predictions. Each
    clip gets one ledger line (raw responses, predicted and true labels) and
    a final line carries the metrics; lines are canonical JSON so repeated
    runs with a deterministic client are byte-identical.
    """
    template = template or PromptTemplate()
    sidecar = sidecar or {}
    clips = manifest.split(split)
    if not clips:
        raise ValueError(f"split {split!r} is empty")

    def one(clip: ClipRecord) -> InferenceResult:
        ac, st = sidecar.get(clip.clip_id, ("", ""))
        bundle = build_prompt(template, clip, manifest, ac if use_audio_caption else "", st if use_speech else "")
        image = images.get(clip.clip_id) if images is not None else synthetic_composite(clip)
        return two_step_infer(client, image, bundle, template, reformat_client, clip.clip_id)

    results = _ordered_map(one, clips, workers)
    truth = np.zeros((len(clips), NUM_CLASSES), dtype=bool)
    pred = np.zeros_like(truth)
    lines = []
    for i, (clip, r) in enumerate(zip(clips, results)):
        truth[i, sorted(clip.labels)] = True
        pred[i, sorted(r.labels)] = True
        lines.append(json.dumps({
            "clip_id": clip.clip_id, "step1": r.free_text, "step2": r.label_line,
            "pred": format_labels(r.labels), "truth": format_labels(clip.labels), "error": r.error,
        }, sort_keys=True, ensure_ascii=False))
    prov = {"model": getattr(client, "name", "client"), "split": split,
            "audio_caption": use_audio_caption, "speech": use_speech, **(provenance or {})}
    report = evaluate(PredictionMatrix(tuple(c.clip_id for c in clips), truth, pred), prov)
    lines.append(json.dumps({"summary": report.to_dict()}, sort_keys=True, ensure_ascii=False))
    if ledger_path is not None:
        Path(ledger_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ZeroShotRun(results, report, lines)


def scripted_answers(images: Mapping[str, CompositeImage], answers: Mapping[str, str]) -> dict[str, str]:
    """Key free-text answers by image digest for :class:`~avbench.clients.ScriptedClient`."""
    return {image_digest(images[cid]): text for cid, text in answers.items()}
