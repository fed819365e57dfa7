"""Command-line entry point: ``avbench <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Every command resolves its configuration as defaults < ``--config`` JSON
file < explicit flags, writes its artifacts under ``--out`` and appends one
entry to ``<out>/ledger.jsonl`` holding the resolved config and the sha256
of every input and artifact. With ``--resume`` a command whose inputs,
config and artifacts are unchanged since its last successful entry does
nothing.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from itertools import combinations
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .clients import CachedClient, EchoClient, HttpClient, ScriptedClient, TransportError, image_digest
from .features import cache_name, extract_features, mock_encoder, read_cache, write_cache
from .fusion import FUSION_METHODS, MODALITY_ORDER, FusionSpec, order_modalities, weight_grid
from .harness import (
    PromptTemplate,
    build_adhoc_pairs,
    build_instruction_pairs,
    generate_posthoc,
    load_sidecar,
    read_posthoc,
    run_zero_shot,
    synthetic_composite,
    write_conversations,
    write_posthoc,
    write_training_recipe,
)
from .media import read_composite
from .metrics import TABLE3_RATIOS, EvalReport, PredictionMatrix, dummy_baseline, emit_report, evaluate
from .models import (
    ClassifierConfig,
    class_weights,
    clip_dataset,
    load_checkpoint,
    predict_clip,
    save_checkpoint,
    train_classifier,
    window_dataset,
)
from .taxonomy import PAPER_SPEC, ManifestSpec, load_manifest, save_manifest, synthesize_manifest, validate_paper_statistics

logger = logging.getLogger("avbench")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

SMALL_SPEC = ManifestSpec((30,) * 10, 200, (0.6, 0.2, 0.2), max_duration=30.0)
PRESETS = {"paper": PAPER_SPEC, "small": SMALL_SPEC}

DEFAULTS = {
    "manifest": None,
    "features_dir": None,
    "modalities": list(MODALITY_ORDER),
    "fusion": "average",
    "weights": None,
    "model": "linear",
    "seed": 0,
    "out": "runs",
    "split": "test",
    "client": "mock",
    "endpoint": None,
    "model_name": None,
    "token_env": "AVBENCH_API_TOKEN",
    "reformat_endpoint": None,
    "reformat_model": None,
    "workers": 1,
    "dim": 1024,
    "level": "both",
    "separable": False,
    "noise": 0.5,
    "label_subsets": None,
    "epochs": 100,
    "preset": "paper",
    "template": None,
    "sidecar": None,
    "composites": None,
    "answers": None,
    "use_audio_caption": False,
    "use_speech": False,
    "drop_audio_caption": False,
    "drop_speech": False,
    "checkpoint": None,
    "posthoc": None,
    "results": [],
    "sweep": None,
    "format": "csv",
    "full_grid": False,
    "structure_only": False,
    "dummy": False,
    "resume": False,
}
PATH_KEYS = ("manifest", "template", "sidecar", "answers", "checkpoint", "posthoc", "sweep")


class ConfigError(Exception):
    """Bad flags or configuration; reported with exit code 2."""


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _flag_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON object with any of the flag names as keys")
    p.add_argument("--manifest")
    p.add_argument("--features-dir")
    p.add_argument("--modalities", type=_flag_list, help="comma-separated subset of a,v,s")
    p.add_argument("--fusion", choices=FUSION_METHODS)
    p.add_argument("--weights", help="e.g. a=1,v=1,s=2 (implies --fusion weighted)")
    p.add_argument("--model", choices=("linear", "mlp", "temporal"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--client", choices=("mock", "http"))
    p.add_argument("--endpoint")
    p.add_argument("--model-name")
    p.add_argument("--token-env")
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    root = UsageParser(prog="avbench", description="Autism-behavior benchmark pipeline")
    root.add_argument("--version", action="version", version=f"avbench {__version__}")
    sub = root.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic manifest")
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = sub.add_parser("validate", parents=[common], help="check a manifest and report its statistics")
    p.add_argument("--structure-only", action="store_true", default=None,
                   help="only check record invariants, not the reference statistics")

    p = sub.add_parser("extract", parents=[common], help="compute feature caches with mock encoders")
    p.add_argument("--level", choices=("clip", "segment", "both"))
    p.add_argument("--dim", type=int)
    p.add_argument("--separable", action="store_true", default=None)
    p.add_argument("--noise", type=float)
    p.add_argument("--label-subsets", help="e.g. a=0,1,2;v=3,4,5,6;s=7,8,9")

    p = sub.add_parser("train", parents=[common], help="train a classifier and score it")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or the all-positive baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--dummy", action="store_true", default=None)

    p = sub.add_parser("zero-shot", parents=[common], help="two-step prompting run")
    _harness_flags(p)
    p.add_argument("--answers", help="mock client: JSON lines {clip_id, response}")
    p.add_argument("--use-audio-caption", action="store_true", default=None)
    p.add_argument("--use-speech", action="store_true", default=None)
    p.add_argument("--reformat-endpoint")
    p.add_argument("--reformat-model")

    p = sub.add_parser("instruct", help="instruction-tuning data")
    isub = p.add_subparsers(dest="instruct_command", required=True, parser_class=UsageParser)
    b = isub.add_parser("build", parents=[common], help="build a data file")
    b.add_argument("kind", choices=("pairs", "post-hoc", "ad-hoc"))
    _harness_flags(b)
    b.add_argument("--posthoc", help="post-hoc records file (ad-hoc)")
    b.add_argument("--no-audio-caption", dest="drop_audio_caption", action="store_true", default=None)
    b.add_argument("--no-speech", dest="drop_speech", action="store_true", default=None)

    p = sub.add_parser("report", parents=[common], help="render a results table")
    p.add_argument("layout", choices=("table2", "table3", "table4"))
    p.add_argument("--result", dest="results", action="append", metavar="NAME=PATH",
                   help="evaluation JSON (table2/table4), repeatable")
    p.add_argument("--sweep", help="sweep results file (table3)")
    p.add_argument("--format", choices=("csv", "markdown"))

    p = sub.add_parser("sweep", parents=[common], help="modality x fusion grid")
    p.add_argument("--epochs", type=int)
    p.add_argument("--full-grid", action="store_true", default=None,
                   help="every non-uniform weight ratio from {1,2}^M instead of the three reference ratios")
    p.add_argument("--format", choices=("csv", "markdown"))
    return root


def _harness_flags(p):
    p.add_argument("--template", help="JSON prompt template overrides")
    p.add_argument("--sidecar", help="JSON lines {clip_id, audio_caption, speech_transcript}")
    p.add_argument("--composites", help="directory of <clip_id>.grid.png images")


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    try:
        cfg["modalities"] = list(order_modalities(cfg["modalities"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["modalities"]:
        raise ConfigError("empty modality set")
    if cfg["weights"]:
        cfg["fusion"] = "weighted"
    if cfg["seed"] is None:
        raise ConfigError("a seed is required")
    for key in PATH_KEYS:
        if cfg.get(key) and not Path(cfg[key]).exists():
            raise ConfigError(f"--{key.replace('_', '-')} {cfg[key]} does not exist")
    return cfg


def fusion_from_config(cfg: dict) -> FusionSpec:
    try:
        if cfg["fusion"] == "weighted":
            if not cfg["weights"]:
                raise ConfigError("weighted fusion needs --weights")
            return FusionSpec.parse("weighted:" + cfg["weights"], cfg["modalities"])
        return FusionSpec.create(cfg["fusion"], cfg["modalities"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad fusion settings: {exc}") from None


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# Run ledger
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict[str, str]:
    return {str(p): file_digest(p) for p in sorted({str(p) for p in paths}) if Path(p).is_file()}


class Ledger:
    def __init__(self, out: Path):
        self.path = Path(out) / "ledger.jsonl"

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line.strip()]

    def up_to_date(self, key: str) -> bool:
        for entry in reversed(self.entries()):
            if entry.get("key") == key and entry.get("status") == "ok":
                arts = entry.get("artifacts", {})
                return all(Path(p).is_file() and file_digest(p) == d for p, d in arts.items())
        return False

    def append(self, entry: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def run_key(command: str, cfg: dict, inputs: dict[str, str]) -> str:
    stable = {k: v for k, v in cfg.items() if k not in ("resume", "workers")}
    blob = json.dumps({"command": command, "config": stable, "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Commands. Each returns (input paths, artifact paths, extra ledger fields).
# ---------------------------------------------------------------------------


def _manifest(cfg):
    _require(cfg, "manifest")
    return load_manifest(cfg["manifest"])


def _feature_source(modality: str, level: str) -> str:
    """Visual means the composite image at clip level and video at segment level."""
    if modality == "visual":
        return "image" if level == "clip" else "video"
    return modality


def _parse_subsets(text: str | None) -> dict[str, frozenset[int]]:
    if not text:
        return {}
    out = {}
    for part in text.split(";"):
        mod, _, ids = part.partition("=")
        try:
            out[order_modalities([mod])[0]] = frozenset(int(i) for i in ids.split(","))
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"bad --label-subsets entry {part!r}: {exc}") from None
    return out


def cmd_synth(cfg, out: Path):
    manifest = synthesize_manifest(cfg["seed"], PRESETS[cfg["preset"]])
    path = save_manifest(manifest, out / "manifest.jsonl")
    print(f"wrote {len(manifest)} clips to {path}")
    return [], [path], {}


def cmd_validate(cfg, out: Path):
    manifest = _manifest(cfg)
    report = validate_paper_statistics(manifest)
    result = report.to_dict()
    path = out / "statistics.json"
    path.write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(result, indent=2))
    status = EXIT_OK if cfg["structure_only"] or report.passed else EXIT_RUNTIME
    if status:
        failed = sorted(k for k, v in report.flags.items() if not v)
        print(f"statistics differ from the reference: {failed}", file=sys.stderr)
    return [cfg["manifest"]], [path], {"passed": report.passed, "exit": status}


def cmd_extract(cfg, out: Path):
    manifest = _manifest(cfg)
    feat_dir = Path(cfg["features_dir"] or out / "features")
    feat_dir.mkdir(parents=True, exist_ok=True)
    subsets = _parse_subsets(cfg["label_subsets"])
    levels = ("clip", "segment") if cfg["level"] == "both" else (cfg["level"],)
    written, failures = [], {}
    for mod in cfg["modalities"]:
        for level in levels:
            source = _feature_source(mod, level)
            enc = mock_encoder(cfg["seed"], source, level, cfg["dim"], separable=cfg["separable"],
                               noise=cfg["noise"], label_subset=subsets.get(mod))
            table = extract_features(manifest, enc, workers=cfg["workers"])
            written.append(write_cache(table, feat_dir / cache_name(source, level)))
            failures.update({f"{source}.{level}:{k}": v for k, v in table.failures.items()})
            print(f"{source}/{level}: {len(table)} vectors, {len(table.failures)} failures")
    return [cfg["manifest"]], written, {"failures": failures}


def _load_tables(cfg, modalities, level):
    _require(cfg, "features_dir")
    tables, paths = {}, []
    for mod in modalities:
        path = Path(cfg["features_dir"]) / cache_name(_feature_source(mod, level), level)
        if not path.is_file():
            raise ConfigError(f"missing feature cache {path}")
        tables[mod] = read_cache(path)
        paths.append(path)
    return tables, paths


def _datasets(cfg, manifest, fusion: FusionSpec, kind: str):
    level = "segment" if kind == "temporal" else "clip"
    tables, paths = _load_tables(cfg, fusion.modalities, level)
    build = window_dataset if kind == "temporal" else clip_dataset
    return {s: build(manifest, tables, s) for s in ("train", "val", "test")}, paths


def _report_for(model, data, provenance) -> EvalReport:
    ids, probs, truth = predict_clip(model, data)
    return evaluate(PredictionMatrix(tuple(ids), truth, probs >= 0.5), provenance)


def _train_one(cfg, manifest, fusion: FusionSpec):
    config = ClassifierConfig(kind=cfg["model"], seed=cfg["seed"], fusion=fusion, epochs=cfg["epochs"])
    data, paths = _datasets(cfg, manifest, fusion, config.kind)
    loss = class_weights(manifest, "train") if config.kind == "temporal" else None
    model = train_classifier(config, data["train"], data["val"], loss)
    prov = {"model": config.kind, "fusion": fusion.to_text(), "modalities": list(fusion.modalities),
            "seed": config.seed, "split": cfg["split"]}
    return model, _report_for(model, data[cfg["split"]], prov), paths


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def cmd_train(cfg, out: Path):
    manifest = _manifest(cfg)
    fusion = fusion_from_config(cfg)
    model, report, paths = _train_one(cfg, manifest, fusion)
    ckpt = save_checkpoint(model, out / "model.avck")
    rep = _write_json(out / f"eval_{cfg['split']}.json", report.to_dict())
    print(f"{cfg['model']} {fusion.to_text()} {'+'.join(fusion.modalities)}: "
          f"macro-F1 {100 * report.macro_f1:.2f}% on {cfg['split']} (best epoch {model.best_epoch})")
    return [cfg["manifest"], *paths], [ckpt, rep], {"macro_f1": report.macro_f1}


def cmd_eval(cfg, out: Path):
    manifest = _manifest(cfg)
    if cfg["dummy"]:
        clips = manifest.split(cfg["split"])
        report = dummy_baseline(manifest.label_matrix(cfg["split"]), [c.clip_id for c in clips])
        inputs = [cfg["manifest"]]
        name = f"dummy_{cfg['split']}.json"
    else:
        _require(cfg, "checkpoint")
        model = load_checkpoint(cfg["checkpoint"])
        level = "segment" if model.config.kind == "temporal" else "clip"
        tables, paths = _load_tables(cfg, model.modalities, level)
        data = (window_dataset if level == "segment" else clip_dataset)(manifest, tables, cfg["split"])
        report = _report_for(model, data, {"model": model.config.kind, "checkpoint": str(cfg["checkpoint"]),
                                           "fusion": model.config.fusion.to_text(), "split": cfg["split"]})
        inputs = [cfg["manifest"], cfg["checkpoint"], *paths]
        name = f"eval_{cfg['split']}.json"
    rep = _write_json(out / name, report.to_dict())
    print(f"macro-F1 {100 * report.macro_f1:.2f}% on {cfg['split']} ({report.n_clips} clips)")
    return inputs, [rep], {"macro_f1": report.macro_f1}


def _composites(cfg, clips):
    if not cfg["composites"]:
        return {c.clip_id: synthetic_composite(c) for c in clips}
    root = Path(cfg["composites"])
    out = {}
    for c in clips:
        p = root / f"{c.clip_id}.grid.png"
        if p.is_file():
            out[c.clip_id] = read_composite(p)
    return out


def _client(cfg, out: Path, mock_factory: Callable, endpoint=None, model_name=None, cache="client_cache.jsonl"):
    if cfg["client"] == "http":
        endpoint = endpoint or cfg["endpoint"]
        model_name = model_name or cfg["model_name"]
        if not endpoint or not model_name:
            raise ConfigError("--client http needs --endpoint and --model-name")
        inner = HttpClient(endpoint, model_name, token_env=cfg["token_env"])
    else:
        inner = mock_factory()
    return CachedClient(inner, out / cache)


def _template(cfg) -> PromptTemplate:
    try:
        return PromptTemplate.load(cfg["template"]) if cfg["template"] else PromptTemplate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad template: {exc}") from None


def cmd_zero_shot(cfg, out: Path):
    manifest = _manifest(cfg)
    clips = manifest.split(cfg["split"])
    images = _composites(cfg, clips)
    answers = {}
    if cfg["answers"]:
        for line in Path(cfg["answers"]).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                answers[rec["clip_id"]] = rec["response"]

    def mock():
        by_image = {image_digest(images[cid]): text for cid, text in answers.items() if cid in images}
        return ScriptedClient(by_image)

    client = _client(cfg, out, mock)
    reformatter = None
    if cfg["client"] == "http" and (cfg["reformat_endpoint"] or cfg["reformat_model"]):
        reformatter = _client(cfg, out, mock, cfg["reformat_endpoint"], cfg["reformat_model"], "reformat_cache.jsonl")
    sidecar = load_sidecar(cfg["sidecar"]) if cfg["sidecar"] else {}
    ledger_path = out / f"zero_shot_{cfg['split']}.jsonl"
    run = run_zero_shot(client, manifest, cfg["split"], _template(cfg), sidecar, images,
                        use_audio_caption=cfg["use_audio_caption"], use_speech=cfg["use_speech"],
                        reformat_client=reformatter, workers=cfg["workers"], ledger_path=ledger_path)
    rep = _write_json(out / f"eval_zero_shot_{cfg['split']}.json", run.report.to_dict())
    errors = sum(r.error is not None for r in run.results)
    print(f"zero-shot macro-F1 {100 * run.report.macro_f1:.2f}% ({errors} transport failures)")
    inputs = [p for p in (cfg["manifest"], cfg["answers"], cfg["sidecar"], cfg["template"]) if p]
    return inputs, [ledger_path, rep], {"macro_f1": run.report.macro_f1, "failures": errors}


def cmd_instruct(cfg, out: Path, kind: str):
    template = _template(cfg)
    ac = not cfg["drop_audio_caption"]
    st = not cfg["drop_speech"]
    skipped: list[str] = []
    if kind == "ad-hoc":
        _require(cfg, "posthoc")
        records = read_posthoc(cfg["posthoc"])
        if not ac or not st:
            for r in records:
                r.audio_caption = r.audio_caption if ac else ""
                r.speech_transcript = r.speech_transcript if st else ""
        pairs = build_adhoc_pairs(records, template, skipped)
        data = write_conversations(pairs, out / "adhoc.jsonl")
        recipe = write_training_recipe(out / "train_recipe.json", data.name, seed=cfg["seed"])
        print(f"{len(pairs)} ad-hoc pairs, {len(skipped)} skipped")
        return [cfg["posthoc"]], [data, recipe], {"skipped": skipped}

    manifest = _manifest(cfg)
    sidecar = load_sidecar(cfg["sidecar"]) if cfg["sidecar"] else {}
    if not ac or not st:
        sidecar = {k: (a if ac else "", s if st else "") for k, (a, s) in sidecar.items()}
    inputs = [p for p in (cfg["manifest"], cfg["sidecar"], cfg["template"]) if p]
    clips = manifest.split(cfg["split"])
    if kind == "pairs":
        refs = None
        if cfg["composites"]:
            root = Path(cfg["composites"])
            refs = {c.clip_id: (str(root / f"{c.clip_id}.grid.png")
                                if (root / f"{c.clip_id}.grid.png").is_file() else None) for c in clips}
        pairs = build_instruction_pairs(manifest, cfg["split"], template, sidecar, refs, skipped=skipped)
        data = write_conversations(pairs, out / f"instruct_{cfg['split']}.jsonl")
        recipe = write_training_recipe(out / "train_recipe.json", data.name, seed=cfg["seed"])
        print(f"{len(pairs)} instruction pairs, {len(skipped)} skipped")
        return inputs, [data, recipe], {"skipped": skipped}

    images = _composites(cfg, clips)
    client = _client(cfg, out, EchoClient)
    records = generate_posthoc(client, manifest, cfg["split"], template, sidecar, images,
                               workers=cfg["workers"], skipped=skipped)
    data = write_posthoc(records, out / f"posthoc_{cfg['split']}.jsonl")
    print(f"{len(records)} post-hoc records, {len(skipped)} skipped")
    return inputs, [data], {"skipped": skipped}


def _named_results(cfg) -> list[tuple[str, str]]:
    out = []
    for item in cfg["results"] or []:
        name, sep, path = item.partition("=")
        if not sep or not Path(path).is_file():
            raise ConfigError(f"--result expects NAME=PATH to an existing file, got {item!r}")
        out.append((name, path))
    if not out:
        raise ConfigError("at least one --result is required")
    return out


def _read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _sweep_results(path):
    results, ratios = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("report") is None:
            continue
        results[(tuple(rec["modalities"]), rec["column"])] = EvalReport.from_dict(rec["report"])
        if rec.get("weights") and tuple(rec["weights"]) not in ratios:
            ratios.append(tuple(rec["weights"]))
    return results, ratios


def cmd_report(cfg, out: Path, layout: str):
    ext = "md" if cfg["format"] == "markdown" else "csv"
    path = out / f"{layout}.{ext}"
    if layout == "table3":
        _require(cfg, "sweep")
        results, ratios = _sweep_results(cfg["sweep"])
        text = emit_report(results, layout, cfg["format"], path, ratios=ratios or TABLE3_RATIOS)
        inputs = [cfg["sweep"]]
    else:
        named = _named_results(cfg)
        reports = [(name, _read_report(p)) for name, p in named]
        results = reports if layout == "table2" else dict(reports)
        text = emit_report(results, layout, cfg["format"], path)
        inputs = [p for _, p in named]
    print(text, end="")
    return inputs, [path], {}


def sweep_cells(modalities, full_grid: bool = False):
    """``(modalities, column, FusionSpec)`` for every cell of the fusion grid.

    Single modalities get one unfused cell; subsets get average, max and
    concat; the full modality set additionally gets weight ratios, the three
    reference ratios for a:v:s or every non-uniform 1/2 ratio otherwise.
    """
    mods = order_modalities(modalities)
    cells = []
    for r in range(1, len(mods) + 1):
        for subset in combinations(mods, r):
            if r == 1:
                cells.append((subset, "average", FusionSpec.create("average", subset)))
                continue
            for method in ("average", "max", "concat"):
                cells.append((subset, method, FusionSpec.create(method, subset)))
            if r == len(mods):
                ratios = TABLE3_RATIOS if r == 3 and not full_grid else weight_grid(r)
                for w in ratios:
                    spec = FusionSpec.create("weighted", subset, w)
                    cells.append((subset, spec.ratio_label, spec))
    return cells


def cmd_sweep(cfg, out: Path):
    manifest = _manifest(cfg)
    results_path = out / "sweep.jsonl"
    lines, inputs, failed = [], {cfg["manifest"]}, 0
    for subset, column, spec in sweep_cells(cfg["modalities"], cfg["full_grid"]):
        rec = {"modalities": list(subset), "column": column, "fusion": spec.to_text(),
               "weights": list(spec.weights) if spec.weights else None, "model": cfg["model"], "seed": cfg["seed"]}
        try:
            _, report, paths = _train_one(cfg, manifest, spec)
            inputs.update(str(p) for p in paths)
            rec["report"] = report.to_dict()
            print(f"{'-'.join(subset):24s} {column:8s} {100 * report.macro_f1:6.2f}")
        except ConfigError:
            raise
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            failed += 1
            rec["report"] = None
            rec["error"] = f"{type(exc).__name__}: {exc}"
            print(f"{'-'.join(subset):24s} {column:8s} failed: {rec['error']}", file=sys.stderr)
        lines.append(json.dumps(rec, sort_keys=True))
    results_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    results, ratios = _sweep_results(results_path)
    ext = "md" if cfg["format"] == "markdown" else "csv"
    table = out / f"table3.{ext}"
    text = emit_report(results, "table3", cfg["format"], table, ratios=ratios or TABLE3_RATIOS)
    print(text, end="")
    return sorted(inputs), [results_path, table], {"failed_cells": failed}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _dispatch(args, cfg, out):
    if args.command == "instruct":
        return cmd_instruct(cfg, out, args.kind)
    if args.command == "report":
        return cmd_report(cfg, out, args.layout)
    return {
        "synth": cmd_synth,
        "validate": cmd_validate,
        "extract": cmd_extract,
        "train": cmd_train,
        "eval": cmd_eval,
        "zero-shot": cmd_zero_shot,
        "sweep": cmd_sweep,
    }[args.command](cfg, out)


def _command_name(args) -> str:
    if args.command == "instruct":
        return f"instruct build {args.kind}"
    if args.command == "report":
        return f"report {args.layout}"
    return args.command


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"avbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    name = _command_name(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ledger = Ledger(out)
    input_paths = [cfg[k] for k in PATH_KEYS if cfg.get(k)]
    if cfg["features_dir"] and Path(cfg["features_dir"]).is_dir() and args.command != "extract":
        input_paths += sorted(Path(cfg["features_dir"]).glob("*.avfc"))
    key = run_key(name, cfg, _digests(input_paths))
    if cfg.get("resume") and ledger.up_to_date(key):
        print(f"{name}: up to date, nothing to do")
        return EXIT_OK

    try:
        inputs, artifacts, extra = _dispatch(args, cfg, out)
    except ConfigError as exc:
        print(f"avbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, RuntimeError, TransportError) as exc:
        logger.debug("failure", exc_info=True)
        print(f"avbench: {name} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        ledger.append({"command": name, "config": cfg, "key": key, "status": "failed",
                       "error": f"{type(exc).__name__}: {exc}", "version": __version__})
        return EXIT_RUNTIME
    status = extra.pop("exit", EXIT_OK)
    ledger.append({
        "command": name,
        "config": cfg,
        "key": key,
        "status": "ok" if status == EXIT_OK else "failed",
        "inputs": _digests(inputs),
        "artifacts": _digests(artifacts),
        "version": __version__,
        **extra,
    })
    return status


if __name__ == "__main__":
    sys.exit(main())
