import csv
import io
import json

import pytest

from avbench.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, Ledger, file_digest, main, sweep_cells
from avbench.harness import extract_labels
from avbench.taxonomy import load_manifest


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--preset", "small", "--out", str(root)]) == EXIT_OK
    feats = root / "features"
    assert main(["extract", "--manifest", str(root / "manifest.jsonl"), "--out", str(root), "--level", "clip",
                 "--dim", "32", "--separable", "--features-dir", str(feats)]) == EXIT_OK
    return root


def _base(work, out):
    return ["--manifest", str(work / "manifest.jsonl"), "--features-dir", str(work / "features"), "--out", str(out)]


class TestUsage:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE
        assert "invalid choice" in capsys.readouterr().err

    def test_missing_manifest_flag(self, tmp_path):
        assert main(["validate", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"nonsense": 1}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_http_without_endpoint(self, work, tmp_path):
        assert main(["zero-shot", *_base(work, tmp_path), "--client", "http"]) == EXIT_USAGE

    def test_nonexistent_manifest_is_usage(self, tmp_path):
        assert main(["validate", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_corrupt_manifest_is_runtime(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert main(["validate", "--manifest", str(bad), "--out", str(tmp_path)]) == EXIT_RUNTIME
        (entry,) = Ledger(tmp_path).entries()
        assert entry["status"] == "failed"

    def test_missing_cache(self, work, tmp_path):
        args = _base(work, tmp_path)
        args[3] = str(tmp_path / "empty")
        assert main(["train", *args]) == EXIT_USAGE


class TestValidate:
    def test_paper_preset_passes(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path)]) == EXIT_OK
        assert main(["validate", "--manifest", str(tmp_path / "manifest.jsonl"), "--out", str(tmp_path)]) == EXIT_OK
        stats = json.loads((tmp_path / "statistics.json").read_text())
        assert stats["passed"] is True

    def test_small_preset_flags(self, work, tmp_path):
        args = ["validate", "--manifest", str(work / "manifest.jsonl"), "--out", str(tmp_path)]
        assert main(args) == EXIT_RUNTIME
        assert main([*args, "--structure-only"]) == EXIT_OK


class TestTrainEval:
    def test_linear_round_trip(self, work, tmp_path, capsys):
        assert main(["train", *_base(work, tmp_path), "--model", "linear"]) == EXIT_OK
        trained = json.loads((tmp_path / "eval_test.json").read_text())
        assert trained["macro_f1"] >= 95.0
        out = tmp_path / "again"
        assert main(["eval", *_base(work, out), "--checkpoint", str(tmp_path / "model.avck")]) == EXIT_OK
        assert json.loads((out / "eval_test.json").read_text())["per_class"] == trained["per_class"]

    def test_resume_is_noop(self, work, tmp_path, capsys):
        args = ["train", *_base(work, tmp_path), "--model", "linear"]
        assert main(args) == EXIT_OK
        ckpt = tmp_path / "model.avck"
        before = ckpt.stat().st_mtime_ns
        capsys.readouterr()
        assert main([*args, "--resume"]) == EXIT_OK
        assert "up to date" in capsys.readouterr().out
        assert ckpt.stat().st_mtime_ns == before
        assert len(Ledger(tmp_path).entries()) == 1

    def test_resume_reruns_after_artifact_change(self, work, tmp_path, capsys):
        args = ["train", *_base(work, tmp_path), "--model", "linear"]
        assert main(args) == EXIT_OK
        (tmp_path / "eval_test.json").write_text("{}")
        assert main([*args, "--resume"]) == EXIT_OK
        assert len(Ledger(tmp_path).entries()) == 2

    def test_ledger_digests(self, work, tmp_path):
        assert main(["train", *_base(work, tmp_path), "--model", "linear", "--seed", "4"]) == EXIT_OK
        (entry,) = Ledger(tmp_path).entries()
        assert entry["config"]["seed"] == 4
        for path, digest in entry["artifacts"].items():
            assert file_digest(path) == digest
        assert str(work / "manifest.jsonl") in entry["inputs"]

    def test_dummy(self, work, tmp_path):
        assert main(["eval", *_base(work, tmp_path), "--dummy"]) == EXIT_OK
        rep = json.loads((tmp_path / "dummy_test.json").read_text())
        assert 0.0 < rep["macro_f1"] < 100.0

    def test_config_merge(self, work, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": "mlp", "seed": 9, "split": "val"}))
        assert main(["train", *_base(work, tmp_path), "--config", str(cfg), "--seed", "2"]) == EXIT_OK
        (entry,) = Ledger(tmp_path).entries()
        assert (entry["config"]["model"], entry["config"]["seed"]) == ("mlp", 2)
        assert (tmp_path / "eval_val.json").is_file()


class TestSweepReport:
    def test_cells(self):
        cells = sweep_cells(["a", "v", "s"])
        assert len(cells) == 3 + 3 * 3 + 3 + 3
        assert sum(c[1] == "2:1:1" for c in cells) == 1
        assert len(sweep_cells(["a", "v", "s"], full_grid=True)) == 3 + 12 + 6

    def test_sweep_table(self, work, tmp_path, capsys):
        assert main(["sweep", *_base(work, tmp_path), "--modalities", "a,v"]) == EXIT_OK
        rows = list(csv.reader(io.StringIO((tmp_path / "table3.csv").read_text())))
        header = rows[0]
        assert header[:4] == ["Method", "Average", "Max", "Concat"]
        body = {r[0]: r[1:] for r in rows[1:]}
        assert body["Audio"][1:4] == ["N/A"] * 3
        assert all(v != "N/A" for v in body["Audio-Visual"])
        assert header[4:] == ["(a:v = 1:2)", "(a:v = 2:1)"]
        assert main(["report", "table3", "--sweep", str(tmp_path / "sweep.jsonl"), "--out", str(tmp_path / "r"),
                     "--format", "markdown"]) == EXIT_OK
        assert (tmp_path / "r" / "table3.md").read_text().startswith("| Method |")

    def test_table2_and_table4(self, work, tmp_path):
        assert main(["eval", *_base(work, tmp_path), "--dummy"]) == EXIT_OK
        dummy = tmp_path / "dummy_test.json"
        args = ["--result", f"Dummy Baseline={dummy}", "--out", str(tmp_path)]
        assert main(["report", "table2", *args]) == EXIT_OK
        assert "Dummy Baseline" in (tmp_path / "table2.csv").read_text()
        assert main(["report", "table4", *args]) == EXIT_OK
        assert len((tmp_path / "table4.csv").read_text().splitlines()) == 12

    def test_report_needs_results(self, tmp_path):
        assert main(["report", "table2", "--out", str(tmp_path)]) == EXIT_USAGE


class TestHarnessCommands:
    def _answers(self, work, path):
        manifest = load_manifest(work / "manifest.jsonl")
        with open(path, "w") as fh:
            for c in manifest.split("test"):
                fh.write(json.dumps({"clip_id": c.clip_id, "response": f"I see {c.label_names[0].lower()}."}) + "\n")
        return manifest

    def test_zero_shot_deterministic(self, work, tmp_path):
        manifest = self._answers(work, tmp_path / "answers.jsonl")
        runs = []
        for name, workers in (("a", "1"), ("b", "4")):
            out = tmp_path / name
            args = ["zero-shot", "--manifest", str(work / "manifest.jsonl"), "--answers",
                    str(tmp_path / "answers.jsonl"), "--out", str(out), "--workers", workers]
            assert main(args) == EXIT_OK
            runs.append((out / "zero_shot_test.jsonl").read_bytes())
        assert runs[0] == runs[1]
        lines = [json.loads(x) for x in runs[0].decode().splitlines()]
        by_id = {c.clip_id: c for c in manifest.split("test")}
        for rec in lines[:-1]:
            assert by_id[rec["clip_id"]].labels >= extract_labels(rec["step2"])

    def test_instruct_chain(self, work, tmp_path):
        m = str(work / "manifest.jsonl")
        assert main(["instruct", "build", "pairs", "--manifest", m, "--split", "train", "--out", str(tmp_path)]) == 0
        assert main(["instruct", "build", "post-hoc", "--manifest", m, "--split", "train",
                     "--out", str(tmp_path)]) == EXIT_OK
        posthoc = tmp_path / "posthoc_train.jsonl"
        assert main(["instruct", "build", "ad-hoc", "--posthoc", str(posthoc), "--out", str(tmp_path)]) == EXIT_OK
        n = len(load_manifest(m).split("train"))
        pairs = (tmp_path / "instruct_train.jsonl").read_text().splitlines()
        adhoc = [json.loads(x) for x in (tmp_path / "adhoc.jsonl").read_text().splitlines()]
        assert len(pairs) == n and len(adhoc) == n
        assert json.loads((tmp_path / "train_recipe.json").read_text())["data_file"] == "adhoc.jsonl"
