import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbench.taxonomy import (
    BACKGROUND,
    NUM_CLASSES,
    PAPER_SPEC,
    ClipRecord,
    DatasetManifest,
    ManifestParseError,
    ManifestSpec,
    ManifestValidationError,
    category_id,
    category_names,
    clips_from_labels,
    load_manifest,
    parse_manifest,
    propagate_segment_labels,
    save_manifest,
    serialize_manifest,
    synthesize_manifest,
    taxonomy,
    validate_paper_statistics,
)


def _line(**over):
    rec = {"clip_id": "c1", "video_id": "v1", "start_s": 0.0, "end_s": 5.0,
           "labels": ["Object Lining-Up"], "split": "train"}
    rec.update(over)
    return json.dumps(rec)


class TestTaxonomy:
    def test_ten_unique_categories(self):
        cats = taxonomy()
        assert len(cats) == NUM_CLASSES
        assert len({c.canonical_name for c in cats}) == NUM_CLASSES
        assert [c.id for c in cats] == list(range(NUM_CLASSES))

    def test_three_social(self):
        social = [c.canonical_name for c in taxonomy() if c.is_social]
        assert social == [
            "Absence or Avoidance of Eye Contact",
            "Non-Responsiveness to Verbal Interaction",
            "Non-Typical Language",
        ]

    def test_background_last(self):
        assert category_names()[BACKGROUND] == "Background"

    def test_lookup_case_insensitive(self):
        assert category_id("upper limb  STEREOTYPIES") == 8
        with pytest.raises(KeyError):
            category_id("Hand Flapping")

    def test_descriptions_present(self):
        assert all(len(c.description) > 20 for c in taxonomy())


class TestParsing:
    def test_three_lines(self):
        text = "\n".join(_line(clip_id=f"c{i}") for i in range(3))
        m = parse_manifest(text)
        assert [c.clip_id for c in m] == ["c0", "c1", "c2"]

    def test_end_before_start(self):
        with pytest.raises(ManifestValidationError, match="c1"):
            parse_manifest(_line(start_s=4.0, end_s=2.0))

    def test_background_exclusive(self):
        with pytest.raises(ManifestValidationError, match="Background"):
            parse_manifest(_line(labels=["Background", "Aggressive Behavior"]))

    def test_short_clip(self):
        with pytest.raises(ManifestValidationError):
            parse_manifest(_line(end_s=0.5))

    def test_empty_labels(self):
        with pytest.raises(ManifestValidationError):
            parse_manifest(_line(labels=[]))

    def test_duplicate_ids(self):
        with pytest.raises(ManifestValidationError, match="duplicate"):
            parse_manifest(_line() + "\n" + _line())

    def test_bad_split(self):
        with pytest.raises(ManifestValidationError):
            parse_manifest(_line(split="dev"))

    def test_malformed_json_names_line(self):
        with pytest.raises(ManifestParseError, match="line 2"):
            parse_manifest(_line() + "\n{oops\n")

    def test_missing_key_names_line(self):
        rec = json.loads(_line())
        del rec["video_id"]
        with pytest.raises(ManifestParseError, match="line 1"):
            parse_manifest(json.dumps(rec))

    def test_unknown_label(self):
        with pytest.raises(ManifestParseError):
            parse_manifest(_line(labels=["Toe Walking"]))

    def test_file_round_trip(self, tmp_path, tiny_manifest):
        path = save_manifest(tiny_manifest, tmp_path / "m.jsonl")
        assert serialize_manifest(load_manifest(path)) == path.read_text()

    def test_labels_stored_in_id_order(self):
        m = parse_manifest(_line(labels=["Upper Limb Stereotypies", "Absence or Avoidance of Eye Contact"]))
        assert json.loads(serialize_manifest(m))["labels"] == [
            "Absence or Avoidance of Eye Contact", "Upper Limb Stereotypies"]


label_sets = st.one_of(
    st.just(frozenset({BACKGROUND})),
    st.frozensets(st.integers(0, BACKGROUND - 1), min_size=1, max_size=4),
)
clip_lists = st.lists(
    st.tuples(label_sets, st.floats(1.0, 900.0, allow_nan=False), st.sampled_from(["train", "val", "test"])),
    max_size=20,
)


class TestManifestProperties:
    @settings(max_examples=60, deadline=None)
    @given(clip_lists)
    def test_serialize_round_trip(self, rows):
        m = clips_from_labels(*zip(*rows)) if rows else DatasetManifest(())
        text = serialize_manifest(m)
        assert serialize_manifest(parse_manifest(text)) == text

    @settings(max_examples=60, deadline=None)
    @given(clip_lists)
    def test_count_sum_equals_label_sum(self, rows):
        m = clips_from_labels(*zip(*rows)) if rows else DatasetManifest(())
        report = validate_paper_statistics(m)
        assert sum(report.category_counts) == sum(len(c.labels) for c in m)
        assert report.category_counts[BACKGROUND] == sum(c.labels == {BACKGROUND} for c in m)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_synthesis_deterministic(self, seed):
        spec = ManifestSpec((3, 2, 1, 0, 4, 2, 1, 1, 5, 3), 12, (0.5, 0.25, 0.25))
        a = serialize_manifest(synthesize_manifest(seed, spec))
        assert a == serialize_manifest(synthesize_manifest(seed, spec))
        assert validate_paper_statistics(synthesize_manifest(seed, spec)).category_counts == spec.category_counts


class TestStatistics:
    def test_paper_counts(self, paper_manifest):
        r = validate_paper_statistics(paper_manifest)
        assert r.category_counts == (161, 126, 108, 129, 110, 166, 42, 113, 296, 177)
        assert r.split_sizes == {"train": 553, "val": 193, "test": 182}
        assert r.n_clips == 928
        assert r.label_total == 1428
        assert round(r.mean_labels, 2) == 1.54
        assert r.passed, r.flags

    def test_paper_durations(self, paper_manifest):
        r = validate_paper_statistics(paper_manifest)
        assert (round(r.mean_duration, 2), r.median_duration) == (25.88, 10.0)
        assert (r.min_duration, r.max_duration) == (1.0, 887.01)
        assert r.n_videos == 569

    def test_empty_manifest_fails_everything(self):
        r = validate_paper_statistics(DatasetManifest(()))
        assert r.category_counts == (0,) * NUM_CLASSES
        assert r.flags and not any(r.flags.values())

    def test_perturbed_manifest_flags(self, paper_manifest):
        clips = list(paper_manifest.clips)
        i = next(i for i, c in enumerate(clips) if BACKGROUND not in c.labels)
        c = clips[i]
        clips[i] = ClipRecord(c.clip_id, c.video_id, c.start_s, c.end_s, frozenset({BACKGROUND}), c.split)
        r = validate_paper_statistics(DatasetManifest(tuple(clips)))
        assert not r.flags["category_counts"]
        assert r.flags["split_sizes"]

    def test_split_sizes_largest_remainder(self):
        assert PAPER_SPEC.split_sizes() == (553, 193, 182)

    def test_report_serializable(self, paper_manifest):
        d = validate_paper_statistics(paper_manifest).to_dict()
        assert json.loads(json.dumps(d))["passed"] is True


class TestSynthesis:
    def test_all_zero_spec(self):
        assert len(synthesize_manifest(0, ManifestSpec((0,) * 10, 0, (0.6, 0.2, 0.2)))) == 0

    def test_infeasible_background(self):
        with pytest.raises(ValueError, match="infeasible"):
            synthesize_manifest(0, ManifestSpec((1,) + (0,) * 8 + (3,), 3, (0.6, 0.2, 0.2)))

    def test_infeasible_count(self):
        with pytest.raises(ValueError, match="infeasible"):
            synthesize_manifest(0, ManifestSpec((9,) + (0,) * 9, 5, (0.6, 0.2, 0.2)))

    def test_seeds_differ(self):
        a = serialize_manifest(synthesize_manifest(0, PAPER_SPEC))
        b = serialize_manifest(synthesize_manifest(1, PAPER_SPEC))
        assert a != b


class TestSegmentLabels:
    def test_broadcast(self):
        m = clips_from_labels([{8}, {0, 2}], [10.0, 3.0], ["train", "train"])
        seg = propagate_segment_labels(m, {"clip_0000": 10, "clip_0001": 3})
        assert [seg[("clip_0000", t)] for t in range(1, 11)] == [frozenset({8})] * 10
        assert [seg[("clip_0001", t)] for t in (1, 2, 3)] == [frozenset({0, 2})] * 3
        assert len(seg) == 13

    def test_missing_clip(self):
        m = clips_from_labels([{8}, {0}], [10.0, 3.0], ["train", "val"])
        with pytest.raises(KeyError, match="clip_0001"):
            propagate_segment_labels(m, {"clip_0000": 10})

    def test_label_matrix(self, tiny_manifest):
        y = tiny_manifest.label_matrix()
        np.testing.assert_array_equal(y.sum(axis=0), [4] * 10)
