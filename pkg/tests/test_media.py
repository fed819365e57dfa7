import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbench.media import (
    FrameSequence,
    compose_grid,
    cut_audio,
    cut_frames,
    read_composite,
    segment_clip,
    select_grid_frames,
    synthetic_frames,
    write_composite,
)


def _round_half_up_oracle(n):
    # fractions avoid any float tie ambiguity
    from fractions import Fraction

    return [math.floor(Fraction(k * (n - 1), 8) + Fraction(1, 2)) for k in range(9)]


class TestGridFrames:
    def test_nine(self):
        assert select_grid_frames(9) == list(range(9))

    def test_ninety(self):
        assert select_grid_frames(90) == [0, 11, 22, 33, 45, 56, 67, 78, 89]

    def test_five_duplicates(self):
        assert select_grid_frames(5) == [0, 1, 1, 2, 2, 3, 3, 4, 4]

    def test_single_frame(self):
        assert select_grid_frames(1) == [0] * 9

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            select_grid_frames(0)

    @given(st.integers(1, 100_000))
    def test_matches_oracle(self, n):
        idx = select_grid_frames(n)
        assert idx == _round_half_up_oracle(n)
        assert idx == sorted(idx)
        if n >= 2:
            assert idx[0] == 0 and idx[-1] == n - 1


class TestCompose:
    def test_geometry_and_order(self):
        frames = synthetic_frames(9, width=100, height=100)
        img = compose_grid(frames)
        assert img.pixels.shape == (300, 300, 3)
        for r in range(3):
            for c in range(3):
                np.testing.assert_array_equal(img.cell(r, c), frames.frames[3 * r + c])

    def test_single_frame_tiled(self):
        frames = synthetic_frames(1, width=8, height=6)
        img = compose_grid(frames)
        assert img.pixels.shape == (18, 24, 3)
        np.testing.assert_array_equal(img.cell(2, 2), frames.frames[0])

    def test_mismatched_sizes(self):
        a = np.zeros((4, 4, 3), np.uint8)
        b = np.zeros((5, 4, 3), np.uint8)
        with pytest.raises(ValueError):
            compose_grid(FrameSequence((a, b), (0.0, 0.1)), [0, 1, 0, 1, 0, 1, 0, 1, 0])

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            compose_grid(synthetic_frames(3), [0, 1, 2, 3, 0, 0, 0, 0, 0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 12), st.integers(1, 12))
    def test_pixel_count(self, n, w, h):
        frames = synthetic_frames(n, width=w, height=h)
        img = compose_grid(frames)
        assert img.pixels.size == 9 * frames.frames[0].size
        # channel 0 carries the source frame index
        assert [int(img.cell(k // 3, k % 3)[0, 0, 0]) for k in range(9)] == [i % 256 for i in img.source_indices]

    def test_png_round_trip(self, tmp_path):
        img = compose_grid(synthetic_frames(30, width=10, height=10, seed=4))
        path = write_composite(img, tmp_path, "clip_7")
        back = read_composite(path)
        np.testing.assert_array_equal(back.pixels, img.pixels)
        assert back.source_indices == img.source_indices
        assert back.digest_bytes() == img.digest_bytes()


class TestSegments:
    def test_exact_ten(self):
        spans = segment_clip(10.0)
        assert len(spans) == 10
        assert not any(s.padded for s in spans)
        assert [s.index for s in spans] == list(range(1, 11))

    def test_mean_duration(self):
        spans = segment_clip(25.88)
        assert len(spans) == 26
        assert spans[-1].padded and not any(s.padded for s in spans[:-1])
        assert spans[-1].end_s == 25.88

    def test_short_residual_dropped(self):
        assert len(segment_clip(10.3)) == 10

    def test_half_second_kept(self):
        assert segment_clip(3.5)[-1].padded

    def test_too_short(self):
        with pytest.raises(ValueError):
            segment_clip(0.99)

    @given(st.floats(1.0, 2000.0, allow_nan=False))
    def test_spans_tile(self, d):
        spans = segment_clip(d)
        assert len(spans) >= 1
        assert spans[0].start_s == 0.0
        for a, b in zip(spans, spans[1:]):
            assert a.end_s == b.start_s
        assert spans[-1].end_s in (math.floor(d), d)


class TestCutting:
    def test_audio_padding(self):
        rate = 100
        samples = np.arange(350, dtype=np.float32)
        chunks = cut_audio(samples, rate, segment_clip(3.5))
        assert [len(c) for c in chunks] == [100] * 4
        np.testing.assert_array_equal(chunks[3][:50], samples[300:])
        np.testing.assert_array_equal(chunks[3][50:], 0)

    def test_frames_padded_span(self):
        frames = synthetic_frames(35, fps=10)
        groups = cut_frames(frames, segment_clip(3.5))
        assert [len(g) for g in groups] == [10, 10, 10, 10]
        np.testing.assert_array_equal(groups[3].frames[-1], frames.frames[-1])
