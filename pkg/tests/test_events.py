import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evseg.errors import (
    EventParseError,
    InsufficientInputError,
    InvalidArgumentError,
    MalformedSequenceError,
    MalformedStreamError,
)
from evseg.events import (
    EventStream,
    FrameSequence,
    polarity_histogram,
    read_events,
    rescale_stream,
    simulate_events,
    voxelize,
    write_events,
)


def stream_of(records, width=4, height=3, t_start=0.0, t_end=1.0):
    if not records:
        return EventStream.empty(width, height, t_start, t_end)
    t, x, y, p = zip(*records)
    return EventStream(np.array(t, float), np.array(x), np.array(y), np.array(p, np.int8),
                       width, height, t_start, t_end).validate()


def ramp_sequence(levels, eps=1e-3, times=None):
    """Frames whose per-pixel log intensities hit the requested levels exactly."""
    frames = np.exp(np.asarray(levels, dtype=np.float64)) - eps
    if times is None:
        times = np.arange(len(levels), dtype=np.float64)
    return FrameSequence(frames, np.asarray(times, dtype=np.float64)).validate()


class TestVoxelize:
    def test_single_event_splits_between_bins(self):
        s = stream_of([(0.5, 0, 0, 1)])
        g = voxelize(s, 2)
        assert g.values[0, 0, 0] == pytest.approx(0.5)
        assert g.values[1, 0, 0] == pytest.approx(0.5)

    def test_empty_stream_all_zero(self):
        g = voxelize(EventStream.empty(4, 3), 5)
        assert g.values.shape == (5, 3, 4)
        assert np.all(g.values == 0.0)

    def test_window_endpoints_land_in_outer_bins(self):
        s = stream_of([(0.0, 1, 0, 1), (1.0, 2, 1, -1)])
        g = voxelize(s, 2)
        assert g.values[0].sum() == pytest.approx(1.0)
        assert g.values[1].sum() == pytest.approx(-1.0)

    def test_non_positive_bins_rejected(self):
        with pytest.raises(InvalidArgumentError):
            voxelize(EventStream.empty(2, 2), 0)

    def test_unsorted_stream_rejected(self):
        s = EventStream(np.array([0.5, 0.2]), np.array([0, 0]), np.array([0, 0]),
                        np.array([1, 1], np.int8), 2, 2, 0.0, 1.0)
        with pytest.raises(MalformedStreamError):
            voxelize(s, 3)

    def test_degenerate_window_uses_bin_zero(self):
        s = stream_of([(0.5, 0, 0, 1), (0.5, 1, 1, -1)], t_start=0.5, t_end=0.5)
        g = voxelize(s, 4)
        assert g.values[0, 0, 0] == 1.0
        assert g.values[0, 1, 1] == -1.0
        assert np.all(g.values[1:] == 0.0)

    def test_single_bin_equals_polarity_histogram(self):
        rng = np.random.default_rng(5)
        n = 200
        s = EventStream.from_arrays(np.sort(rng.uniform(0, 1, n)), rng.integers(0, 6, n),
                                    rng.integers(0, 5, n), rng.choice([-1, 1], n),
                                    width=6, height=5, t_start=0.0, t_end=1.0)
        g = voxelize(s, 1)
        np.testing.assert_array_equal(g.values[0], polarity_histogram(s))

    @settings(max_examples=60, deadline=None, derandomize=True)
    @given(st.integers(1, 8), st.integers(0, 300), st.integers(0, 2 ** 31 - 1))
    def test_mass_conservation(self, bins, n, seed):
        rng = np.random.default_rng(seed)
        t = np.sort(rng.uniform(0, 2.0, n))
        s = EventStream.from_arrays(t, rng.integers(0, 8, n), rng.integers(0, 8, n),
                                    rng.choice([-1, 1], n), width=8, height=8,
                                    t_start=0.0, t_end=2.0)
        g = voxelize(s, bins)
        assert abs(g.total_mass() - s.p.astype(float).sum()) <= 1e-6 * max(n, 1)


class TestSimulator:
    def test_exact_triple_threshold_ramp(self):
        c = 0.3
        l0 = np.log(0.2 + 1e-3)
        seq = ramp_sequence([[[l0]], [[l0 + 3 * c]]], times=[0.0, 1.0])
        s = simulate_events(seq, c)
        assert len(s) == 3
        assert list(s.p) == [1, 1, 1]
        np.testing.assert_allclose(s.t, [1 / 3, 2 / 3, 1.0], atol=1e-12)

    def test_constant_sequence_is_silent(self):
        frames = np.full((4, 3, 3), 0.6)
        seq = FrameSequence(frames, np.arange(4.0))
        s = simulate_events(seq, 0.2)
        assert len(s) == 0

    def test_reference_level_hysteresis(self):
        c = 0.4
        l0 = np.log(0.3 + 1e-3)
        seq = ramp_sequence([[[l0]], [[l0 + 2.5 * c]], [[l0]]], times=[0.0, 1.0, 2.0])
        s = simulate_events(seq, c)
        assert list(s.p) == [1, 1, -1, -1]
        # falling crossings measured from the updated reference level l0 + 2c
        np.testing.assert_allclose(s.t, [0.4, 0.8, 1.6, 2.0], atol=1e-9)

    def test_monotone_ramp_event_count_oracle(self):
        c = 0.21
        for k in (1, 2, 5, 9):
            l0 = np.log(0.5 + 1e-3)
            seq = ramp_sequence([[[l0]], [[l0 + (k + 0.5) * c]]], times=[0.0, 1.0])
            s = simulate_events(seq, c)
            assert len(s) == k, f"ramp of {k + 0.5}xC should cross {k} levels"

    def test_pixel_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        frames = rng.uniform(0.1, 0.9, (3, 4, 5))
        seq = FrameSequence(frames, np.array([0.0, 0.4, 1.0]))
        base = simulate_events(seq, 0.15)

        perm = rng.permutation(4 * 5)
        permuted = frames.reshape(3, -1)[:, perm].reshape(3, 4, 5)
        other = simulate_events(FrameSequence(permuted, seq.timestamps), 0.15)

        def as_set(stream, mapper=None):
            out = set()
            for e in stream.events():
                flat = e.y * 5 + e.x
                if mapper is not None:
                    flat = mapper[flat]
                out.add((round(e.t, 12), int(flat), e.p))
            return out

        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        # pixel j of the permuted frames shows the history of pixel perm[j]
        assert as_set(other, perm) == as_set(base)

    def test_too_few_frames(self):
        with pytest.raises(InsufficientInputError):
            simulate_events(FrameSequence(np.full((1, 2, 2), 0.5), np.array([0.0])), 0.2)

    def test_non_increasing_timestamps(self):
        seq = FrameSequence(np.full((2, 2, 2), 0.5), np.array([0.0, 0.0]))
        with pytest.raises(MalformedSequenceError):
            simulate_events(seq, 0.2)

    def test_output_sorted_and_in_window(self):
        rng = np.random.default_rng(3)
        frames = rng.uniform(0.05, 0.95, (5, 6, 6))
        seq = FrameSequence(frames, np.array([0.0, 0.2, 0.5, 0.7, 1.1]))
        s = simulate_events(seq, 0.12)
        assert len(s) > 0
        assert np.all(np.diff(s.t) >= 0)
        s.validate()


class TestEventFiles:
    def make_stream(self):
        return stream_of([(0.125, 1, 2, 1), (0.5, 3, 0, -1), (0.75, 0, 1, 1)])

    @pytest.mark.parametrize("suffix", [".evt", ".evb"])
    def test_round_trip_identity(self, tmp_path, suffix):
        s = self.make_stream()
        path = tmp_path / f"events{suffix}"
        write_events(s, path)
        r = read_events(path)
        np.testing.assert_array_equal(r.t, s.t)
        np.testing.assert_array_equal(r.x, s.x)
        np.testing.assert_array_equal(r.y, s.y)
        np.testing.assert_array_equal(r.p, s.p)
        assert (r.width, r.height, r.t_start, r.t_end) == (s.width, s.height, s.t_start, s.t_end)

    def test_text_round_trip_bit_exact_times(self, tmp_path):
        t = np.array([0.1, 1 / 3, np.pi / 7])
        s = EventStream.from_arrays(t, [0, 1, 2], [0, 1, 2], [1, -1, 1], width=3, height=3,
                                    t_start=0.0, t_end=1.0)
        path = tmp_path / "e.evt"
        write_events(s, path)
        assert read_events(path).t.tobytes() == s.t.tobytes()

    def test_zero_polarity_rejected_with_line(self, tmp_path):
        path = tmp_path / "bad.evt"
        path.write_text("4 3 0.0 1.0\n0.5 1 1 0\n")
        with pytest.raises(EventParseError) as err:
            read_events(path)
        assert err.value.line == 2

    def test_empty_file_with_header(self, tmp_path):
        path = tmp_path / "empty.evt"
        path.write_text("7 5 0.25 0.75\n")
        s = read_events(path)
        assert len(s) == 0
        assert (s.width, s.height) == (7, 5)
        assert (s.t_start, s.t_end) == (0.25, 0.75)

    def test_malformed_record_reports_line(self, tmp_path):
        path = tmp_path / "bad.evt"
        path.write_text("4 3 0.0 1.0\n0.1 0 0 1\nnot an event\n")
        with pytest.raises(EventParseError) as err:
            read_events(path)
        assert err.value.line == 3

    def test_binary_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.evb"
        path.write_bytes(b"definitely not events")
        with pytest.raises(EventParseError):
            read_events(path)


def test_rescale_stream_nearest():
    s = stream_of([(0.1, 3, 2, 1)], width=4, height=3)
    r = rescale_stream(s, 8, 6)
    assert (r.x[0], r.y[0]) == (6, 4)
    assert (r.width, r.height) == (8, 6)
