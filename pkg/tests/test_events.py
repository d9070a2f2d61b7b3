import numpy as np
import pytest

from evsplat.events import (
    DEFAULT_LOG_EPS,
    Event,
    EventModelError,
    EventStream,
    accumulate,
    event_frames_on_grid,
    load_events,
    log_intensity,
    partition,
    save_events_binary,
    save_events_text,
    simulate_events,
    slice_stream,
    subintervals_for_interval,
)


def stream_from(events, size=(8, 8)):
    return EventStream.from_events([Event(*e) for e in events], size)


class TestSimulator:
    def test_identical_frames_give_empty_stream(self):
        frame = np.full((4, 4), -1.0)
        out = simulate_events([frame, frame, frame], [0.0, 1.0, 2.0], 0.25)
        assert len(out) == 0

    def test_half_log_step_emits_two_positive_events(self):
        # one pixel steps +0.5 in log intensity with C = 0.25 -> 2 events
        l0 = np.zeros((3, 3))
        l1 = l0.copy()
        l1[1, 2] = 0.5
        out = simulate_events([l0, l1], [0.0, 1.0], 0.25)
        assert len(out) == 2
        assert np.all(out.p == 1)
        assert np.all(out.x == 2) and np.all(out.y == 1)
        # thresholds crossed at linear fractions 0.5 and 1.0
        np.testing.assert_allclose(out.t, [0.5, 1.0])

    def test_negative_step_symmetry(self):
        rng = np.random.default_rng(3)
        frames = [rng.uniform(-1, 0, (6, 6)) for _ in range(5)]
        times = [0.0, 0.5, 1.0, 1.5, 2.0]
        pos = simulate_events(frames, times, 0.25)
        neg = simulate_events([-f for f in frames], times, 0.25)
        np.testing.assert_allclose(pos.t, neg.t)
        assert np.array_equal(pos.x, neg.x)
        assert np.array_equal(pos.y, neg.y)
        assert np.array_equal(pos.p, -neg.p)

    def test_residual_bound_against_log_difference(self):
        c = 0.25
        rng = np.random.default_rng(7)
        imgs = [rng.uniform(0.05, 1.0, (8, 8)) for _ in range(6)]
        logs = [log_intensity(i) for i in imgs]
        times = np.arange(6.0)
        stream = simulate_events(logs, times, c)
        counts = accumulate(stream, 0.0, times[-1] + 1.0).counts
        recon = c * counts
        err = np.abs(recon - (logs[-1] - logs[0]))
        assert err.max() <= c + 1e-9

    def test_time_sorted_output(self):
        rng = np.random.default_rng(11)
        frames = [rng.uniform(-2, 0, (10, 10)) for _ in range(4)]
        out = simulate_events(frames, [0.0, 0.1, 0.2, 0.3], 0.2)
        assert np.all(np.diff(out.t) >= 0)

    def test_threshold_jitter_changes_counts_deterministically(self):
        l0 = np.zeros((4, 4))
        l1 = np.full((4, 4), 0.9)
        a = simulate_events([l0, l1], [0, 1], 0.25, threshold_jitter=0.1, seed=1)
        b = simulate_events([l0, l1], [0, 1], 0.25, threshold_jitter=0.1, seed=1)
        c = simulate_events([l0, l1], [0, 1], 0.25)
        assert np.array_equal(a.t, b.t)
        assert len(a) != 0
        assert not np.array_equal(a.t, c.t) or len(a) != len(c)

    def test_errors(self):
        l0 = np.zeros((4, 4))
        with pytest.raises(EventModelError):
            simulate_events([l0], [0.0], 0.25)
        with pytest.raises(EventModelError):
            simulate_events([l0, np.zeros((5, 4))], [0, 1], 0.25)
        with pytest.raises(EventModelError):
            simulate_events([l0, l0], [1, 1], 0.25)
        with pytest.raises(EventModelError):
            simulate_events([l0, l0], [0, 1], 0.0)


class TestSliceAccumulate:
    def test_full_window_slice_is_identity(self):
        s = stream_from([(0.1, 1, 1, 1), (0.2, 2, 3, -1), (0.3, 0, 0, 1)])
        out = slice_stream(s, 0.0, 1.0)
        assert out == s

    def test_slice_empty_stream(self):
        out = slice_stream(EventStream.empty((4, 4)), 0.0, 1.0)
        assert len(out) == 0

    def test_half_open_slice(self):
        s = stream_from([(0.1, 0, 0, 1), (0.2, 1, 1, 1), (0.3, 2, 2, -1)])
        out = slice_stream(s, 0.15, 0.3)
        assert len(out) == 1
        assert out.t[0] == 0.2

    def test_slice_rejects_empty_window(self):
        s = stream_from([(0.1, 0, 0, 1)])
        with pytest.raises(EventModelError):
            slice_stream(s, 0.5, 0.5)

    def test_accumulate_empty(self):
        out = accumulate(EventStream.empty((4, 3)), 0.0, 1.0)
        assert out.counts.shape == (3, 4)
        assert not out.counts.any()

    def test_polarity_cancellation(self):
        s = stream_from([(0.1, 2, 1, 1), (0.2, 2, 1, -1)])
        out = accumulate(s, 0.0, 1.0)
        assert out.counts[1, 2] == 0
        assert not out.counts.any()

    def test_accumulate_composes_with_simulator(self):
        l0 = np.zeros((3, 3))
        l1 = l0.copy()
        l1[0, 1] = 0.5
        s = simulate_events([l0, l1], [0.0, 1.0], 0.25)
        out = accumulate(s, 0.0, 1.5)
        assert out.counts[0, 1] == 2
        assert out.counts.sum() == 2

    def test_accumulation_linearity(self):
        rng = np.random.default_rng(5)
        frames = [rng.uniform(-1, 0, (6, 6)) for _ in range(4)]
        s = simulate_events(frames, [0.0, 1.0, 2.0, 3.0], 0.2)
        whole = accumulate(s, 0.0, 3.1).counts
        left = accumulate(s, 0.0, 1.7).counts
        right = accumulate(s, 1.7, 3.1).counts
        np.testing.assert_array_equal(whole, left + right)


class TestPartition:
    def test_single_subinterval(self):
        grid = partition([0.0, 1.0], 1)
        np.testing.assert_allclose(grid.all_times(), [0.0, 1.0])

    def test_halving(self):
        grid = partition([0.0, 1.0], 2)
        np.testing.assert_allclose(grid.gap_times(0), [0.0, 0.5, 1.0])

    def test_paper_subinterval_rule(self):
        # constant 1/6 s subintervals: N = 6 at 1 FPS, N = 2 at 3 FPS
        assert subintervals_for_interval(1.0, 1.0 / 6.0) == 6
        assert subintervals_for_interval(1.0 / 3.0, 1.0 / 6.0) == 2

    def test_grid_invariants(self):
        grid = partition([0.0, 0.5, 2.0], 4)
        assert grid.n_times == 9
        for i in range(2):
            times = grid.gap_times(i)
            assert times[0] == grid.frame_times[i]
            assert times[-1] == grid.frame_times[i + 1]
            assert np.all(np.diff(times) > 0)
        assert grid.locate(0) == (0, 0)
        assert grid.locate(5) == (1, 1)
        assert grid.locate(8) == (2, 0)

    def test_errors(self):
        with pytest.raises(EventModelError):
            partition([0.0, 1.0], 0)
        with pytest.raises(EventModelError):
            partition([1.0, 0.5], 2)
        with pytest.raises(EventModelError):
            partition([0.0], 3)


class TestEventFrameBank:
    def test_frames_cover_grid(self):
        rng = np.random.default_rng(2)
        imgs = [rng.uniform(0.1, 1.0, (5, 5)) for _ in range(3)]
        logs = [log_intensity(i) for i in imgs]
        stream = simulate_events(logs, [0.0, 1.0, 2.0], 0.2)
        grid = partition([0.0, 1.0, 2.0], 3)
        bank = event_frames_on_grid(stream, grid)
        assert len(bank) == 6
        total = sum(ef.counts for ef in bank)
        np.testing.assert_array_equal(
            total, accumulate(stream, 0.0, 2.0 + 1e-9).counts
        )


class TestEventFiles:
    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        frames = [rng.uniform(-1, 0, (7, 5)) for _ in range(3)]
        s = simulate_events(frames, [0.0, 1.0, 2.0], 0.2)
        path = tmp_path / "ev.bin"
        save_events_binary(path, s)
        again = load_events(path)
        assert again == s
        # bit-exact file round trip
        save_events_binary(tmp_path / "ev2.bin", again)
        assert (tmp_path / "ev.bin").read_bytes() == (tmp_path / "ev2.bin").read_bytes()

    def test_text_round_trip_and_autodetect(self, tmp_path):
        s = stream_from([(0.125, 1, 2, 1), (0.25, 3, 0, -1)], size=(5, 4))
        path = tmp_path / "ev.txt"
        save_events_text(path, s)
        again = load_events(path)
        assert again == s

    def test_stream_validation(self):
        with pytest.raises(EventModelError):
            stream_from([(0.2, 0, 0, 1), (0.1, 0, 0, 1)])
        with pytest.raises(EventModelError):
            stream_from([(0.1, 9, 0, 1)], size=(4, 4))
        with pytest.raises(EventModelError):
            stream_from([(0.1, 0, 0, 2)])
