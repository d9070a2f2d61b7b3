import numpy as np
import pytest

from evsplat.cmax import (
    CmaxError,
    IPWE,
    build_ipwe,
    cmax_loss,
    grad_loss,
    legm_loss,
    warp_event_frame,
)
from evsplat.geometry import MotionField


def uniform_field(shape, fx, fy, valid=True):
    flow = np.zeros(shape + (2,))
    flow[..., 0] = fx
    flow[..., 1] = fy
    mask = np.full(shape, valid)
    return MotionField(flow, mask)


class TestWarp:
    def test_zero_flow_is_identity(self, rng):
        frame = rng.integers(-3, 4, (12, 12)).astype(float)
        out = warp_event_frame(frame, uniform_field((12, 12), 0.0, 0.0))
        np.testing.assert_array_equal(out, frame)

    def test_integer_shift_moves_impulse(self):
        # out(u) = E(u + flow): flow (+3, 0) pulls the impulse at x=13 to x=10
        frame = np.zeros((8, 16))
        frame[4, 13] = 2.0
        out = warp_event_frame(frame, uniform_field((8, 16), 3.0, 0.0))
        assert out[4, 10] == 2.0
        assert out.sum() == 2.0

    def test_fractional_shift_bilinear_weights(self):
        frame = np.zeros((6, 6))
        frame[2, 3] = 1.0
        out = warp_event_frame(frame, uniform_field((6, 6), 0.25, 0.0))
        assert out[2, 2] == pytest.approx(0.25)
        assert out[2, 3] == pytest.approx(0.75)

    def test_out_of_bounds_flow_zeroes(self, rng):
        frame = rng.normal(size=(9, 9))
        out = warp_event_frame(frame, uniform_field((9, 9), 100.0, 0.0))
        np.testing.assert_array_equal(out, 0.0)

    def test_invalid_pixels_zeroed(self, rng):
        frame = rng.normal(size=(9, 9))
        field = uniform_field((9, 9), 0.0, 0.0)
        field.valid[3:5] = False
        out = warp_event_frame(frame, field)
        np.testing.assert_array_equal(out[3:5], 0.0)
        np.testing.assert_array_equal(out[:3], frame[:3])


class TestBuildIpwe:
    def test_single_frame_window(self, rng):
        frame = rng.integers(-2, 3, (10, 10)).astype(float)
        out = build_ipwe([frame], [None], timestamp=0.5)
        np.testing.assert_array_equal(out.map, frame)
        assert out.window == 0
        assert out.timestamp == 0.5

    def test_static_zero_flow_mean(self, rng):
        frames = [rng.normal(size=(8, 8)) for _ in range(4)]
        flows = [uniform_field((8, 8), 0, 0)] * 3 + [None]
        out = build_ipwe(frames, flows)
        np.testing.assert_allclose(out.map, np.mean(frames, axis=0), atol=1e-12)

    def test_window_matches_frame_count(self):
        with pytest.raises(CmaxError):
            build_ipwe([np.zeros((4, 4))], [])


class TestCmaxLoss:
    def test_constant_map_zero_variance(self):
        loss, adj = cmax_loss(np.full((7, 7), 3.0))
        assert loss == 0.0
        np.testing.assert_allclose(adj, 0.0)

    def test_two_level_map(self):
        grid = np.zeros((4, 8))
        grid[:, 4:] = 1.0
        loss, _ = cmax_loss(grid)
        assert loss == pytest.approx(-0.25)

    def test_adjoint_formula_matches_fd(self, rng):
        grid = rng.normal(size=(6, 6))
        loss, adj = cmax_loss(grid)
        h = 1e-6
        for idx in [(0, 0), (3, 4), (5, 5)]:
            gp = grid.copy(); gp[idx] += h
            gm = grid.copy(); gm[idx] -= h
            fd = (cmax_loss(gp)[0] - cmax_loss(gm)[0]) / (2 * h)
            assert adj[idx] == pytest.approx(fd, rel=1e-6, abs=1e-12)

    def test_scale_equivariance(self, rng):
        frames = [rng.normal(size=(8, 8)) for _ in range(3)]
        flows = [uniform_field((8, 8), 1.0, 0.5), uniform_field((8, 8), 0.5, 0.25), None]
        base = build_ipwe(frames, flows)
        scaled = build_ipwe([3.0 * f for f in frames], flows)
        np.testing.assert_allclose(scaled.map, 3.0 * base.map, atol=1e-12)
        assert cmax_loss(scaled)[0] == pytest.approx(9.0 * cmax_loss(base)[0], rel=1e-12)

    def test_true_shift_sharper_than_perturbed(self, rng):
        # a translating vertical edge: aligning with the true per-frame shift
        # beats every flow offset of at least one pixel
        width, height, shift = 24, 16, 2.0
        frames = []
        for m in range(4):
            f = np.zeros((height, width))
            edge = 8 + int(m * shift)
            f[:, edge] = 1.0
            frames.append(f)
        # reference is the newest frame (m = 3); older frame m needs flow
        # pulling from its position: x_ref + flow = x_m  ->  flow = -(3-m)*shift
        def ipwe_for(offset):
            flows = []
            for m in range(3):
                flows.append(uniform_field((height, width), -(3 - m) * shift + offset, 0.0))
            flows.append(None)
            return build_ipwe(frames, flows)

        true_var = -cmax_loss(ipwe_for(0.0))[0]
        for off in (-3.0, -1.5, -1.0, 1.0, 1.5, 3.0):
            assert true_var > -cmax_loss(ipwe_for(off))[0]


class TestGradLoss:
    def test_zero_ipwe_zero_flow(self, rng):
        logl = rng.normal(size=(10, 10))
        loss, adj, degenerate = grad_loss(
            np.zeros((10, 10)), logl, uniform_field((10, 10), 0, 0), 0.25
        )
        assert loss == pytest.approx(0.0, abs=1e-15)
        assert not degenerate
        np.testing.assert_allclose(adj, 0.0, atol=1e-12)

    def test_no_valid_pixels_flags_degenerate(self, rng):
        logl = rng.normal(size=(10, 10))
        loss, adj, degenerate = grad_loss(
            np.zeros((10, 10)), logl, uniform_field((10, 10), 0, 0, valid=False), 0.25
        )
        assert degenerate
        assert loss == 0.0

    def test_adjoints_match_fd(self, rng):
        ipwe = rng.normal(size=(12, 12)) * 0.5
        logl = rng.normal(size=(12, 12))
        flow = uniform_field((12, 12), 1.3, -0.7)
        loss, adj, _ = grad_loss(ipwe, logl, flow, 0.25)
        h = 1e-6
        for idx in [(2, 2), (6, 7), (9, 3)]:
            lp = logl.copy(); lp[idx] += h
            lm = logl.copy(); lm[idx] -= h
            fd = (grad_loss(ipwe, lp, flow, 0.25)[0]
                  - grad_loss(ipwe, lm, flow, 0.25)[0]) / (2 * h)
            assert adj[idx] == pytest.approx(fd, rel=1e-3, abs=1e-10)

    def test_contrast_validation(self):
        with pytest.raises(CmaxError):
            grad_loss(np.zeros((4, 4)), np.zeros((4, 4)),
                      uniform_field((4, 4), 0, 0), -1.0)


class TestLegmLoss:
    def test_defaults_weighting(self):
        assert legm_loss(2.0, 3.0) == pytest.approx(0.1 * 2.0 + 0.2 * 3.0)

    def test_zero_weights(self):
        assert legm_loss(5.0, 7.0, 0.0, 0.0) == 0.0

    def test_linearity(self, rng):
        c1, g1 = rng.normal(), rng.normal()
        c2, g2 = rng.normal(), rng.normal()
        lhs = legm_loss(c1 + c2, g1 + g2, 0.3, 0.4)
        rhs = legm_loss(c1, g1, 0.3, 0.4) + legm_loss(c2, g2, 0.3, 0.4)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(CmaxError):
            legm_loss(1.0, 1.0, -0.1, 0.2)
