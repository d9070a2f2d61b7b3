import numpy as np
import pytest

from evsplat.geometry import (
    CameraIntrinsics,
    GeometryError,
    Pose,
    extrapolate_pose,
    flow_from_depth,
    interpolate_trajectory,
    load_tum,
    project,
    relative_pose,
    save_tum,
    se3_exp,
    se3_log,
    unproject,
)

from scenes import make_intrinsics


def random_pose(rng, rot_scale=0.5, trans_scale=1.0):
    xi = np.concatenate(
        [rng.normal(0, trans_scale, 3), rng.normal(0, rot_scale, 3)]
    )
    return se3_exp(xi)


class TestProjection:
    def test_optical_axis(self):
        k = CameraIntrinsics(55.0, 70.0, 160.0, 160.0, 320, 320)
        np.testing.assert_allclose(project(k, np.array([0.0, 0.0, 1.0])), [160, 160])

    def test_closed_form_x(self):
        k = CameraIntrinsics(100.0, 100.0, 160.0, 120.0, 320, 240)
        pix = project(k, np.array([1.0, 0.0, 2.0]))
        assert pix[0] == pytest.approx(210.0)

    def test_unproject_principal_point(self):
        k = make_intrinsics()
        p = unproject(k, np.array([k.cx, k.cy]), 5.0)
        np.testing.assert_allclose(p, [0.0, 0.0, 5.0])

    def test_unproject_closed_form(self):
        k = CameraIntrinsics(100.0, 100.0, 160.0, 120.0, 320, 240)
        p = unproject(k, np.array([260.0, 120.0]), 2.0)
        np.testing.assert_allclose(p, [2.0, 0.0, 2.0])

    def test_round_trip(self, rng):
        k = make_intrinsics(64, 48, 50.0)
        pix = np.column_stack([rng.uniform(0, 63, 20), rng.uniform(0, 47, 20)])
        d = rng.uniform(0.5, 5.0, 20)
        back = project(k, unproject(k, pix, d))
        np.testing.assert_allclose(back, pix, atol=1e-12)

    def test_depth_errors(self):
        k = make_intrinsics()
        with pytest.raises(GeometryError):
            project(k, np.array([0.0, 0.0, -1.0]))
        with pytest.raises(GeometryError):
            unproject(k, np.array([1.0, 1.0]), 0.0)

    def test_intrinsics_validation(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(0.0, 1.0, 16.0, 16.0, 32, 32)
        with pytest.raises(GeometryError):
            CameraIntrinsics(10.0, 10.0, 40.0, 16.0, 32, 32)


class TestPoseGroup:
    def test_relative_pose_identities(self, rng):
        t = random_pose(rng)
        assert relative_pose(t, t).approx_equal(Pose.identity(), 1e-12)
        assert relative_pose(Pose.identity(), t).approx_equal(t, 1e-12)

    def test_relative_pose_chain(self, rng):
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = relative_pose(b, c).compose(relative_pose(a, b))
        np.testing.assert_allclose(lhs.matrix, relative_pose(a, c).matrix, atol=1e-12)

    def test_associativity_and_inverse(self, rng):
        a, b, c = (random_pose(rng) for _ in range(3))
        m1 = a.compose(b.compose(c)).matrix
        m2 = a.compose(b).compose(c).matrix
        np.testing.assert_allclose(m1, m2, atol=1e-9)
        np.testing.assert_allclose(
            a.compose(a.inverse()).matrix, np.eye(4), atol=1e-9
        )

    def test_quaternion_canonicalization(self):
        p = Pose(np.array([-1.0, 0.0, 0.0, 0.0]), np.zeros(3))
        assert p.q[0] >= 0
        assert np.linalg.norm(p.q) == pytest.approx(1.0, abs=1e-12)

    def test_apply_matches_matrix(self, rng):
        t = random_pose(rng)
        pts = rng.normal(size=(7, 3))
        hom = np.concatenate([pts, np.ones((7, 1))], axis=1)
        np.testing.assert_allclose(t.apply(pts), (hom @ t.matrix.T)[:, :3], atol=1e-12)


class TestSe3:
    def test_log_identity(self):
        np.testing.assert_allclose(se3_log(Pose.identity()), np.zeros(6))

    def test_exp_log_round_trip(self, rng):
        for _ in range(20):
            t = random_pose(rng, rot_scale=1.0)
            again = se3_exp(se3_log(t))
            assert again.approx_equal(t, 1e-9)

    def test_pure_z_rotation_quaternion(self):
        theta = 0.8
        t = se3_exp(np.array([0, 0, 0, 0, 0, theta]))
        np.testing.assert_allclose(
            t.q, [np.cos(theta / 2), 0, 0, np.sin(theta / 2)], atol=1e-12
        )
        np.testing.assert_allclose(t.t, np.zeros(3), atol=1e-15)

    def test_log_rejects_pi_rotation(self):
        t = Pose.from_rt(np.diag([-1.0, -1.0, 1.0]), np.zeros(3))
        with pytest.raises(GeometryError):
            se3_log(t)


class TestExtrapolation:
    def test_zero_velocity(self, rng):
        t = random_pose(rng)
        assert extrapolate_pose(t, t).approx_equal(t, 1e-12)

    def test_uniform_translation(self):
        a = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0]))
        b = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 2.0]))
        nxt = extrapolate_pose(a, b)
        np.testing.assert_allclose(nxt.t, [0, 0, 3], atol=1e-12)

    def test_uniform_z_rotation(self):
        def rot(deg):
            return se3_exp(np.array([0, 0, 0, 0, 0, np.radians(deg)]))

        nxt = extrapolate_pose(rot(10), rot(20))
        assert nxt.approx_equal(rot(30), 1e-10)

    def test_exact_for_constant_twist(self, rng):
        xi = rng.normal(0, 0.3, 6)
        poses = [se3_exp(k * xi) for k in range(3)]
        nxt = extrapolate_pose(poses[0], poses[1])
        assert nxt.approx_equal(poses[2], 1e-9)


class TestInterpolation:
    def test_exact_at_knots(self, rng):
        times = [0.0, 1.0, 2.5]
        poses = [random_pose(rng) for _ in times]
        out = interpolate_trajectory(times, poses, times)
        for a, b in zip(out, poses):
            assert a.approx_equal(b, 1e-12)

    def test_translation_midpoint(self):
        a = Pose.identity()
        b = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 2.0]))
        mid = interpolate_trajectory([0, 1], [a, b], [0.5])[0]
        np.testing.assert_allclose(mid.t, [0, 0, 1], atol=1e-12)

    def test_rotation_midpoint(self):
        quarter = se3_exp(np.array([0, 0, 0, 0, 0, np.pi / 2]))
        mid = interpolate_trajectory([0, 1], [Pose.identity(), quarter], [0.5])[0]
        eighth = se3_exp(np.array([0, 0, 0, 0, 0, np.pi / 4]))
        assert mid.approx_equal(eighth, 1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(GeometryError):
            interpolate_trajectory([0, 1], [Pose.identity(), Pose.identity()], [1.5])


class TestFlow:
    def test_identity_gives_zero_flow(self, rng):
        k = make_intrinsics()
        depth = rng.uniform(1.0, 3.0, (32, 32))
        mf = flow_from_depth(k, depth, Pose.identity())
        assert mf.valid.all()
        np.testing.assert_allclose(mf.flow, 0.0, atol=1e-12)

    def test_epipole_fixed_under_z_translation(self):
        k = make_intrinsics()
        depth = np.full((32, 32), 2.0)
        rel = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.5]))
        mf = flow_from_depth(k, depth, rel)
        cyi, cxi = int(k.cy), int(k.cx)
        np.testing.assert_allclose(mf.flow[cyi, cxi], [0.0, 0.0], atol=1e-9)

    def test_plane_translation_closed_form(self):
        # fronto-parallel plane at depth d under camera x-translation t_x:
        # uniform flow (-fx t_x / d, 0) with world-to-camera t_rel = (-t_x, 0, 0)
        k = make_intrinsics(48, 48, 60.0)
        d, tx = 2.0, 0.1
        depth = np.full((48, 48), d)
        rel = Pose(np.array([1.0, 0, 0, 0]), np.array([-tx, 0.0, 0.0]))
        mf = flow_from_depth(k, depth, rel)
        np.testing.assert_allclose(mf.flow[..., 0], -k.fx * tx / d, atol=1e-9)
        np.testing.assert_allclose(mf.flow[..., 1], 0.0, atol=1e-9)

    def test_shallow_depth_masked(self):
        k = make_intrinsics()
        depth = np.full((32, 32), 2.0)
        depth[3, 4] = 0.0
        mf = flow_from_depth(k, depth, Pose.identity())
        assert not mf.valid[3, 4]
        np.testing.assert_allclose(mf.flow[3, 4], 0.0)

    def test_coverage_mask(self):
        k = make_intrinsics()
        depth = np.full((32, 32), 2.0)
        coverage = np.ones((32, 32))
        coverage[:16] = 0.2
        mf = flow_from_depth(k, depth, Pose.identity(), coverage=coverage)
        assert not mf.valid[:16].any()
        assert mf.valid[16:].all()

    def test_cycle_consistency(self, rng):
        # warp grid forward then back with the flow of the inverse motion
        k = make_intrinsics(48, 48, 60.0)
        ys, xs = np.meshgrid(np.arange(48.0), np.arange(48.0), indexing="ij")
        depth = 2.0 + 0.3 * np.sin(xs / 9.0) * np.cos(ys / 11.0)
        rel = se3_exp(np.array([0.02, -0.015, 0.01, 0.004, -0.003, 0.002]))
        fwd = flow_from_depth(k, depth, rel)

        pix = np.stack([xs, ys], axis=-1)
        moved = pix + fwd.flow
        # depth seen from the target camera, sampled at the moved locations
        pts = np.stack(
            [(xs - k.cx) / k.fx * depth, (ys - k.cy) / k.fy * depth, depth], axis=-1
        )
        cam_b = pts.reshape(-1, 3) @ rel.rotation.T + rel.t
        depth_b = np.full_like(depth, np.nan)
        ui = np.rint(moved[..., 0]).astype(int).ravel()
        vi = np.rint(moved[..., 1]).astype(int).ravel()
        ok = (ui >= 0) & (ui < 48) & (vi >= 0) & (vi < 48)
        zb = cam_b[:, 2]
        db = np.full((48, 48), 2.0)
        db[vi[ok], ui[ok]] = zb[ok]
        back = flow_from_depth(k, db, rel.inverse())

        from scipy.ndimage import map_coordinates

        bx = map_coordinates(back.flow[..., 0], [moved[..., 1], moved[..., 0]], order=1)
        by = map_coordinates(back.flow[..., 1], [moved[..., 1], moved[..., 0]], order=1)
        cycle = moved + np.stack([bx, by], axis=-1) - pix
        interior = fwd.valid.copy()
        interior[:6] = interior[-6:] = False
        interior[:, :6] = interior[:, -6:] = False
        assert np.abs(cycle[interior]).max() < 0.05


class TestTumFormat:
    def test_round_trip(self, tmp_path, rng):
        times = np.array([0.0, 0.5, 1.25])
        poses = [random_pose(rng) for _ in times]
        path = tmp_path / "traj.tum"
        save_tum(path, times, poses)
        t2, p2 = load_tum(path)
        np.testing.assert_allclose(t2, times)
        for a, b in zip(poses, p2):
            assert a.approx_equal(b, 1e-12)

    def test_rejects_malformed(self, tmp_path):
        path = tmp_path / "bad.tum"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(GeometryError):
            load_tum(path)
