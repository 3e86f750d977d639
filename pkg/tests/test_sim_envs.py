import numpy as np
import pytest

from qpgp_ilc.errors import ParameterError, ShapeError
from qpgp_ilc.sim_envs import (
    DisturbanceSpec,
    LinearPlant,
    ManipConfig,
    ManipulatorPlant,
    ReferencePath,
    VehicleConfig,
    VehiclePlant,
    gen_circle_ref,
    gen_lissajous_ref,
    gen_raceline,
    lateral_error,
    manip_fk,
    manip_ik,
    manip_jacobian,
    pure_pursuit,
)


class TestRaceline:
    def test_unscaled_start_point_on_positive_x_axis(self):
        # R(0) = 10, so the first point sits on the +x axis.
        path = gen_raceline(64, speed=8.0, dt=0.05)
        assert path.points[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert path.points[0, 0] > 0

    def test_polyline_length_matches_target(self):
        for p, v, dt in [(50, 8.0, 0.05), (200, 8.0, 0.05), (333, 5.0, 0.02)]:
            path = gen_raceline(p, v, dt)
            assert path.polyline_length() == pytest.approx(v * dt * p, rel=1e-9)

    def test_refinement_keeps_shape(self):
        # Fixed total length: doubling p while halving dt refines the same
        # curve, so successive refinements approach each other.
        def hausdorff(x, y):
            d = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)
            return max(d.min(axis=1).max(), d.min(axis=0).max())

        a = gen_raceline(100, 8.0, 0.05)
        b = gen_raceline(200, 8.0, 0.025)
        c = gen_raceline(400, 8.0, 0.0125)
        coarse = hausdorff(a.points, b.points)
        fine = hausdorff(b.points, c.points)
        assert coarse < 0.4  # within one coarse grid step
        assert fine < 0.7 * coarse

    def test_minimum_points(self):
        with pytest.raises(ParameterError):
            gen_raceline(2, 8.0, 0.05)


class TestOtherPaths:
    def test_circle_start(self):
        ref = gen_circle_ref(50)
        np.testing.assert_allclose(ref.points[0], [2.0, 1.0], atol=1e-12)

    def test_lissajous_start(self):
        ref = gen_lissajous_ref(50)
        np.testing.assert_allclose(ref.points[0], [0.29, 0.45], atol=1e-12)

    def test_circle_reachable_by_arm(self):
        ref = gen_circle_ref(100)
        # wrist-convention reachability plus max origin distance well inside
        # the total arm length (computed: 2.3027 < 2.5)
        for x, y in ref.points:
            manip_ik(x, y)
        assert np.linalg.norm(ref.points, axis=1).max() < 2.5

    def test_export_csv(self, tmp_path):
        ref = gen_circle_ref(10)
        out = tmp_path / "ref.csv"
        ref.export_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "index,s,x,y"
        assert len(lines) == 11


class TestPurePursuit:
    def test_target_straight_ahead_gives_zero(self):
        assert pure_pursuit((0.0, 0.0, 0.0), (5.0, 0.0), 0.5) == pytest.approx(0.0)

    def test_quarter_pi_case(self):
        # heading 0, target at (0, 1): alpha = pi/2, delta = atan(2*0.5*1/1)
        assert pure_pursuit((0.0, 0.0, 0.0), (0.0, 1.0), 0.5) == pytest.approx(np.pi / 4)

    def test_sign_convention(self):
        left = pure_pursuit((0.0, 0.0, 0.0), (1.0, 0.5), 0.5)
        right = pure_pursuit((0.0, 0.0, 0.0), (1.0, -0.5), 0.5)
        assert left > 0 > right
        assert left == pytest.approx(-right)

    def test_zero_distance_returns_zero(self):
        assert pure_pursuit((1.0, 1.0, 0.3), (1.0, 1.0), 0.5) == 0.0


class TestLateralError:
    def setup_method(self):
        xs = np.linspace(0.0, 10.0, 21)
        pts = np.column_stack([xs, np.zeros_like(xs)])
        self.line = ReferencePath(points=pts, arc_parameter=xs, closed=False)

    def test_on_reference_point_is_zero(self):
        assert lateral_error((5.0, 0.0), self.line) == pytest.approx(0.0, abs=1e-12)

    def test_offset_along_normal(self):
        # tangent +x, normal +y: a point above the line has positive error
        assert lateral_error((5.0, 0.1), self.line) == pytest.approx(0.1, abs=1e-12)

    def test_sign_flips_under_reflection(self):
        assert lateral_error((5.0, -0.1), self.line) == pytest.approx(-0.1, abs=1e-12)


class TestVehiclePlant:
    def test_exact_tracking_on_straight_line(self):
        p = 40
        cfg = VehicleConfig(
            p=p, speed=8.0, dt=0.05, steering_gain=1.0, bias=0.0,
            drift_slope=0.0, noise_variance=0.0, heading_drift=0.0,
        )
        xs = 8.0 * 0.05 * np.arange(1, p + 1)
        line = ReferencePath(
            points=np.column_stack([xs, np.zeros_like(xs)]),
            arc_parameter=xs, closed=False,
        )
        plant = VehiclePlant(cfg, path=line)
        ro = plant.rollout(plant.initial_input(), seed=0, iteration=1)
        assert np.abs(ro.errors).max() < 1e-6

    def test_first_iteration_error_strictly_positive(self):
        plant = VehiclePlant(VehicleConfig(p=60))
        ro = plant.rollout(plant.initial_input(), seed=3, iteration=1)
        assert np.sqrt(np.mean(ro.errors**2)) > 0.01

    def test_deterministic_given_seed(self):
        plant = VehiclePlant(VehicleConfig(p=50))
        u = plant.initial_input()
        a = plant.rollout(u, seed=7, iteration=2)
        b = plant.rollout(u, seed=7, iteration=2)
        np.testing.assert_array_equal(a.errors, b.errors)

    def test_different_seeds_differ(self):
        plant = VehiclePlant(VehicleConfig(p=50))
        u = plant.initial_input()
        a = plant.rollout(u, seed=7, iteration=2)
        b = plant.rollout(u, seed=8, iteration=2)
        assert not np.array_equal(a.errors, b.errors)

    def test_rejects_bad_shape(self):
        plant = VehiclePlant(VehicleConfig(p=50))
        with pytest.raises(ShapeError):
            plant.rollout(np.zeros((1, 49)), seed=0, iteration=1)


class TestManipKinematics:
    def test_fk_straight_arm(self):
        _, ee = manip_fk((0.0, 0.0, 0.0))
        np.testing.assert_allclose(ee, [2.5, 0.0], atol=1e-12)

    def test_fk_rotated_arm(self):
        _, ee = manip_fk((np.pi / 2, 0.0, 0.0))
        np.testing.assert_allclose(ee, [0.0, 2.5], atol=1e-12)

    def test_fk_bent_arm(self):
        _, ee = manip_fk((np.pi / 2, -np.pi / 2, 0.0))
        np.testing.assert_allclose(ee, [1.5, 1.0], atol=1e-12)

    def test_jacobian_at_zero(self):
        np.testing.assert_allclose(
            manip_jacobian((0.0, 0.0, 0.0)),
            [[0.0, 0.0, 0.0], [2.5, 1.5, 0.5]],
            atol=1e-12,
        )

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        step = 1e-7
        for _ in range(50):
            theta = rng.uniform(-np.pi, np.pi, 3)
            J = manip_jacobian(theta)
            fd = np.empty((2, 3))
            for k in range(3):
                plus, minus = theta.copy(), theta.copy()
                plus[k] += step
                minus[k] -= step
                fd[:, k] = (manip_fk(plus)[1] - manip_fk(minus)[1]) / (2 * step)
            np.testing.assert_allclose(J, fd, atol=1e-6)

    def test_jacobian_periodic(self):
        theta = np.array([0.3, -1.1, 0.7])
        np.testing.assert_allclose(
            manip_jacobian(theta), manip_jacobian(theta + 2 * np.pi), atol=1e-9
        )

    def test_ik_straight_reach(self):
        np.testing.assert_allclose(manip_ik(2.5, 0.0), (0.0, 0.0, 0.0), atol=1e-9)

    def test_ik_round_trip_on_circle(self):
        for x, y in gen_circle_ref(100).points:
            _, ee = manip_fk(manip_ik(x, y))
            assert np.hypot(*(ee - (x, y))) < 1e-9

    def test_ik_elbow_up_branch(self):
        t1, t2, t3 = manip_ik(2.0, 1.0)
        assert 0.0 <= t2 <= np.pi
        _, ee = manip_fk((t1, t2, t3))
        assert np.hypot(*(ee - (2.0, 1.0))) < 1e-9

    def test_ik_unreachable(self):
        with pytest.raises(ParameterError):
            manip_ik(3.5, 0.0)


class TestManipulatorPlant:
    def test_exact_tracking_without_corruption(self):
        cfg = ManipConfig(p=40, noise_sds=(0.0, 0.0, 0.0), bias_scale=0.0)
        plant = ManipulatorPlant(cfg)
        ro = plant.rollout(plant.initial_input(), seed=0, iteration=1)
        assert np.abs(ro.errors).max() < 1e-9

    def test_nominal_bias_gives_positive_error(self):
        plant = ManipulatorPlant(ManipConfig(p=40))
        ro = plant.rollout(plant.initial_input(), seed=0, iteration=1)
        assert np.sqrt(np.mean(ro.errors**2)) > 0.05

    def test_deterministic_given_seed(self):
        plant = ManipulatorPlant(ManipConfig(p=30))
        u = plant.initial_input()
        a = plant.rollout(u, seed=4, iteration=3)
        b = plant.rollout(u, seed=4, iteration=3)
        np.testing.assert_array_equal(a.errors, b.errors)

    def test_disturbance_applies_from_given_iteration(self):
        base = ManipConfig(p=30, noise_sds=(0.0, 0.0, 0.0))
        disturbed = ManipConfig(
            p=30, noise_sds=(0.0, 0.0, 0.0),
            disturbance=DisturbanceSpec(iteration=5, offsets=(0.1, -0.1, 0.05)),
        )
        u = ManipulatorPlant(base).initial_input()
        before = ManipulatorPlant(disturbed).rollout(u, seed=0, iteration=4)
        clean = ManipulatorPlant(base).rollout(u, seed=0, iteration=4)
        np.testing.assert_array_equal(before.errors, clean.errors)
        after = ManipulatorPlant(disturbed).rollout(u, seed=0, iteration=5)
        assert not np.array_equal(after.errors, clean.errors)

    def test_joint_correction_zero_iff_error_zero(self):
        plant = ManipulatorPlant(ManipConfig(p=20))
        u = plant.initial_input()
        zero = plant.error_to_input(np.zeros((2, 20)), u)
        np.testing.assert_array_equal(zero, 0.0)
        nonzero = plant.error_to_input(np.ones((2, 20)) * 0.1, u)
        assert np.all(np.linalg.norm(nonzero, axis=0) > 0)

    def test_lifted_jacobian_blockdiag(self):
        plant = ManipulatorPlant(ManipConfig(p=5))
        u = plant.initial_input()
        G = plant.jacobian_lifted(u)
        assert G.shape == (10, 15)
        from qpgp_ilc.sim_envs import manip_jacobian as mj

        J0 = mj(u[:, 0])
        assert G[0, 0] == pytest.approx(J0[0, 0])
        assert G[5, 0] == pytest.approx(J0[1, 0])  # dimension-major rows


class TestLinearPlant:
    def test_identity_dynamics(self):
        desired = np.array([[1.0, -2.0, 3.0]])
        plant = LinearPlant(desired)
        ro = plant.rollout(np.zeros((1, 3)), seed=0, iteration=1)
        np.testing.assert_array_equal(ro.errors, desired)
        ro = plant.rollout(desired, seed=0, iteration=1)
        np.testing.assert_array_equal(ro.errors, 0.0)

    def test_noise_is_seeded(self):
        desired = np.zeros((1, 4))
        factors = [np.eye(4)]
        plant = LinearPlant(desired, noise_factors=factors)
        a = plant.rollout(np.zeros((1, 4)), seed=1, iteration=2)
        b = plant.rollout(np.zeros((1, 4)), seed=1, iteration=2)
        c = plant.rollout(np.zeros((1, 4)), seed=1, iteration=3)
        np.testing.assert_array_equal(a.errors, b.errors)
        assert not np.array_equal(a.errors, c.errors)
