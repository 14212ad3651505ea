import math

import numpy as np
import pytest

from pdmkin import (
    BaselineModel,
    BodyVelocity,
    EventKind,
    KinematicMap,
    Side,
    TerrainModel,
    Termination,
    UnreachableVelocityError,
    baseline_velocity,
    flipper_preset,
    initial_pose,
    invert_full_model,
    invert_velocity,
    predict,
    simulate,
    step,
)
from pdmkin.simulator import contact_state, phase_rates, turning_radius

FLAT = TerrainModel.flat_smooth()
GROUSERS = TerrainModel.flat_grousers()
STAIRS = TerrainModel.stairs()


@pytest.fixture(scope="module")
def geom():
    return flipper_preset()


@pytest.fixture(scope="module")
def fig5(geom):
    return simulate(initial_pose(geom, STAIRS), (0.32, 0.38), 2.0, geom, STAIRS)


class TestStep:
    def test_straight_flat_step(self, geom):
        pose, v = step(initial_pose(geom, FLAT), (0.5, 0.5), 0.1, geom, FLAT)
        assert (pose.x, pose.y, pose.theta) == pytest.approx((0.05, 0.0, 0.0), abs=1e-8)

    def test_step_along_heading(self, geom):
        pose0 = initial_pose(geom, FLAT, theta=math.pi / 6)
        pose, _ = step(pose0, (0.5, 0.5), 0.1, geom, FLAT)
        assert (pose.x, pose.y) == pytest.approx((0.05 * math.cos(math.pi / 6), 0.025), abs=1e-8)

    def test_turning_rate_matches_solver(self, geom):
        _, v = step(initial_pose(geom, FLAT), (0.5, 0.3), 1e-4, geom, FLAT)
        assert v.thetadot == pytest.approx(predict((0.5, 0.3), geom, FLAT).v_star.thetadot)

    def test_straight_on_stairs_keeps_heading(self, geom):
        pose = initial_pose(geom, STAIRS, theta=0.2)
        for _ in range(20):
            pose, _ = step(pose, (0.3, 0.3), 0.01, geom, STAIRS)
        assert pose.theta == pytest.approx(0.2, abs=1e-9)

    def test_rejects_nonpositive_dt(self, geom):
        with pytest.raises(ValueError):
            step(initial_pose(geom, FLAT), (0.5, 0.5), 0.0, geom, FLAT)

    def test_grouser_belt_travel(self, geom):
        pose0 = initial_pose(geom, GROUSERS)
        pose, _ = step(pose0, (0.3, 0.1), 0.05, geom, GROUSERS)
        assert pose.travel_right - pose0.travel_right == pytest.approx(0.015)
        assert pose.travel_left - pose0.travel_left == pytest.approx(0.005)
        assert 0 <= pose.phase_d_right < geom.grouser_pitch


class TestPhaseRates:
    def test_grousers_ride_the_belt(self, geom):
        pose = initial_pose(geom, GROUSERS)
        assert phase_rates(pose, BodyVelocity(0.2, 0, 0.1), (0.3, 0.1), geom, GROUSERS) == (0.1, 0.3)

    def test_aligned_stairs(self, geom):
        pose = initial_pose(geom, STAIRS)
        left, right = phase_rates(pose, BodyVelocity(0.3, 0.0, 0.1), (0.3, 0.3), geom, STAIRS)
        W = geom.half_spacing
        assert left == pytest.approx(0.3 - W * 0.1)
        assert right == pytest.approx(0.3 + W * 0.1)

    def test_matches_finite_difference(self, geom):
        pose = initial_pose(geom, STAIRS, theta=0.3, x=0.05)
        v, h = BodyVelocity(0.25, 0.01, -0.2), 1e-7
        rates = phase_rates(pose, v, (0.3, 0.3), geom, STAIRS)
        from pdmkin.simulator import advance

        moved = advance(pose, v, (0.3, 0.3), h, geom, STAIRS)
        fd = ((moved.phase_d_left - pose.phase_d_left) / h, (moved.phase_d_right - pose.phase_d_right) / h)
        assert rates == pytest.approx(fd, rel=1e-5)


class TestStairSimulation:
    def test_events_alternate_per_side(self, fig5):
        for side in Side:
            kinds = [e.kind for e in fig5.events if e.side is side]
            assert kinds[0] is EventKind.LOSS
            assert all(a is not b for a, b in zip(kinds, kinds[1:]))

    def test_counts_match_contact_recomputation(self, geom, fig5):
        for sample in fig5.samples:
            assert contact_state(sample.pose, geom, STAIRS).counts == sample.contact_count

    def test_times_strictly_increase(self, fig5):
        assert np.all(np.diff(fig5.times) > 0)

    def test_events_localized(self, geom, fig5):
        # just before an event time the old lip set is still in contact
        samples = {s.t: s for s in fig5.samples}
        for event in fig5.events[2:6]:
            sample = samples[event.t]
            lines = contact_state(sample.pose, geom, STAIRS).lines(event.side)
            if event.kind is EventKind.GAIN:
                assert max(c.position for c in lines) == pytest.approx(geom.half_length, abs=2e-6)
            else:
                assert min(c.position for c in lines) > -geom.half_length

    def test_refinement_converges(self, geom, fig5):
        fine = simulate(initial_pose(geom, STAIRS), (0.32, 0.38), 2.0, geom, STAIRS, dt_max=0.005)
        a, b = fig5.final.pose, fine.final.pose
        assert math.hypot(a.x - b.x, a.y - b.y) < 0.01 * math.hypot(b.x, b.y)
        assert abs(a.theta - b.theta) < 0.01 * abs(b.theta)

    def test_fewer_contacts_turn_faster(self, geom):
        traj = simulate(initial_pose(geom, STAIRS), (0.2, 0.16), 2.5, geom, STAIRS)
        by_count = {}
        for s in traj.samples[1:]:
            by_count.setdefault(sum(s.contact_count), []).append(abs(s.v.thetadot))
        assert min(by_count[4]) > max(by_count[5])

    def test_halts_with_partial_trajectory(self, geom):
        sparse = TerrainModel.stairs(stair_spacing=0.25)
        traj = simulate(initial_pose(geom, sparse), (0.3, 0.3), 1.0, geom, sparse)
        assert traj.termination is Termination.HALTED
        assert "statics infeasible" in traj.halt_reason
        assert len(traj.samples) >= 1

    def test_climbed_termination(self, geom):
        short = TerrainModel.stairs(stair_count=2)
        traj = simulate(initial_pose(geom, short), (0.3, 0.3), 10.0, geom, short)
        assert traj.termination is Termination.CLIMBED
        assert traj.final.pose.x == pytest.approx(short.staircase_length)

    def test_turned_termination_on_flat_ground(self, geom):
        traj = simulate(initial_pose(geom, FLAT), (0.3, -0.3), 5.0, geom, FLAT, dt_max=0.05)
        assert traj.termination is Termination.TURNED
        assert traj.final.pose.theta == pytest.approx(math.pi / 2)
        assert traj.turned


class TestFlatSimulation:
    def test_straight_line(self, geom):
        traj = simulate(initial_pose(geom, FLAT), (0.4, 0.4), 1.0, geom, FLAT)
        assert traj.final.pose.x == pytest.approx(0.4, abs=1e-7)
        assert traj.final.t == pytest.approx(1.0)

    def test_piecewise_schedule(self, geom):
        schedule = [(0.0, (0.2, 0.2)), (0.5, (0.4, 0.4))]
        traj = simulate(initial_pose(geom, FLAT), schedule, 1.0, geom, FLAT, dt_max=0.03)
        assert 0.5 in set(np.round(traj.times, 12))
        assert traj.final.pose.x == pytest.approx(0.3, abs=1e-6)

    def test_grouser_events_keep_counts_bounded(self, geom):
        traj = simulate(initial_pose(geom, GROUSERS), (0.2, 0.1), 0.5, geom, GROUSERS, dt_max=0.02)
        assert traj.events
        for s in traj.samples:
            assert s.contact_count[0] in (10, 11) and s.contact_count[1] in (10, 11)

    def test_rejects_bad_arguments(self, geom):
        with pytest.raises(ValueError):
            simulate(initial_pose(geom, FLAT), (0.1, 0.1), 0.0, geom, FLAT)


class TestBaselines:
    @pytest.mark.parametrize(
        "model, expected", [("DiffDrive", 0.476), ("Tuned", 0.274), ("PdmLinear", 0.254)]
    )
    def test_forward_maps(self, model, expected):
        assert baseline_velocity((0.5, 0.3), model) == pytest.approx((0.4, 0.0, expected))

    @pytest.mark.parametrize("model", list(BaselineModel))
    def test_equal_speeds_drive_straight(self, model):
        assert baseline_velocity((0.3, 0.3), model) == pytest.approx((0.3, 0.0, 0.0))

    def test_custom_coefficient(self):
        assert baseline_velocity((0.5, 0.3), BaselineModel.TUNED, coeff=2.0).thetadot == pytest.approx(0.4)

    def test_inverse_of_pdm_linear(self):
        u = invert_velocity((0.5, 0.0, -0.5), "PdmLinear")
        assert u == pytest.approx((0.5 - 0.25 / 1.27, 0.5 + 0.25 / 1.27))

    def test_pure_spin(self):
        c = 1.8
        u = invert_velocity((0.0, 0.0, 0.9), KinematicMap(np.array([[0.5, 0.5], [0, 0], [c, -c]])))
        assert u == pytest.approx((0.9 / (2 * c), -0.9 / (2 * c)))

    def test_straight(self):
        assert invert_velocity((0.3, 0.0, 0.0), "DiffDrive") == pytest.approx((0.3, 0.3))

    def test_lateral_velocity_unreachable(self):
        with pytest.raises(UnreachableVelocityError, match="unreachable velocity"):
            invert_velocity((0.3, 0.1, 0.0), "DiffDrive")

    def test_composition_under_full_model(self, geom):
        # commanding with coefficient c under physics with coefficient C scales the turn by C / c
        C = predict((0.5, 0.3), geom, GROUSERS).v_star.thetadot / 0.2
        u = invert_velocity((0.5, 0.0, -0.5), "DiffDrive")
        achieved = predict(u, geom, GROUSERS).v_star.thetadot
        assert achieved == pytest.approx(-0.5 * C / 2.38, rel=1e-6)

    def test_full_model_inverse(self, geom):
        u = invert_full_model((0.5, 0.0, -0.5), geom, GROUSERS)
        v = predict(u, geom, GROUSERS).v_star
        assert (v.xdot, v.thetadot) == pytest.approx((0.5, -0.5), abs=1e-8)

    def test_turning_radius(self):
        assert turning_radius(BodyVelocity(0.5, 0.0, -0.5)) == pytest.approx(1.0)
        assert turning_radius(BodyVelocity(0.5, 0.0, 0.0)) == math.inf
