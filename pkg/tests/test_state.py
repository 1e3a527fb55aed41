import numpy as np
import pytest
from hypothesis import given, strategies as st

from tissuemanip.state import (
    ControlInput,
    DimensionError,
    Experience,
    FeatureObservation,
    ImagePoint,
    Rect,
    TaskSpec,
    apply_input,
    mpc_cost,
    positioning_error,
)


def obs(points, grippers=((10.0, 10.0), (20.0, 20.0)), t=0.0):
    return FeatureObservation(
        tuple(ImagePoint(*p) for p in points),
        tuple(ImagePoint(*g) for g in grippers),
        t,
    )


def task(points, threshold=50.0):
    return TaskSpec(tuple(ImagePoint(*p) for p in points), threshold, 644, 482)


class TestPositioningError:
    def test_zero_at_targets(self):
        pts = [(100.0, 100.0), (200.0, 100.0), (100.0, 200.0), (200.0, 200.0)]
        assert positioning_error(obs(pts), task(pts)) == 0.0

    def test_three_four_five(self):
        desired = [(100.0, 100.0), (200.0, 100.0)]
        actual = [(103.0, 104.0), (200.0, 100.0)]
        assert positioning_error(obs(actual), task(desired)) == pytest.approx(5.0)

    def test_hand_summed_distances(self):
        # two points each offset by (0, 10): 10 + 10 = 20
        desired = [(50.0, 50.0), (80.0, 50.0)]
        actual = [(50.0, 60.0), (80.0, 60.0)]
        assert positioning_error(obs(actual), task(desired)) == pytest.approx(20.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            positioning_error(obs([(1.0, 1.0)]), task([(1.0, 1.0), (2.0, 2.0)]))

    @given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500)), min_size=1, max_size=6))
    def test_non_negative(self, pts):
        t = task([(0.0, 0.0)] * len(pts))
        assert positioning_error(obs(pts), t) >= 0.0

    @given(
        st.tuples(st.floats(-300, 300), st.floats(-300, 300)),
        st.tuples(st.floats(-300, 300), st.floats(-300, 300)),
        st.floats(0.01, 0.99),
    )
    def test_moving_toward_target_decreases(self, p, d, frac):
        if p == d:
            return
        t = task([d])
        before = positioning_error(obs([p]), t)
        moved = (p[0] + frac * (d[0] - p[0]), p[1] + frac * (d[1] - p[1]))
        after = positioning_error(obs([moved]), t)
        assert after < before


class TestMpcCost:
    def test_zero_residual(self):
        t = task([(10.0, 20.0), (30.0, 40.0)])
        assert mpc_cost(np.array([10.0, 20.0, 30.0, 40.0]), t) == 0.0

    def test_single_coordinate(self):
        t = task([(10.0, 20.0)])
        assert mpc_cost(np.array([15.0, 20.0]), t) == pytest.approx(25.0)

    def test_three_four_offsets(self):
        t = task([(0.0, 0.0)])
        assert mpc_cost(np.array([3.0, 4.0]), t) == pytest.approx(25.0)

    def test_batched(self):
        t = task([(0.0, 0.0)])
        batch = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(mpc_cost(batch, t), [25.0, 0.0, 1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            mpc_cost(np.zeros(6), task([(0.0, 0.0)]))

    @given(st.lists(st.tuples(st.floats(-200, 200), st.floats(-200, 200)), min_size=1, max_size=4))
    def test_zero_cost_iff_zero_error(self, pts):
        t = task(pts)
        flat = np.array([c for p in pts for c in p])
        assert mpc_cost(flat, t) == 0.0
        assert positioning_error(obs(pts), t) == 0.0


class TestApplyInput:
    WS = [Rect(0.0, 0.0, 100.0, 100.0), Rect(100.0, 0.0, 200.0, 100.0)]

    def test_zero_input(self):
        g = np.array([50.0, 50.0, 150.0, 50.0])
        np.testing.assert_array_equal(apply_input(g, ControlInput((0.0,) * 4), self.WS), g)

    def test_direct_move(self):
        g = np.array([50.0, 50.0, 150.0, 50.0])
        out = apply_input(g, ControlInput((5.0, 0.0, 0.0, -3.0)), self.WS)
        np.testing.assert_allclose(out, [55.0, 50.0, 150.0, 47.0])

    def test_clamp_at_edge(self):
        # gripper 1 is 2 px from its right workspace edge
        g = np.array([98.0, 50.0, 150.0, 50.0])
        out = apply_input(g, ControlInput((5.0, 0.0, 0.0, 0.0)), self.WS)
        np.testing.assert_allclose(out, [100.0, 50.0, 150.0, 50.0])

    def test_idempotent_at_boundary(self):
        g = np.array([100.0, 50.0, 200.0, 100.0])
        push = ControlInput((5.0, 0.0, 5.0, 5.0))
        once = apply_input(g, push, self.WS)
        twice = apply_input(once, push, self.WS)
        np.testing.assert_array_equal(once, twice)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            apply_input(np.zeros(2), ControlInput((1.0, 1.0)), self.WS)


class TestTypes:
    def test_image_point_rejects_nan(self):
        with pytest.raises(ValueError):
            ImagePoint(float("nan"), 0.0)

    def test_control_input_zero(self):
        z = ControlInput.zero(2)
        assert z.displacements == (0.0, 0.0, 0.0, 0.0)
        assert z.m == 2

    def test_task_requires_positive_threshold(self):
        with pytest.raises(ValueError):
            TaskSpec((ImagePoint(0, 0),), 0.0, 10, 10)

    def test_experience_validates_dims(self):
        with pytest.raises(DimensionError):
            Experience((1.0, 2.0), (1.0, 2.0), (1.0,), (0.0, 0.0))
        with pytest.raises(ValueError):
            Experience((float("inf"), 2.0), (1.0, 2.0), (1.0, 2.0), (0.0, 0.0))

    def test_observation_vectors_roundtrip(self):
        o = obs([(1.0, 2.0), (3.0, 4.0)])
        o2 = FeatureObservation.from_vectors(o.tissue_vector(), o.gripper_vector(), o.timestamp)
        assert o2 == o

    def test_rect_rejects_degenerate(self):
        with pytest.raises(ValueError):
            Rect(10.0, 0.0, 0.0, 10.0)
