import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsurv.grid import (
    DiscretizedTarget,
    InvalidRecordError,
    SurvivalRecord,
    TimeGrid,
    discretize,
    discretize_dataset,
)


def target(record_time, event, grid):
    return discretize(SurvivalRecord(np.zeros(1), record_time, event), grid)


class TestTimeGrid:
    def test_monthly(self):
        grid = TimeGrid.monthly(4)
        assert grid.boundaries == (0.0, 1.0, 2.0, 3.0, 4.0)
        assert grid.n_intervals == 4
        assert grid.horizon == 4.0

    def test_midpoints(self):
        np.testing.assert_allclose(
            TimeGrid.monthly(4).midpoints(), [0.5, 1.5, 2.5, 3.5]
        )

    @pytest.mark.parametrize(
        "boundaries", [(1.0, 2.0), (0.0,), (0.0, 2.0, 1.0), (0.0, 1.0, 1.0)]
    )
    def test_rejects_bad_boundaries(self, boundaries):
        with pytest.raises(ValueError):
            TimeGrid(boundaries)


class TestDiscretize:
    def test_event_mid_interval(self):
        t = target(1.5, 1, TimeGrid.monthly(4))
        assert t.survived.tolist() == [1, 0, 0, 0]
        assert t.failed.tolist() == [0, 1, 0, 0]

    def test_censored_midpoint_rule(self):
        # 2.6 >= 0.5, 1.5, 2.5 but < 3.5
        t = target(2.6, 0, TimeGrid.monthly(4))
        assert t.survived.tolist() == [1, 1, 1, 0]
        assert t.failed.tolist() == [0, 0, 0, 0]

    def test_single_interval_event(self):
        t = target(0.2, 1, TimeGrid.monthly(1))
        assert t.survived.tolist() == [0]
        assert t.failed.tolist() == [1]

    def test_boundary_event_goes_to_following_interval(self):
        t = target(1.0, 1, TimeGrid.monthly(4))
        assert t.survived.tolist() == [1, 0, 0, 0]
        assert t.failed.tolist() == [0, 1, 0, 0]

    def test_event_at_horizon_clamped_into_last_interval(self):
        t = target(4.0, 1, TimeGrid.monthly(4))
        assert t.survived.tolist() == [1, 1, 1, 0]
        assert t.failed.tolist() == [0, 0, 0, 1]

    def test_event_past_horizon_becomes_censored_at_window_end(self):
        t = target(7.3, 1, TimeGrid.monthly(4))
        assert t.survived.tolist() == [1, 1, 1, 1]
        assert t.failed.tolist() == [0, 0, 0, 0]

    def test_negative_time_rejected(self):
        with pytest.raises(InvalidRecordError):
            SurvivalRecord(np.zeros(1), -0.5, 1)

    def test_dataset_matches_per_record(self):
        grid = TimeGrid((0.0, 0.5, 2.0, 3.5))
        rng = np.random.default_rng(0)
        times = rng.uniform(0, 5, 200)
        events = (rng.uniform(size=200) < 0.6).astype(int)
        s, f = discretize_dataset(times, events, grid)
        for i in range(200):
            single = target(times[i], events[i], grid)
            assert s[i].tolist() == single.survived.tolist()
            assert f[i].tolist() == single.failed.tolist()


@settings(max_examples=200, deadline=None)
@given(
    n_intervals=st.integers(1, 8),
    time=st.floats(0.0, 20.0, allow_nan=False),
    event=st.integers(0, 1),
)
def test_structural_invariants(n_intervals, time, event):
    grid = TimeGrid.monthly(n_intervals)
    t = target(time, event, grid)
    t.validate()  # prefix-of-ones, single failure bit, bit placement
    assert t.survived.shape == (n_intervals,)
    if event == 1 and time <= grid.horizon:
        assert t.failed.sum() == 1
    else:
        assert t.failed.sum() == 0


def test_target_validate_rejects_broken_vectors():
    bad = DiscretizedTarget(np.array([1, 0, 1]), np.array([0, 0, 0]))
    with pytest.raises(ValueError):
        bad.validate()
    bad2 = DiscretizedTarget(np.array([1, 1, 0]), np.array([0, 1, 0]))
    with pytest.raises(ValueError):
        bad2.validate()
