import pytest

from fedisl.config import SatelliteId
from fedisl.contacts import ContactPlan, ContactWindow
from fedisl.errors import DomainError
from fedisl.orbital import contact_windows, orbital_period

SAT1, SAT2 = SatelliteId(1, 1), SatelliteId(1, 2)


def test_window_usable_from():
    w = ContactWindow(SAT1, 10.0, 20.0)
    assert w.usable_from(5.0, 5.0) == 10.0
    assert w.usable_from(15.0, 5.0) == 15.0
    assert w.usable_from(16.0, 5.0) is None
    assert w.remaining(12.0) == 8.0
    assert w.contains(10.0) and not w.contains(20.0)


@pytest.fixture
def plan(intro_constellation, equator_gs):
    return ContactPlan(intro_constellation, equator_gs, horizon=3600.0)


def test_windows_match_direct_computation(plan, intro_constellation, equator_gs):
    T = orbital_period(intro_constellation.altitude)
    direct = contact_windows(intro_constellation, SAT2, equator_gs, 0.0, 3 * T)
    cached = plan.windows(SAT2, 0.0, 3 * T)
    assert len(cached) == len(direct)
    for w, (begin, end) in zip(cached, direct):
        assert w.begin == pytest.approx(begin, abs=1e-2)
        if end < 3 * T:
            assert w.end == pytest.approx(end, abs=1e-2)


def test_window_at_and_next_window(plan):
    assert plan.window_at(SAT1, 0.0) is not None
    assert plan.visible(SAT1, 0.0)
    nxt = plan.next_window(SAT1, 600.0)
    assert nxt.begin > 600.0
    # a window in progress is returned as is
    current = plan.window_at(SAT2, 600.0)
    assert current is not None and plan.next_window(SAT2, 600.0) == current


def test_first_usable_skips_windows_that_are_too_short(plan):
    w, start = plan.first_usable(SAT1, 0.0, 100.0)
    assert start == 0.0 and w.end >= 100.0
    w, start = plan.first_usable(SAT1, w.end - 50.0, 100.0)
    assert w.begin > 300.0 and start == w.begin
    assert plan.first_usable(SAT1, 0.0, 5000.0, horizon=86400.0) == (None, None)


def test_coverage_of_a_plane_is_at_least_that_of_a_member(plan, intro_constellation):
    T = orbital_period(intro_constellation.altitude)
    single = plan.coverage([SAT1], 0.0, 2 * T)
    both = plan.coverage([SAT1, SAT2], 0.0, 2 * T)
    assert 0.0 < single <= both < 1.0
    assert plan.coverage([SAT1], 10.0, 10.0) == 0.0


def test_connectivity_frame_columns(plan):
    df = plan.connectivity_frame(0.0, 1200.0, step=60.0)
    assert list(df.columns) == ["t_seconds", "k1.1", "k1.2", "plane1"]
    assert len(df) == 21
    assert df["k1.1"].iloc[0] == 1
    assert (df["plane1"] >= df[["k1.1", "k1.2"]].max(axis=1)).all()


def test_forget_before_bounds_the_cache(plan, intro_constellation, equator_gs):
    T = orbital_period(intro_constellation.altitude)
    plan.windows(SAT1, 0.0, 6 * T)
    before = plan.cached_windows
    assert plan.forget_before(4 * T) > 0
    assert plan.cached_windows < before
    fresh = ContactPlan(intro_constellation, equator_gs, horizon=3600.0)
    assert plan.next_window(SAT1, 4.5 * T) == fresh.next_window(SAT1, 4.5 * T)
    with pytest.raises(DomainError):
        plan.window_at(SAT1, 0.0)
