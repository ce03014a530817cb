import math

import numpy as np
import pytest

from fedisl.config import ConstellationConfig, GroundStationConfig, OrbitalPSConfig, SatelliteId
from fedisl.errors import DomainError
from fedisl.orbital import (
    R_EARTH,
    contact_windows,
    elevation,
    isl_distance,
    isl_feasible,
    max_slant_range,
    next_contact_window,
    orbital_period,
    satellite_anomaly0,
    satellite_position,
    visibility_margin,
)


def test_orbital_period_at_550_km_is_about_95_minutes():
    assert 95.0 <= orbital_period(550.0) / 60 <= 96.5


def test_orbital_period_rejects_non_finite_altitude():
    with pytest.raises(DomainError):
        orbital_period(float("nan"))
    with pytest.raises(DomainError):
        orbital_period(-7000.0)


def test_positions_stay_on_the_orbit_sphere():
    cfg = ConstellationConfig(inclination=53.0, altitude=1200.0, num_planes=3, sats_per_plane=4)
    times = np.linspace(0.0, 20000.0, 50)
    for sat in cfg.satellites():
        radii = np.linalg.norm(satellite_position(cfg, sat, times), axis=-1)
        np.testing.assert_allclose(radii, R_EARTH + 1200.0, rtol=1e-12)


def test_position_returns_to_start_after_one_period():
    cfg = ConstellationConfig(inclination=85.0, altitude=2000.0, num_planes=1, sats_per_plane=4)
    sat = SatelliteId(1, 3)
    T = orbital_period(cfg.altitude)
    np.testing.assert_allclose(satellite_position(cfg, sat, T), satellite_position(cfg, sat, 0.0), atol=1e-6)


def test_slot_i_plus_one_trails_slot_i():
    cfg = ConstellationConfig(num_planes=1, sats_per_plane=8)
    assert satellite_anomaly0(cfg, SatelliteId(1, 2)) == pytest.approx(satellite_anomaly0(cfg, SatelliteId(1, 1)) - 45.0)


def test_unknown_satellite_is_a_domain_error():
    cfg = ConstellationConfig(num_planes=1, sats_per_plane=4)
    with pytest.raises(DomainError):
        satellite_position(cfg, SatelliteId(2, 1), 0.0)


def test_elevation_overhead_is_ninety_degrees():
    gs = np.array([R_EARTH, 0.0, 0.0])
    sat = np.array([R_EARTH + 550.0, 0.0, 0.0])
    assert elevation(sat, gs) == pytest.approx(90.0)


def test_max_slant_range_formula():
    r_t = R_EARTH + 80.0
    expected = 2 * math.sqrt((R_EARTH + 2000.0) ** 2 - r_t**2)
    assert max_slant_range(2000.0, 2000.0) == pytest.approx(expected)
    with pytest.raises(DomainError):
        max_slant_range(50.0, 2000.0)


def test_isl_distance_is_the_chord_between_slots():
    cfg = ConstellationConfig(altitude=2000.0, num_planes=1, sats_per_plane=4)
    assert isl_distance(cfg) == pytest.approx(2 * (R_EARTH + 2000.0) * math.sin(math.radians(45.0)))


def test_isl_feasibility():
    dense = ConstellationConfig(altitude=2000.0, num_planes=1, sats_per_plane=40)
    assert isl_feasible(dense, SatelliteId(1, 1), SatelliteId(1, 2), 100.0)
    # opposite sides of the Earth
    sparse = ConstellationConfig(altitude=550.0, num_planes=1, sats_per_plane=2)
    assert not isl_feasible(sparse, SatelliteId(1, 1), SatelliteId(1, 2), 0.0)
    with pytest.raises(DomainError):
        isl_feasible(dense, SatelliteId(1, 1), SatelliteId(1, 1), 0.0)


def test_overhead_pass_at_550_km_lasts_under_ten_minutes(intro_constellation, equator_gs):
    T = orbital_period(intro_constellation.altitude)
    windows = contact_windows(intro_constellation, SatelliteId(1, 2), equator_gs, 0.0, 2 * T)
    full = [(b, e) for b, e in windows if b > 0.0 and e < 2 * T]
    assert full
    for begin, end in full:
        assert 0.0 < end - begin < 600.0


def test_window_boundaries_sit_on_the_elevation_mask(intro_constellation, equator_gs):
    sat = SatelliteId(1, 2)
    begin, end = next_contact_window(intro_constellation, sat, equator_gs, 0.0, 3600.0)
    for t in (begin, end):
        assert float(visibility_margin(intro_constellation, sat, equator_gs, t)) == pytest.approx(0.0, abs=1e-3)


def test_window_in_progress_at_start_is_clipped(intro_constellation, equator_gs):
    begin, _ = contact_windows(intro_constellation, SatelliteId(1, 1), equator_gs, 0.0, 3600.0)[0]
    assert begin == 0.0


def test_next_contact_window_none_when_never_visible():
    cfg = ConstellationConfig(inclination=0.0, altitude=550.0, num_planes=1, sats_per_plane=1)
    polar = GroundStationConfig(latitude=80.0, longitude=0.0)
    assert next_contact_window(cfg, SatelliteId(1, 1), polar, 0.0, 7200.0) is None
    with pytest.raises(DomainError):
        next_contact_window(cfg, SatelliteId(1, 1), polar, 0.0, 0.0)


def test_orbital_ps_visibility_uses_the_slant_range_threshold():
    cfg = ConstellationConfig(inclination=0.0, altitude=2000.0, num_planes=1, sats_per_plane=1)
    # co-located in phase, 1500 km apart in altitude
    ps = OrbitalPSConfig(altitude=500.0, inclination=0.0)
    assert float(visibility_margin(cfg, SatelliteId(1, 1), ps, 0.0)) > 0
