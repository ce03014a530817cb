"""Keplerian circular-orbit propagation, ground-station motion and visibility predicates.

Positions are Earth-centered inertial, in km. Every function that takes a time
accepts a scalar or a numpy array of times and broadcasts accordingly.
"""

import math

import numpy as np
from scipy.optimize import brentq

from .config import ConstellationConfig, GroundStationConfig, OrbitalPSConfig, PSDescriptor, SatelliteId
from .errors import DomainError

R_EARTH = 6371.0  # km
MU_EARTH = 3.98e14  # m^3/s^2
OMEGA_EARTH = 7.2921159e-5  # rad/s
THERMOSPHERE_ALT = 80.0  # km, lowest altitude a line of sight may cross
SIDEREAL_DAY = 2 * math.pi / OMEGA_EARTH


def orbital_period(altitude: float) -> float:
    """Period in seconds of a circular orbit at ``altitude`` km."""
    if not math.isfinite(altitude) or altitude <= -R_EARTH:
        raise DomainError(f"altitude must be finite and > -r_E, got {altitude}")
    a = (R_EARTH + altitude) * 1e3
    return 2 * math.pi * math.sqrt(a**3 / MU_EARTH)


def mean_motion(altitude: float) -> float:
    """Angular rate in rad/s of a circular orbit at ``altitude`` km."""
    return 2 * math.pi / orbital_period(altitude)


def _circular_orbit(altitude, inclination_deg, raan_deg, anomaly0_deg, t):
    r = R_EARTH + altitude
    inc = math.radians(inclination_deg)
    raan = math.radians(raan_deg)
    u = math.radians(anomaly0_deg) + mean_motion(altitude) * np.asarray(t, dtype=float)
    cos_u, sin_u = np.cos(u), np.sin(u)
    x = r * (math.cos(raan) * cos_u - math.sin(raan) * math.cos(inc) * sin_u)
    y = r * (math.sin(raan) * cos_u + math.cos(raan) * math.cos(inc) * sin_u)
    z = r * math.sin(inc) * sin_u
    return np.stack([x, y, z], axis=-1)


def satellite_anomaly0(cfg: ConstellationConfig, sat: SatelliteId) -> float:
    """Argument of latitude at t=0 in degrees.

    Slot i trails slot i-1 by ``slot_step``; planes are phased by the Walker
    offset 360*f*(p-1)/(P*K_p).
    """
    walker = 360.0 * cfg.phasing * (sat.plane - 1) / (cfg.num_planes * cfg.sats_per_plane)
    return -cfg.slot_step * (sat.slot - 1) + walker + cfg.phase_offset


def _check_id(cfg: ConstellationConfig, sat: SatelliteId) -> None:
    if not (1 <= sat.plane <= cfg.num_planes and 1 <= sat.slot <= cfg.sats_per_plane):
        raise DomainError(f"{sat} is not part of a {cfg.num_planes}x{cfg.sats_per_plane} constellation")


def satellite_position(cfg: ConstellationConfig, sat: SatelliteId, t) -> np.ndarray:
    _check_id(cfg, sat)
    raan = cfg.raan_step * (sat.plane - 1)
    return _circular_orbit(cfg.altitude, cfg.inclination, raan, satellite_anomaly0(cfg, sat), t)


def plane_positions(cfg: ConstellationConfig, plane: int, t: float) -> np.ndarray:
    """(K_p, 3) positions of every satellite of one plane at time t."""
    return np.stack([satellite_position(cfg, s, t) for s in cfg.plane_satellites(plane)])


def ground_station_position(gs: GroundStationConfig, t) -> np.ndarray:
    r = R_EARTH + gs.altitude
    lat = math.radians(gs.latitude)
    theta = math.radians(gs.longitude) + OMEGA_EARTH * np.asarray(t, dtype=float)
    return np.stack(
        [r * math.cos(lat) * np.cos(theta), r * math.cos(lat) * np.sin(theta), r * math.sin(lat) * np.ones_like(theta)],
        axis=-1,
    )


def ps_position(ps: PSDescriptor, t) -> np.ndarray:
    if isinstance(ps, GroundStationConfig):
        return ground_station_position(ps, t)
    return _circular_orbit(ps.altitude, ps.inclination, ps.raan, ps.phase, t)


def elevation(sat_pos: np.ndarray, gs_pos: np.ndarray) -> np.ndarray:
    """Elevation in degrees of the satellite above the ground station's local horizon."""
    rel = np.asarray(sat_pos, dtype=float) - np.asarray(gs_pos, dtype=float)
    up = gs_pos / np.linalg.norm(gs_pos, axis=-1, keepdims=True)
    sin_el = np.sum(rel * up, axis=-1) / np.linalg.norm(rel, axis=-1)
    return np.degrees(np.arcsin(np.clip(sin_el, -1.0, 1.0)))


def is_visible_gs(sat_pos: np.ndarray, gs_pos: np.ndarray, min_elevation: float):
    return elevation(sat_pos, gs_pos) >= min_elevation


def max_slant_range(h1: float, h2: float) -> float:
    """Longest line of sight between two altitudes that stays above the thermosphere."""
    if h1 <= THERMOSPHERE_ALT or h2 <= THERMOSPHERE_ALT:
        raise DomainError(f"altitudes must exceed {THERMOSPHERE_ALT} km, got {h1} and {h2}")
    r_t = R_EARTH + THERMOSPHERE_ALT
    return math.sqrt((h1 + R_EARTH) ** 2 - r_t**2) + math.sqrt((h2 + R_EARTH) ** 2 - r_t**2)


def isl_distance(cfg: ConstellationConfig) -> float:
    """Chord between adjacent satellites of one plane in km (constant over time)."""
    return 2 * (R_EARTH + cfg.altitude) * math.sin(math.radians(cfg.slot_step) / 2)


def isl_feasible(cfg: ConstellationConfig, id1: SatelliteId, id2: SatelliteId, t: float) -> bool:
    if id1 == id2:
        raise DomainError("isl_feasible needs two distinct satellites")
    d = np.linalg.norm(satellite_position(cfg, id1, t) - satellite_position(cfg, id2, t))
    return bool(d <= max_slant_range(cfg.altitude, cfg.altitude))


def visibility_margin(cfg: ConstellationConfig, sat: SatelliteId, ps: PSDescriptor, t):
    """Signed margin that is >= 0 exactly when the satellite can talk to the PS.

    Degrees above the minimum elevation for a ground station, km of slack
    below the slant-range threshold for a PS satellite.
    """
    pos = satellite_position(cfg, sat, t)
    ps_pos = ps_position(ps, t)
    if isinstance(ps, GroundStationConfig):
        return elevation(pos, ps_pos) - ps.min_elevation
    limit = max_slant_range(cfg.altitude, ps.altitude)
    return limit - np.linalg.norm(pos - ps_pos, axis=-1)


def contact_windows(
    cfg: ConstellationConfig,
    sat: SatelliteId,
    ps: PSDescriptor,
    t_start: float,
    t_end: float,
    step: float = 1.0,
    tol: float = 1e-3,
) -> list[tuple[float, float]]:
    """All maximal visibility intervals inside [t_start, t_end].

    A coarse grid locates sign changes of the visibility margin, each boundary
    is then refined with Brent's method to ``tol`` seconds. Windows in
    progress at either end are clipped to the range.
    """
    if t_end <= t_start:
        return []
    n = int(math.ceil((t_end - t_start) / step))
    grid = np.minimum(t_start + step * np.arange(n + 1), t_end)
    visible = np.asarray(visibility_margin(cfg, sat, ps, grid)) >= 0

    def margin(t: float) -> float:
        return float(visibility_margin(cfg, sat, ps, t))

    windows = []
    begin = t_start if visible[0] else None
    for j in np.flatnonzero(visible[1:] != visible[:-1]):
        boundary = brentq(margin, grid[j], grid[j + 1], xtol=tol)
        if visible[j]:
            windows.append((begin, boundary))
            begin = None
        else:
            begin = boundary
    if begin is not None:
        windows.append((begin, t_end))
    return windows


def next_contact_window(
    cfg: ConstellationConfig,
    sat: SatelliteId,
    ps: PSDescriptor,
    t_start: float,
    horizon: float,
) -> tuple[float, float] | None:
    """Earliest contact window within [t_start, t_start + horizon], or None."""
    if not horizon > 0:
        raise DomainError(f"horizon must be > 0, got {horizon}")
    windows = contact_windows(cfg, sat, ps, t_start, t_start + horizon)
    return windows[0] if windows else None
