import math

import pytest

from fedisl.config import (
    ConstellationConfig,
    GroundStationConfig,
    LinkBudgetParams,
    OrbitalPSConfig,
    dbm_to_watts,
    from_db,
    to_db,
)
from fedisl.errors import DomainError, InfeasibleLinkError
from fedisl.links import (
    C0,
    LinkRates,
    fspl,
    fspl_db,
    link_rate,
    resolve_link_rates,
    slant_range_at_elevation,
    snr,
    transmission_time,
)
from fedisl.orbital import isl_distance, max_slant_range


def test_fspl_closed_form():
    assert fspl(1e6, 20e9) == pytest.approx((4 * math.pi * 20e9 * 1e6 / C0) ** 2)
    # doubling the distance costs 6.02 dB
    assert fspl_db(2e6, 20e9) - fspl_db(1e6, 20e9) == pytest.approx(6.0206, abs=1e-4)


def test_fspl_rejects_nonpositive_distance():
    with pytest.raises(DomainError):
        fspl(0.0, 20e9)


def test_db_helpers():
    assert dbm_to_watts(40.0) == pytest.approx(10.0)
    assert to_db(100.0) == pytest.approx(20.0)
    assert from_db(to_db(2061.0)) == pytest.approx(2061.0)
    assert LinkBudgetParams().tx_gain == pytest.approx(from_db(32.13))


def test_rate_is_shannon_capacity_and_falls_with_distance():
    params = LinkBudgetParams()
    near, far = link_rate(params, 1e6), link_rate(params, 4e6)
    assert near == pytest.approx(params.bandwidth * math.log2(1 + snr(params, 1e6)))
    assert far < near


def test_transmission_time():
    assert transmission_time(1000, 1000.0, 0.0) == pytest.approx(1.0)
    assert transmission_time(0, 1e6, C0) == pytest.approx(1.0)
    with pytest.raises(InfeasibleLinkError):
        transmission_time(1000, 0.0, 1.0)
    with pytest.raises(DomainError):
        transmission_time(-1, 1.0, 1.0)


def test_slant_range_overhead_equals_altitude():
    assert slant_range_at_elevation(550.0, 90.0) == pytest.approx(550.0)
    assert slant_range_at_elevation(550.0, 10.0) > slant_range_at_elevation(550.0, 30.0)


def test_resolve_link_rates_reference_distances():
    cfg = ConstellationConfig(altitude=2000.0, num_planes=1, sats_per_plane=40)
    gs = GroundStationConfig()
    rates = resolve_link_rates(cfg, gs, LinkBudgetParams(), LinkBudgetParams())
    assert rates.isl_distance == pytest.approx(isl_distance(cfg) * 1e3)
    assert rates.ps_distance == pytest.approx(slant_range_at_elevation(2000.0, gs.min_elevation) * 1e3)
    assert rates.isl_time(0) == pytest.approx(rates.isl_distance / C0)

    ps_sat = OrbitalPSConfig()
    orbital = resolve_link_rates(cfg, ps_sat, LinkBudgetParams(), LinkBudgetParams())
    assert orbital.ps_distance == pytest.approx(max_slant_range(2000.0, 500.0) * 1e3)


def test_single_satellite_plane_has_no_isl_rate():
    cfg = ConstellationConfig(num_planes=1, sats_per_plane=1)
    rates = resolve_link_rates(cfg, GroundStationConfig(), LinkBudgetParams(), LinkBudgetParams())
    assert rates.isl_rate == 0.0
    with pytest.raises(InfeasibleLinkError):
        rates.isl_time(100)


def test_negative_rates_are_rejected():
    with pytest.raises(DomainError):
        LinkRates(-1.0, 1.0, 1.0, 1.0)
