"""Link-budget arithmetic and the fixed-rate transmission-time model."""

import logging
import math
from dataclasses import dataclass

from .config import (
    ConstellationConfig,
    GroundStationConfig,
    LinkBudgetParams,
    PSDescriptor,
    to_db,
)
from .errors import DomainError, InfeasibleLinkError
from .orbital import R_EARTH, isl_distance, max_slant_range

logger = logging.getLogger(__name__)

C0 = 299_792_458.0  # m/s
K_BOLTZMANN = 1.380649e-23  # J/K


def fspl(distance: float, carrier_freq: float) -> float:
    """Free-space path loss (linear) at ``distance`` metres."""
    if not distance > 0:
        raise DomainError(f"distance must be > 0 m, got {distance}")
    return (4 * math.pi * carrier_freq * distance / C0) ** 2


def fspl_db(distance: float, carrier_freq: float) -> float:
    return to_db(fspl(distance, carrier_freq))


def snr(params: LinkBudgetParams, distance: float) -> float:
    noise = K_BOLTZMANN * params.noise_temp * params.bandwidth
    return params.tx_power * params.tx_gain * params.rx_gain / (noise * fspl(distance, params.carrier_freq))


def link_rate(params: LinkBudgetParams, max_distance: float) -> float:
    """Shannon rate in bit/s at the longest distance the link must support."""
    return params.bandwidth * math.log2(1.0 + snr(params, max_distance))


def transmission_time(size_bits: float, rate: float, distance: float) -> float:
    """Serialization plus propagation delay in seconds (distance in metres)."""
    if not rate > 0:
        raise InfeasibleLinkError(f"link rate must be > 0 bit/s, got {rate}")
    if size_bits < 0:
        raise DomainError(f"size must be >= 0 bits, got {size_bits}")
    return size_bits / rate + distance / C0


def slant_range_at_elevation(altitude: float, min_elevation: float, gs_altitude: float = 0.0) -> float:
    """Ground-station-to-satellite distance in km at elevation ``min_elevation`` degrees."""
    r_gs = R_EARTH + gs_altitude
    r_sat = R_EARTH + altitude
    el = math.radians(min_elevation)
    return -r_gs * math.sin(el) + math.sqrt((r_gs * math.sin(el)) ** 2 + r_sat**2 - r_gs**2)


@dataclass(frozen=True)
class LinkRates:
    isl_rate: float  # bit/s, same for every plane of a single-shell constellation
    ps_rate: float  # bit/s
    isl_distance: float  # m, reference distance the ISL rate was fixed at
    ps_distance: float  # m, reference distance the PS-link rate was fixed at

    def __post_init__(self):
        if self.isl_rate < 0 or self.ps_rate < 0:
            raise DomainError("link rates must be nonnegative")

    def isl_time(self, size_bits: float) -> float:
        return transmission_time(size_bits, self.isl_rate, self.isl_distance)

    def ps_time(self, size_bits: float) -> float:
        return transmission_time(size_bits, self.ps_rate, self.ps_distance)


def ps_reference_distance(constellation: ConstellationConfig, ps: PSDescriptor) -> float:
    """Longest distance (km) over which a satellite and the PS may communicate."""
    if isinstance(ps, GroundStationConfig):
        return slant_range_at_elevation(constellation.altitude, ps.min_elevation, ps.altitude)
    return max_slant_range(constellation.altitude, ps.altitude)


def resolve_link_rates(
    constellation: ConstellationConfig,
    ps: PSDescriptor,
    isl_params: LinkBudgetParams,
    ps_params: LinkBudgetParams,
) -> LinkRates:
    """Fix ISL and PS-link rates at the longest distance each link must cover."""
    d_isl = isl_distance(constellation) * 1e3 if constellation.sats_per_plane > 1 else 0.0
    d_ps = ps_reference_distance(constellation, ps) * 1e3
    # a single-satellite plane has no ISL partner
    isl_rate = link_rate(isl_params, d_isl) if d_isl > 0 else 0.0
    rates = LinkRates(
        isl_rate=isl_rate,
        ps_rate=link_rate(ps_params, d_ps),
        isl_distance=d_isl,
        ps_distance=d_ps,
    )
    logger.info(
        "link rates: ISL %.3g bit/s over %.0f km, PS %.3g bit/s over %.0f km",
        rates.isl_rate, d_isl / 1e3, rates.ps_rate, d_ps / 1e3,
    )
    return rates
