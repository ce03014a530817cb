import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass(frozen=True, order=True)
class SatelliteId:
    plane: int  # 1..P
    slot: int  # 1..K_p, neighbours are slot +/- 1 modulo K_p

    def __str__(self) -> str:
        return f"k{self.plane}.{self.slot}"


@dataclass(frozen=True)
class ConstellationConfig:
    inclination: float = 60.0  # degrees
    altitude: float = 2000.0  # km
    num_planes: int = 5
    sats_per_plane: int = 8
    phasing: int = 1  # Walker f
    pattern: str = "delta"  # "delta" spreads RAAN over 360 deg, "star" over 180 deg
    raan_spacing: float | None = None  # degrees, None -> pattern default
    phase_offset: float = 0.0  # degrees added to every satellite's anomaly
    slot_spacing: float | None = None  # degrees between adjacent slots, None -> 360/K_p

    def __post_init__(self):
        # num_planes == 0 is the empty (no-op) constellation
        if self.num_planes < 0:
            raise DomainError(f"num_planes must be >= 0, got {self.num_planes}")
        if self.sats_per_plane < 1:
            raise DomainError(f"sats_per_plane must be >= 1, got {self.sats_per_plane}")
        if not 0.0 <= self.inclination <= 180.0:
            raise DomainError(f"inclination must be in [0, 180], got {self.inclination}")
        if not math.isfinite(self.altitude) or self.altitude <= 0:
            raise DomainError(f"altitude must be > 0 km, got {self.altitude}")
        if self.pattern not in ("delta", "star"):
            raise DomainError(f"pattern must be 'delta' or 'star', got {self.pattern!r}")
        if self.slot_spacing is not None and self.slot_spacing * (self.sats_per_plane - 1) >= 360.0:
            raise DomainError("slot_spacing too large: satellites would wrap around the ring")

    @classmethod
    def from_walker(cls, notation: str, altitude: float, pattern: str = "delta", **kwargs) -> "ConstellationConfig":
        """Build a constellation from Walker notation ``i:t/p/f`` (e.g. ``60:40/5/1``)."""
        m = re.fullmatch(r"\s*([\d.]+)\s*:\s*(\d+)\s*/\s*(\d+)\s*/\s*(\d+)\s*", notation)
        if m is None:
            raise DomainError(f"not a Walker i:t/p/f string: {notation!r}")
        inclination, total, planes, phasing = float(m[1]), int(m[2]), int(m[3]), int(m[4])
        if planes < 1 or total % planes:
            raise DomainError(f"{total} satellites cannot be split evenly over {planes} planes")
        return cls(
            inclination=inclination,
            altitude=altitude,
            num_planes=planes,
            sats_per_plane=total // planes,
            phasing=phasing,
            pattern=pattern,
            **kwargs,
        )

    @property
    def num_satellites(self) -> int:
        return self.num_planes * self.sats_per_plane

    @property
    def raan_step(self) -> float:
        """RAAN difference between adjacent planes in degrees."""
        if self.raan_spacing is not None:
            return self.raan_spacing
        if self.num_planes == 0:
            return 0.0
        spread = 360.0 if self.pattern == "delta" else 180.0
        return spread / self.num_planes

    @property
    def slot_step(self) -> float:
        """Anomaly difference between adjacent slots in degrees."""
        if self.slot_spacing is not None:
            return self.slot_spacing
        return 360.0 / self.sats_per_plane

    def plane_satellites(self, plane: int) -> list[SatelliteId]:
        return [SatelliteId(plane, i) for i in range(1, self.sats_per_plane + 1)]

    def satellites(self) -> list[SatelliteId]:
        return [s for p in range(1, self.num_planes + 1) for s in self.plane_satellites(p)]


@dataclass(frozen=True)
class GroundStationConfig:
    latitude: float = 53.079  # Bremen, Germany
    longitude: float = 8.802
    altitude: float = 0.0  # km
    min_elevation: float = 10.0  # alpha_e, degrees
    name: str = "Bremen"

    def __post_init__(self):
        if abs(self.latitude) > 90.0:
            raise DomainError(f"|latitude| must be <= 90, got {self.latitude}")
        if not 0.0 <= self.min_elevation < 90.0:
            raise DomainError(f"min_elevation must be in [0, 90), got {self.min_elevation}")


@dataclass(frozen=True)
class OrbitalPSConfig:
    """Parameter server hosted on a satellite outside the worker constellation."""

    altitude: float = 500.0  # km
    inclination: float = 0.0  # equatorial
    raan: float = 0.0  # degrees
    phase: float = 0.0  # anomaly at t=0, degrees
    name: str = "LEO-PS"

    def __post_init__(self):
        if not math.isfinite(self.altitude) or self.altitude <= 0:
            raise DomainError(f"PS altitude must be > 0 km, got {self.altitude}")


PSDescriptor = GroundStationConfig | OrbitalPSConfig


def to_db(linear: float) -> float:
    return 10.0 * math.log10(linear)


def from_db(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return from_db(dbm) / 1000.0


@dataclass(frozen=True)
class LinkBudgetParams:
    carrier_freq: float = 20e9  # Hz
    bandwidth: float = 500e6  # Hz
    tx_power: float = 10.0  # W (40 dBm)
    noise_temp: float = 354.0  # K
    tx_gain: float = from_db(32.13)  # linear
    rx_gain: float = from_db(32.13)  # linear

    def __post_init__(self):
        for name in ("carrier_freq", "bandwidth", "tx_power", "noise_temp"):
            value = getattr(self, name)
            if not value > 0:
                raise DomainError(f"{name} must be > 0, got {value}")
        # gains may be 0 (no antenna), never negative
        if self.tx_gain < 0 or self.rx_gain < 0:
            raise DomainError("antenna gains must be >= 0")

    @classmethod
    def from_db(
        cls,
        carrier_freq: float = 20e9,
        bandwidth: float = 500e6,
        tx_power_dbm: float = 40.0,
        noise_temp: float = 354.0,
        tx_gain_dbi: float = 32.13,
        rx_gain_dbi: float = 32.13,
    ) -> "LinkBudgetParams":
        return cls(
            carrier_freq=carrier_freq,
            bandwidth=bandwidth,
            tx_power=dbm_to_watts(tx_power_dbm),
            noise_temp=noise_temp,
            tx_gain=from_db(tx_gain_dbi),
            rx_gain=from_db(rx_gain_dbi),
        )


@dataclass(frozen=True)
class ComputeCostModel:
    # CPU cycles per sample-epoch, per sample and parameter, per optimizer step and parameter
    c_epoch: float = 10.0
    c_s: float = 100.0
    c_step: float = 5.0
    c_compress: float = 0.0
    c_os: float = 1e6
    cpu_freq: float = 1e9  # Hz
    fixed_override: float | None = None  # seconds; replaces the cycle model when set

    def __post_init__(self):
        for name in ("c_epoch", "c_s", "c_step", "c_compress", "c_os"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if self.cpu_freq <= 0:
            raise DomainError(f"cpu_freq must be > 0, got {self.cpu_freq}")
        if self.fixed_override is not None and self.fixed_override < 0:
            raise DomainError("fixed_override must be >= 0")


@dataclass(frozen=True)
class StochasticDelayModel:
    learning_time: float = 480.0  # deterministic base t_l, seconds
    comm_time: float = 50.0  # deterministic per-hop base t_c, seconds
    learning_shape: float = 25.0  # Gamma alpha
    learning_scale: float = 25.0  # Gamma theta, seconds
    comm_rate: float = 0.025  # Exponential lambda, 1/s
    enabled: bool = True  # False -> X = Y = 0

    def __post_init__(self):
        for name in ("learning_shape", "learning_scale", "comm_rate"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0")
        if self.learning_time < 0 or self.comm_time < 0:
            raise DomainError("deterministic delay bases must be >= 0")

    def learning_jitter(self, rng: np.random.Generator) -> float:
        if not self.enabled:
            return 0.0
        # numpy's gamma sampler is the Marsaglia-Tsang acceptance method
        return float(rng.gamma(self.learning_shape, self.learning_scale))

    def comm_jitter(self, rng: np.random.Generator) -> float:
        if not self.enabled:
            return 0.0
        u = rng.random()
        return float(-math.log1p(-u) / self.comm_rate)

    def learning_sample(self, rng: np.random.Generator) -> float:
        return self.learning_time + self.learning_jitter(rng)

    def comm_sample(self, rng: np.random.Generator) -> float:
        return self.comm_time + self.comm_jitter(rng)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 5  # I
    batch_size: int = 10  # B
    learning_rate: float = 0.1  # eta
    elem_bits: int = 32  # omega
    sparsify_q: float | None = None  # None -> identity compressor
    model: str = "softmax"  # "softmax" | "least-squares"

    def __post_init__(self):
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if self.elem_bits not in (16, 32):
            raise DomainError(f"elem_bits must be 16 or 32, got {self.elem_bits}")
        if self.sparsify_q is not None and not 0.0 < self.sparsify_q <= 1.0:
            raise DomainError(f"sparsify_q must be in (0, 1], got {self.sparsify_q}")


@dataclass(frozen=True)
class OrchestrationConfig:
    mode: str = "sync"  # "sync" | "async"
    isl: bool = True  # intra-orbit ISLs with incremental aggregation
    rate_limit: float = 0.0  # T_u, seconds (async only)
    poll_interval: float = 60.0  # idle satellites re-request the model this often while in view
    server_lr: float = 1.0  # eta_s
    learning_time_estimate: float | None = None  # t_l used for sink planning, None -> compute model

    def __post_init__(self):
        if self.mode not in ("sync", "async"):
            raise DomainError(f"mode must be 'sync' or 'async', got {self.mode!r}")
        if self.rate_limit < 0:
            raise DomainError("rate_limit must be >= 0")
        if not self.poll_interval > 0:
            raise DomainError("poll_interval must be > 0")
        if not self.server_lr > 0:
            raise DomainError("server_lr must be > 0")


@dataclass(frozen=True)
class FailureHandlingConfig:
    scheme: str = "determine-new-sink"  # | "pass-to-neighbor" | "none"
    guard_time: float = 0.0  # t_g, seconds
    pass_direction: str = "leading"  # ring direction for pass-to-neighbor
    search_periods: float = 2.0  # new-sink search horizon in orbital periods

    def __post_init__(self):
        if self.scheme not in ("determine-new-sink", "pass-to-neighbor", "none"):
            raise DomainError(f"unknown failure-handling scheme {self.scheme!r}")
        if self.pass_direction not in ("leading", "trailing"):
            raise DomainError(f"pass_direction must be 'leading' or 'trailing', got {self.pass_direction!r}")
        if self.guard_time < 0 or not self.search_periods > 0:
            raise DomainError("guard_time must be >= 0 and search_periods > 0")


@dataclass(frozen=True)
class TerminationConfig:
    max_iterations: int | None = None  # global model updates
    target_accuracy: float | None = None
    patience: int = 3  # evaluations the target must hold for

    def __post_init__(self):
        if self.max_iterations is not None and self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")
        if self.target_accuracy is not None and not 0.0 < self.target_accuracy <= 1.0:
            raise DomainError("target_accuracy must be in (0, 1]")
        if self.patience < 1:
            raise DomainError("patience must be >= 1")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # | "mnist"
    num_samples: int = 4000
    test_samples: int = 1000
    num_features: int = 784
    num_classes: int = 10
    class_sep: float = 0.035  # std of per-feature class means
    noise: float = 0.25  # per-feature sample noise
    partition: str = "dirichlet"  # | "iid"
    dirichlet_beta: float = 0.5
    mnist_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "mnist"):
            raise DomainError(f"unknown dataset kind {self.kind!r}")
        if self.partition not in ("iid", "dirichlet"):
            raise DomainError(f"unknown partition mode {self.partition!r}")
        if self.num_samples < 1 or self.test_samples < 1:
            raise DomainError("dataset needs at least one training and one test sample")
        if not self.dirichlet_beta > 0:
            raise DomainError("dirichlet_beta must be > 0")
        if self.kind == "mnist" and not self.mnist_dir:
            raise DomainError("mnist datasets need mnist_dir")


@dataclass(frozen=True)
class Scenario:
    """Everything one simulation run needs, resolved from a scenario file."""

    constellation: ConstellationConfig = field(default_factory=ConstellationConfig)
    ps: PSDescriptor = field(default_factory=GroundStationConfig)
    isl_link: LinkBudgetParams = field(default_factory=LinkBudgetParams)
    ps_link: LinkBudgetParams = field(default_factory=LinkBudgetParams)
    compute: ComputeCostModel = field(default_factory=ComputeCostModel)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    orchestration: OrchestrationConfig = field(default_factory=OrchestrationConfig)
    failure: FailureHandlingConfig = field(default_factory=FailureHandlingConfig)
    termination: TerminationConfig = field(default_factory=TerminationConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    delays: StochasticDelayModel | None = None  # jitter on learning and ISL hops
    seed: int = 0
    horizon: float = 12 * 3600.0  # simulated seconds
    name: str = "custom"
