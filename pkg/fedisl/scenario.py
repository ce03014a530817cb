"""Scenario files: JSON validated by pydantic, shipped presets and the merge
rules that turn file, preset and command-line values into a Scenario."""

import copy
import dataclasses
import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .config import (
    ComputeCostModel,
    ConstellationConfig,
    DatasetConfig,
    FailureHandlingConfig,
    GroundStationConfig,
    LinkBudgetParams,
    OrbitalPSConfig,
    OrchestrationConfig,
    Scenario,
    StochasticDelayModel,
    TerminationConfig,
    TrainingConfig,
    dbm_to_watts,
    from_db,
)
from .errors import ConfigError, DomainError

T_U_DEFAULT = 147 * 60.0  # async rate limit of the shipped async presets, seconds


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")

    def values(self, *exclude: str) -> dict[str, Any]:
        return self.model_dump(exclude_none=True, exclude=set(exclude))


class ConstellationSection(_Section):
    walker: str | None = None  # "i:t/p/f", overrides inclination and plane counts
    inclination: float | None = None
    altitude: float | None = None
    num_planes: int | None = None
    sats_per_plane: int | None = None
    phasing: int | None = None
    pattern: Literal["delta", "star"] | None = None
    raan_spacing: float | None = None
    phase_offset: float | None = None
    slot_spacing: float | None = None

    def build(self) -> ConstellationConfig:
        if self.walker is None:
            return ConstellationConfig(**self.values())
        rest = self.values("walker", "inclination", "num_planes", "sats_per_plane", "phasing", "altitude")
        return ConstellationConfig.from_walker(self.walker, self.altitude or ConstellationConfig.altitude, **rest)


class PSSection(_Section):
    kind: Literal["ground-station", "satellite"] = "ground-station"
    name: str | None = None
    # ground station
    latitude: float | None = None
    longitude: float | None = None
    min_elevation: float | None = None
    # both (km)
    altitude: float | None = None
    # satellite
    inclination: float | None = None
    raan: float | None = None
    phase: float | None = None

    def build(self) -> GroundStationConfig | OrbitalPSConfig:
        if self.kind == "ground-station":
            stray = {"inclination", "raan", "phase"} & self.values().keys()
            if stray:
                raise DomainError(f"ground-station PS does not take {sorted(stray)}")
            return GroundStationConfig(**self.values("kind"))
        stray = {"latitude", "longitude", "min_elevation"} & self.values().keys()
        if stray:
            raise DomainError(f"satellite PS does not take {sorted(stray)}")
        return OrbitalPSConfig(**self.values("kind"))


class LinkSection(_Section):
    carrier_freq: float | None = None
    bandwidth: float | None = None
    tx_power: float | None = None  # W
    noise_temp: float | None = None
    tx_gain: float | None = None  # linear
    rx_gain: float | None = None
    tx_power_dbm: float | None = None
    tx_gain_dbi: float | None = None
    rx_gain_dbi: float | None = None

    def build(self) -> LinkBudgetParams:
        values = self.values("tx_power_dbm", "tx_gain_dbi", "rx_gain_dbi")
        for linear, db, convert in (
            ("tx_power", self.tx_power_dbm, dbm_to_watts),
            ("tx_gain", self.tx_gain_dbi, from_db),
            ("rx_gain", self.rx_gain_dbi, from_db),
        ):
            if db is None:
                continue
            if linear in values:
                raise DomainError(f"give either {linear} or its dB form, not both")
            values[linear] = convert(db)
        return LinkBudgetParams(**values)


class ComputeSection(_Section):
    c_epoch: float | None = None
    c_s: float | None = None
    c_step: float | None = None
    c_compress: float | None = None
    c_os: float | None = None
    cpu_freq: float | None = None
    fixed_override: float | None = None

    def build(self) -> ComputeCostModel:
        return ComputeCostModel(**self.values())


class TrainingSection(_Section):
    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    elem_bits: Literal[16, 32] | None = None
    sparsify_q: float | None = None
    model: Literal["softmax", "least-squares"] | None = None

    def build(self) -> TrainingConfig:
        return TrainingConfig(**self.values())


class OrchestrationSection(_Section):
    mode: Literal["sync", "async"] | None = None
    isl: bool | None = None
    rate_limit: float | None = None
    poll_interval: float | None = None
    server_lr: float | None = None
    learning_time_estimate: float | None = None

    def build(self) -> OrchestrationConfig:
        return OrchestrationConfig(**self.values())


class FailureSection(_Section):
    scheme: Literal["determine-new-sink", "pass-to-neighbor", "none"] | None = None
    guard_time: float | None = None
    pass_direction: Literal["leading", "trailing"] | None = None
    search_periods: float | None = None

    def build(self) -> FailureHandlingConfig:
        return FailureHandlingConfig(**self.values())


class TerminationSection(_Section):
    max_iterations: int | None = None
    target_accuracy: float | None = None
    patience: int | None = None

    def build(self) -> TerminationConfig:
        return TerminationConfig(**self.values())


class DatasetSection(_Section):
    kind: Literal["synthetic", "mnist"] | None = None
    num_samples: int | None = None
    test_samples: int | None = None
    num_features: int | None = None
    num_classes: int | None = None
    class_sep: float | None = None
    noise: float | None = None
    partition: Literal["iid", "dirichlet"] | None = None
    dirichlet_beta: float | None = None
    mnist_dir: str | None = None

    def build(self) -> DatasetConfig:
        return DatasetConfig(**self.values())


class DelaySection(_Section):
    learning_time: float | None = None
    comm_time: float | None = None
    learning_shape: float | None = None
    learning_scale: float | None = None
    comm_rate: float | None = None
    enabled: bool | None = None

    def build(self) -> StochasticDelayModel:
        return StochasticDelayModel(**self.values())


class ScenarioConfig(_Section):
    preset: str | None = None
    name: str | None = None
    seed: int = Field(0, ge=0)
    horizon: float = Field(12 * 3600.0, gt=0)
    constellation: ConstellationSection = Field(default_factory=ConstellationSection)
    ps: PSSection = Field(default_factory=PSSection)
    isl_link: LinkSection = Field(default_factory=LinkSection)
    ps_link: LinkSection = Field(default_factory=LinkSection)
    compute: ComputeSection = Field(default_factory=ComputeSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    orchestration: OrchestrationSection = Field(default_factory=OrchestrationSection)
    failure: FailureSection = Field(default_factory=FailureSection)
    termination: TerminationSection = Field(default_factory=TerminationSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    delays: DelaySection | None = None

    def to_scenario(self) -> Scenario:
        built, problems = {}, []
        for key in ("constellation", "ps", "isl_link", "ps_link", "compute", "training",
                    "orchestration", "failure", "termination", "dataset", "delays"):
            section = getattr(self, key)
            if section is None:
                continue
            try:
                built[key] = section.build()
            except DomainError as exc:
                problems.append((key, str(exc)))
        if problems:
            raise ConfigError("scenario values out of range", problems)
        return Scenario(**built, seed=self.seed, horizon=self.horizon, name=self.name or self.preset or "custom")


# -- presets ------------------------------------------------------------------

_CONSTELLATIONS = {
    "wdelta": {"walker": "60:40/5/1", "altitude": 2000.0, "pattern": "delta"},
    "wstar": {"walker": "85:40/5/1", "altitude": 2000.0, "pattern": "star"},
}
_PS = {
    "gs": {"kind": "ground-station"},
    "leo": {"kind": "satellite", "altitude": 500.0, "inclination": 0.0},
}


def _preset(constellation: str, ps: str, mode: str, isl: bool) -> dict:
    orchestration = {"mode": mode, "isl": isl}
    if mode == "async":
        orchestration["rate_limit"] = T_U_DEFAULT
    return {
        "constellation": dict(_CONSTELLATIONS[constellation]),
        "ps": dict(_PS[ps]),
        "orchestration": orchestration,
        "compute": {"fixed_override": 60.0},
        "dataset": {"kind": "synthetic", "num_samples": 4000, "partition": "dirichlet", "dirichlet_beta": 0.5},
        "horizon": 12 * 3600.0,
    }


PRESETS: dict[str, dict] = {
    f"{c}-{p}-{m}-{'isl' if isl else 'noisl'}": _preset(c, p, m, isl)
    for c in _CONSTELLATIONS
    for p in _PS
    for m in ("sync", "async")
    for isl in (True, False)
}
# one plane of two satellites 40 degrees apart passing over an equatorial station
PRESETS["intro-two-satellites"] = {
    "constellation": {
        "inclination": 0.0, "altitude": 550.0, "num_planes": 1, "sats_per_plane": 2, "slot_spacing": 40.0,
    },
    "ps": {"kind": "ground-station", "latitude": 0.0, "longitude": 0.0, "min_elevation": 10.0, "name": "equator"},
    "orchestration": {"mode": "sync", "isl": True},
    "compute": {"fixed_override": 600.0},
    "termination": {"max_iterations": 1},
    "dataset": {"num_samples": 400, "test_samples": 200, "partition": "iid"},
    "horizon": 4 * 3600.0,
}


def deep_merge(base: dict, override: dict) -> dict:
    """Recursively merge ``override`` into a copy of ``base``; override wins."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_presets(raw: dict, _seen: tuple[str, ...] = ()) -> dict:
    name = raw.get("preset")
    if name is None:
        return raw
    if name not in PRESETS:
        raise ConfigError("unknown preset", [("preset", f"{name!r} is not one of {sorted(PRESETS)}")])
    if name in _seen:
        raise ConfigError("preset cycle", [("preset", " -> ".join((*_seen, name)))])
    base = resolve_presets(PRESETS[name], (*_seen, name))
    return deep_merge(base, raw)


def read_json(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}", [("file", str(exc))]) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON", [(f"{exc.lineno}:{exc.colno}", exc.msg)]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object", [("1:1", type(raw).__name__)])
    return raw


def parse_config(raw: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(resolve_presets(raw))
    except ValidationError as exc:
        diagnostics = [(".".join(str(p) for p in err["loc"]) or "<root>", err["msg"]) for err in exc.errors()]
        raise ConfigError("scenario failed validation", diagnostics) from exc


def load_scenario(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict | None = None,
) -> tuple[ScenarioConfig, Scenario]:
    """Resolve a scenario with precedence overrides > file > preset > defaults."""
    raw = read_json(path) if path is not None else {}
    if preset is not None:
        raw["preset"] = preset
    if overrides:
        raw = deep_merge(raw, overrides)
    config = parse_config(raw)
    return config, config.to_scenario()


def scenario_to_dict(scenario: Scenario) -> dict:
    """Plain-data form of a resolved scenario; parse_config() reads it back."""
    data = dataclasses.asdict(scenario)
    data["ps"]["kind"] = "ground-station" if isinstance(scenario.ps, GroundStationConfig) else "satellite"
    return data
