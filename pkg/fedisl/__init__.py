"""Federated learning over LEO constellations with intra-orbit inter-satellite links."""

from .config import (
    ComputeCostModel,
    ConstellationConfig,
    DatasetConfig,
    FailureHandlingConfig,
    GroundStationConfig,
    LinkBudgetParams,
    OrbitalPSConfig,
    OrchestrationConfig,
    SatelliteId,
    Scenario,
    StochasticDelayModel,
    TerminationConfig,
    TrainingConfig,
)
from .contacts import ContactPlan, ContactWindow
from .errors import (
    ConfigError,
    DeadlockError,
    DivergedError,
    DomainError,
    FedISLError,
    InfeasibleLinkError,
    PlanningError,
    ProtocolError,
)
from .experiments import run_commload_experiment, run_convergence_experiment, run_failure_experiment
from .scenario import PRESETS, ScenarioConfig, load_scenario
from .sim import Metrics, Simulation, run
