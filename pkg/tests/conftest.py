import numpy as np
import pytest

from fedisl.config import (
    ConstellationConfig,
    DatasetConfig,
    GroundStationConfig,
    SatelliteId,
    Scenario,
    TerminationConfig,
    TrainingConfig,
)
from fedisl.contacts import ContactWindow
from fedisl.flcore import LocalDataset
from fedisl.links import LinkRates
from utils.datasets import synthetic_blobs


class ScriptedContacts:
    """Contact plan with hand-written windows, same lookup interface as ContactPlan."""

    def __init__(self, windows: dict[SatelliteId, list[tuple[float, float]]]):
        self._windows = {s: [ContactWindow(s, b, e) for b, e in sorted(ws)] for s, ws in windows.items()}

    def window_at(self, sat, t):
        for w in self._windows.get(sat, []):
            if w.contains(t):
                return w
        return None

    def first_usable(self, sat, t, duration, horizon=None):
        limit = t + (1e12 if horizon is None else horizon)
        for w in self._windows.get(sat, []):
            if w.end <= t:
                continue
            if w.begin > limit:
                break
            start = w.usable_from(t, duration)
            if start is not None:
                return w, start
        return None, None

    def next_window(self, sat, t, horizon=None):
        return self.first_usable(sat, t, 0.0, horizon)[0]


@pytest.fixture
def scripted_contacts():
    return ScriptedContacts


@pytest.fixture
def fast_rates():
    # 1 Gbit/s on both links over 1000 km
    return LinkRates(isl_rate=1e9, ps_rate=1e9, isl_distance=1e6, ps_distance=1e6)


@pytest.fixture
def intro_constellation():
    return ConstellationConfig(inclination=0.0, altitude=550.0, num_planes=1, sats_per_plane=2, slot_spacing=40.0)


@pytest.fixture
def equator_gs():
    return GroundStationConfig(latitude=0.0, longitude=0.0, min_elevation=10.0, name="equator")


def _tiny_datasets(num_sats: int, per_sat: int = 20, num_features: int = 5, num_classes: int = 3, seed: int = 0):
    data = synthetic_blobs(num_sats * per_sat, num_features, num_classes, class_sep=1.0, noise=0.5, seed=seed)
    return [
        LocalDataset(data.features[k * per_sat : (k + 1) * per_sat], data.labels[k * per_sat : (k + 1) * per_sat])
        for k in range(num_sats)
    ]


@pytest.fixture
def tiny_datasets():
    return _tiny_datasets


@pytest.fixture
def tiny_test_set():
    data = synthetic_blobs(60, 5, 3, class_sep=1.0, noise=0.5, seed=99)
    return data.features, data.labels


@pytest.fixture
def tiny_scenario():
    """Scenario factory for 5-feature, 3-class problems injected through ``datasets=``."""

    def build(constellation, ps, max_iterations=1, horizon=24 * 3600.0, **kwargs):
        return Scenario(
            constellation=constellation,
            ps=ps,
            training=kwargs.pop("training", TrainingConfig(epochs=2, batch_size=5, learning_rate=0.1)),
            termination=TerminationConfig(max_iterations=max_iterations),
            dataset=DatasetConfig(num_samples=60, test_samples=60, num_features=5, num_classes=3),
            horizon=horizon,
            **kwargs,
        )

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
