"""Contact plan: predicted PS contact windows for every satellite of a constellation."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .config import ConstellationConfig, PSDescriptor, SatelliteId
from .errors import DomainError
from .orbital import contact_windows, orbital_period, visibility_margin

logger = logging.getLogger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class ContactWindow:
    satellite: SatelliteId
    begin: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.begin

    def contains(self, t: float) -> bool:
        return self.begin <= t < self.end

    def remaining(self, t: float) -> float:
        """Time left for communication if we start no earlier than t."""
        return self.end - max(t, self.begin)

    def usable_from(self, t: float, duration: float) -> float | None:
        """Earliest start >= t at which ``duration`` seconds fit, or None."""
        start = max(t, self.begin)
        return start if start + duration <= self.end else None


class ContactPlan:
    """Per-satellite window cache, extended lazily as the simulation advances.

    Windows are computed chunk by chunk with :func:`fedisl.orbital.contact_windows`;
    a window cut by a chunk boundary is stitched to its continuation. Long runs
    call :meth:`forget_before` to drop windows they have moved past.
    """

    def __init__(
        self,
        constellation: ConstellationConfig,
        ps: PSDescriptor,
        horizon: float = 12 * 3600.0,
        step: float = 1.0,
        max_search: float = 3 * 86400.0,
    ):
        self.constellation = constellation
        self.ps = ps
        self.step = step
        self.chunk = max(horizon, 4 * orbital_period(constellation.altitude))
        self.max_search = max_search
        self._windows: dict[SatelliteId, list[ContactWindow]] = {}
        self._computed_until: dict[SatelliteId, float] = {}
        self._floor = 0.0  # nothing before this is cached any more

    @property
    def cached_windows(self) -> int:
        return sum(len(w) for w in self._windows.values())

    def forget_before(self, t: float) -> int:
        """Drop cached windows that ended before t and return how many went.

        The last window of every satellite stays so chunk stitching keeps working.
        """
        dropped = 0
        for wins in self._windows.values():
            keep = 0
            while keep < len(wins) - 1 and wins[keep].end < t:
                keep += 1
            del wins[:keep]
            dropped += keep
        self._floor = max(self._floor, t)
        if dropped:
            logger.debug("contact cache: dropped %d windows that ended before t=%.0f s", dropped, t)
        return dropped

    def _check(self, t: float) -> None:
        if t < self._floor - _EPS:
            raise DomainError(f"windows before t={self._floor:.0f} s were forgotten, cannot look up t={t:.0f} s")

    def _extend(self, sat: SatelliteId, until: float) -> None:
        t0 = self._computed_until.get(sat, 0.0)
        wins = self._windows.setdefault(sat, [])
        while t0 < until:
            t1 = t0 + self.chunk
            for begin, end in contact_windows(self.constellation, sat, self.ps, t0, t1, self.step):
                if wins and begin <= t0 + _EPS and wins[-1].end >= t0 - _EPS:
                    wins[-1] = ContactWindow(sat, wins[-1].begin, end)
                else:
                    wins.append(ContactWindow(sat, begin, end))
            t0 = t1
        self._computed_until[sat] = t0

    def _ensure(self, sat: SatelliteId, t: float) -> list[ContactWindow]:
        self._extend(sat, t)
        # a window still open at the computed edge may be truncated
        limit = t + self.max_search
        wins = self._windows[sat]
        while wins and wins[-1].end >= self._computed_until[sat] - _EPS and self._computed_until[sat] < limit:
            self._extend(sat, self._computed_until[sat] + self.chunk)
        return wins

    def windows(self, sat: SatelliteId, t0: float, t1: float) -> list[ContactWindow]:
        """Windows of ``sat`` overlapping [t0, t1]."""
        self._check(t0)
        return [w for w in self._ensure(sat, t1) if w.end > t0 and w.begin < t1]

    def window_at(self, sat: SatelliteId, t: float) -> ContactWindow | None:
        self._check(t)
        for w in self._ensure(sat, t):
            if w.contains(t):
                return w
            if w.begin > t:
                break
        return None

    def visible(self, sat: SatelliteId, t: float) -> bool:
        return self.window_at(sat, t) is not None

    def next_window(self, sat: SatelliteId, t: float, horizon: float | None = None) -> ContactWindow | None:
        """The window in progress at t, or the first one starting after t."""
        return self.first_usable(sat, t, 0.0, horizon)[0]

    def first_usable(
        self, sat: SatelliteId, t: float, duration: float, horizon: float | None = None
    ) -> tuple[ContactWindow | None, float | None]:
        """Earliest window in which ``duration`` seconds fit at or after t.

        Returns ``(window, start)`` or ``(None, None)`` if nothing fits before
        ``t + horizon``.
        """
        self._check(t)
        limit = t + (self.max_search if horizon is None else horizon)
        checked = t
        while checked < limit:
            checked = min(limit, checked + self.chunk)
            for w in self._ensure(sat, checked):
                if w.end <= t:
                    continue
                if w.begin > limit:
                    return None, None
                start = w.usable_from(t, duration)
                if start is not None:
                    return w, start
        return None, None

    def coverage(self, sats: list[SatelliteId], t0: float, t1: float) -> float:
        """Fraction of [t0, t1] during which at least one of ``sats`` sees the PS."""
        if t1 <= t0:
            return 0.0
        spans = sorted((max(w.begin, t0), min(w.end, t1)) for s in sats for w in self.windows(s, t0, t1))
        covered, cur_b, cur_e = 0.0, None, None
        for b, e in spans:
            if cur_e is None or b > cur_e:
                if cur_e is not None:
                    covered += cur_e - cur_b
                cur_b, cur_e = b, e
            else:
                cur_e = max(cur_e, e)
        if cur_e is not None:
            covered += cur_e - cur_b
        return covered / (t1 - t0)

    def connectivity_frame(self, t0: float, t1: float, step: float = 10.0) -> pd.DataFrame:
        """0/1 PS visibility per satellite and per plane on a fixed time grid."""
        times = np.arange(t0, t1 + step / 2, step)
        data = {"t_seconds": times}
        for p in range(1, self.constellation.num_planes + 1):
            plane = np.zeros(len(times), dtype=bool)
            for sat in self.constellation.plane_satellites(p):
                vis = np.asarray(visibility_margin(self.constellation, sat, self.ps, times)) >= 0
                data[str(sat)] = vis.astype(int)
                plane |= vis
            data[f"plane{p}"] = plane.astype(int)
        return pd.DataFrame(data)
