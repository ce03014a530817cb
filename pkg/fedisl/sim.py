"""Discrete-event engine that runs the orchestration state machines over predicted
contact windows, plus the metric records and writers for one run."""

import heapq
import itertools
import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .config import SatelliteId, Scenario
from .contacts import ContactPlan, ContactWindow
from .errors import DeadlockError, DomainError
from .flcore import (
    LocalDataset,
    ModelParams,
    client_opt,
    compute_time,
    evaluate,
    make_compressor,
    make_model,
    partition_dataset,
)
from .links import LinkRates, resolve_link_rates
from .orbital import orbital_period
from .orchestration import (
    AsyncPSState,
    ClusterSet,
    Message,
    MessageKind,
    PlaneContext,
    PSActionKind,
    RequestModel,
    SatEvent,
    SatEventKind,
    SatProcState,
    SendIsl,
    StartLearning,
    SyncPSState,
    TerminationCriterion,
    Upload,
    async_ps_handle,
    satellite_step,
    sync_ps_handle,
)
from .seeding import satellite_index, stream
from .sparsify import expected_nnz, index_bits, kept_count, sparse_routing_size

logger = logging.getLogger(__name__)

PS_ID = "ps"
_EPS = 1e-6


class EventKind(str, Enum):
    WINDOW_OPEN = "window-open"
    WINDOW_CLOSE = "window-close"
    TRANSFER_COMPLETE = "transfer-complete"
    LEARNING_COMPLETE = "learning-complete"
    TIMER = "timer"


@dataclass
class Event:
    time: float
    sequence: int
    kind: EventKind
    subject: str  # process id: a satellite name or "ps"
    payload: Any = None


class EventQueue:
    """Min-heap of events ordered by (time, sequence)."""

    def __init__(self):
        self._heap: list[tuple[float, int, Event]] = []
        self._counter = itertools.count()
        self.now = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, time: float, kind: EventKind, subject: str, payload: Any = None) -> Event:
        if time < self.now - _EPS:
            raise DomainError(f"cannot schedule {kind.value} at {time:.3f} s, clock is at {self.now:.3f} s")
        event = Event(max(time, self.now), next(self._counter), kind, subject, payload)
        heapq.heappush(self._heap, (event.time, event.sequence, event))
        return event

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def pop(self) -> Event:
        _, _, event = heapq.heappop(self._heap)
        self.now = event.time
        return event


@dataclass
class Metrics:
    accuracy: list[tuple[float, float, int]] = field(default_factory=list)  # (t, top-1, model version)
    isl_bits: dict[int, float] = field(default_factory=lambda: defaultdict(float))
    ps_bits: dict[int, float] = field(default_factory=lambda: defaultdict(float))
    iteration_times: list[tuple[int, float]] = field(default_factory=list)
    failures: list[tuple[int, int, float]] = field(default_factory=list)  # (iteration, cluster, delay s)
    aborted_transfers: int = 0
    events: int = 0
    end_time: float = 0.0
    stop_reason: str = "horizon"
    rates: LinkRates | None = None

    @property
    def updates(self) -> int:
        return len(self.iteration_times)

    @property
    def final_accuracy(self) -> float | None:
        return self.accuracy[-1][1] if self.accuracy else None

    @property
    def total_isl_bits(self) -> float:
        return float(sum(self.isl_bits.values()))

    @property
    def total_ps_bits(self) -> float:
        return float(sum(self.ps_bits.values()))

    def accuracy_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.accuracy, columns=["t_seconds", "accuracy", "iteration"])

    def traffic_frame(self) -> pd.DataFrame:
        iterations = sorted(set(self.isl_bits) | set(self.ps_bits))
        return pd.DataFrame(
            {
                "iteration": iterations,
                "isl_bits": [self.isl_bits.get(n, 0.0) for n in iterations],
                "ps_bits": [self.ps_bits.get(n, 0.0) for n in iterations],
            }
        )

    def failure_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.failures, columns=["iteration", "cluster", "delay_s"])


@dataclass
class _Session:
    sat: SatelliteId
    message: Message


@dataclass
class _Transfer:
    link: str  # "isl" | "ps"
    sender: SatelliteId | None
    receiver: SatelliteId | None
    message: Message
    bits: int


class Simulation:
    """One deterministic run of a scenario.

    ``datasets`` (one per satellite, in satellite order) and ``test_set``
    override the scenario's dataset section; tests use them to inject tiny
    problems. With ``record_models`` every global model is kept in
    ``model_history``.
    """

    def __init__(
        self,
        scenario: Scenario,
        datasets: list[LocalDataset] | None = None,
        test_set: tuple[np.ndarray, np.ndarray] | None = None,
        record_models: bool = False,
    ):
        self.scenario = scenario
        self.cfg = scenario.constellation
        self.queue = EventQueue()
        self.metrics = Metrics()
        self.record_models = record_models
        self.model_history: list[ModelParams] = []
        self.finished = False
        self.sats = self.cfg.satellites()
        if not self.sats:
            return

        self.contacts = ContactPlan(self.cfg, scenario.ps, scenario.horizon)
        self.rates = resolve_link_rates(self.cfg, scenario.ps, scenario.isl_link, scenario.ps_link)
        self.metrics.rates = self.rates

        if datasets is None:
            from utils.datasets import load_dataset

            train, test = load_dataset(scenario.dataset, scenario.seed)
            datasets = partition_dataset(
                train.features, train.labels, len(self.sats), scenario.dataset.partition,
                scenario.dataset.dirichlet_beta, scenario.seed,
            )
            test_set = (test.features, test.labels)
        if len(datasets) != len(self.sats):
            raise DomainError(f"{len(datasets)} local datasets for {len(self.sats)} satellites")
        self.datasets = dict(zip(self.sats, datasets))
        num_features = datasets[0].features.shape[1]
        num_classes = scenario.dataset.num_classes
        self.model = make_model(scenario.training.model, num_features, num_classes)
        self.test_set = test_set

        training = scenario.training
        init = ModelParams(self.model.init_params(), training.elem_bits)
        orch = scenario.orchestration
        self.clusters = ClusterSet.by_plane(self.cfg) if orch.isl else ClusterSet.per_satellite(self.cfg)
        total_weight = float(sum(d.size for d in datasets))
        if orch.mode == "sync":
            self.ps = SyncPSState.initial(init, len(self.clusters), total_weight, orch.server_lr)
        else:
            self.ps = AsyncPSState(init.copy(), len(self.clusters), total_weight, orch.server_lr, orch.rate_limit)
        self.criterion = TerminationCriterion(scenario.termination)

        n_d = init.n_d
        self.procs = {
            s: SatProcState(s, self.clusters.cluster_of(s), compressor=make_compressor(training, n_d))
            for s in self.sats
        }
        self.contexts = {p: self._plane_context(p, n_d) for p in range(1, self.cfg.num_planes + 1)}

        self.sessions: deque[_Session] = deque()
        self.ps_busy = False
        self.requesting: set[SatelliteId] = set()
        self.polling: set[SatelliteId] = set()
        if record_models:
            self.model_history.append(init)
        self._record_accuracy(0.0, init, 0)

    def _plane_context(self, plane: int, n_d: int) -> PlaneContext:
        training, scenario = self.scenario.training, self.scenario
        sats = self.cfg.plane_satellites(plane)
        K = len(sats)
        omega = training.elem_bits
        if training.sparsify_q is None:
            gradient_bits = aggregate_bits = float(n_d * omega)
            routed = None
        else:
            width = omega + index_bits(n_d)
            gradient_bits = float(kept_count(n_d, training.sparsify_q) * width)
            aggregate_bits = expected_nnz(n_d, training.sparsify_q, K) * width
            routed = sparse_routing_size(n_d, omega, training.sparsify_q, K)
        t_l = scenario.orchestration.learning_time_estimate
        if t_l is None:
            mean_size = int(round(np.mean([self.datasets[s].size for s in sats])))
            t_l = compute_time(scenario.compute, mean_size, n_d, training.epochs, training.batch_size)
        return PlaneContext(
            plane=plane,
            plane_sats=sats,
            contacts=self.contacts,
            rates=self.rates,
            param_bits=n_d * omega,
            gradient_bits=gradient_bits,
            aggregate_bits=aggregate_bits,
            learning_time=t_l,
            failure=scenario.failure,
            search_horizon=scenario.failure.search_periods * orbital_period(self.cfg.altitude),
            isl=scenario.orchestration.isl,
            rate_limit=scenario.orchestration.rate_limit if scenario.orchestration.mode == "async" else 0.0,
            routed_gradient_bits=routed,
        )

    # -- measurement --------------------------------------------------------

    def _record_accuracy(self, t: float, params: ModelParams, version: int) -> float | None:
        if self.test_set is None:
            return None
        acc = evaluate(self.model, params, *self.test_set)
        self.metrics.accuracy.append((t, acc, version))
        return acc

    # -- scheduling helpers -------------------------------------------------

    def _schedule_window(self, sat: SatelliteId, t: float) -> None:
        w = self.contacts.next_window(sat, t)
        if w is not None:
            self.queue.schedule(max(w.begin, t), EventKind.WINDOW_OPEN, str(sat), (sat, w))

    def _step(self, sat: SatelliteId, kind: SatEventKind, t: float, **kw) -> None:
        actions = satellite_step(self.procs[sat], SatEvent(kind, t, **kw), self.contexts[sat.plane])
        for action in actions:
            self._execute(sat, action, t)
        if self.procs[sat].idle and not self.finished:
            # idle satellites in view keep asking for work
            window = self.contacts.window_at(sat, t)
            if window is not None:
                self._schedule_poll(sat, t, window, 0.0 if kind is SatEventKind.UPLOAD_DONE else None)

    def _execute(self, sat: SatelliteId, action, t: float) -> None:
        if isinstance(action, SendIsl):
            self._send_isl(sat, action, t)
        elif isinstance(action, StartLearning):
            self._start_learning(sat, action, t)
        elif isinstance(action, RequestModel):
            if sat not in self.requesting:
                self.requesting.add(sat)
                self._enqueue_session(_Session(sat, Message(MessageKind.REQUEST, cluster=self.procs[sat].cluster)), t)
        elif isinstance(action, Upload):
            self._schedule_upload(sat, action.message, action.earliest)
        else:
            raise DomainError(f"unknown satellite action {action!r}")

    def _send_isl(self, sat: SatelliteId, action: SendIsl, t: float) -> None:
        bits = action.message.size_bits
        duration = self.rates.isl_time(bits)
        delays = self.scenario.delays
        if delays is not None:
            rng = stream(self.scenario.seed, "isl-delay", self._index(sat), action.message.iteration, self.metrics.events)
            duration += delays.comm_jitter(rng)
        transfer = _Transfer("isl", sat, action.to, action.message, bits)
        self.queue.schedule(t + duration, EventKind.TRANSFER_COMPLETE, str(action.to), transfer)

    def _start_learning(self, sat: SatelliteId, action: StartLearning, t: float) -> None:
        training = self.scenario.training
        data = self.datasets[sat]
        idx = self._index(sat)
        rng = stream(self.scenario.seed, "shuffle", idx, action.iteration)
        update = client_opt(
            action.model, data, self.model, training.epochs, training.batch_size,
            training.learning_rate, rng, self.procs[sat].compressor,
        )
        duration = compute_time(self.scenario.compute, data.size, action.model.n_d, training.epochs, training.batch_size)
        delays = self.scenario.delays
        if delays is not None:
            duration += delays.learning_jitter(stream(self.scenario.seed, "learning-delay", idx, action.iteration))
        self.queue.schedule(t + duration, EventKind.LEARNING_COMPLETE, str(sat), (sat, action.iteration, update))

    def _schedule_upload(self, sat: SatelliteId, msg: Message, earliest: float) -> None:
        upload = self.rates.ps_time(msg.size_bits)
        w, start = self.contacts.first_usable(sat, earliest, upload)
        if w is None:
            raise DeadlockError(
                f"{sat} holds the aggregate of iteration {msg.iteration} but no PS window "
                f"after t={earliest:.1f} s fits its {upload:.1f} s upload",
                self._states(),
            )
        self.queue.schedule(start, EventKind.TIMER, str(sat), ("upload", sat, msg))

    def _enqueue_session(self, session: _Session, t: float) -> None:
        self.sessions.append(session)
        self._serve_sessions(t)

    def _index(self, sat: SatelliteId) -> int:
        return satellite_index(sat.plane, sat.slot, self.cfg.sats_per_plane)

    # -- parameter server ---------------------------------------------------

    def _ps_handle(self, cluster: int, msg: Message):
        if isinstance(self.ps, SyncPSState):
            return sync_ps_handle(self.ps, cluster, msg)
        return async_ps_handle(self.ps, cluster, msg, self._async_criterion)

    def _async_criterion(self, model: ModelParams) -> bool:
        acc = self._record_accuracy(self.queue.now, model, self.ps.version)
        return self.criterion.observe(acc)

    def _serve_sessions(self, t: float) -> None:
        """Start queued PS sessions until one occupies the link."""
        while not self.ps_busy and self.sessions and not self.finished:
            session = self.sessions.popleft()
            sat, msg = session.sat, session.message
            window = self.contacts.window_at(sat, t)
            if msg.kind is MessageKind.REQUEST:
                self.requesting.discard(sat)
                if window is None:
                    continue
                actions = self._ps_handle(msg.cluster, msg)
                action = actions[0]
                if action.kind is not PSActionKind.TRANSMIT:
                    self._schedule_poll(sat, t, window)
                    continue
                reply = Message(MessageKind.MODEL, action.iteration, msg.cluster, model=action.model)
                self._start_ps_transfer(_Transfer("ps", None, sat, reply, reply.size_bits), window, t)
            else:
                self._start_ps_transfer(_Transfer("ps", sat, None, msg, msg.size_bits), window, t)

    def _start_ps_transfer(self, transfer: _Transfer, window: ContactWindow | None, t: float) -> None:
        sat = transfer.receiver or transfer.sender
        duration = self.rates.ps_time(transfer.bits)
        if window is None or t + duration > window.end:
            # the window closes mid-transfer
            self.metrics.aborted_transfers += 1
            logger.warning("PS transfer of %s with %s aborted at t=%.1f, retrying later", transfer.message.kind.value, sat, t)
            if transfer.message.kind is MessageKind.AGGREGATE:
                self._schedule_upload(sat, transfer.message, t + _EPS)
            return
        self.ps_busy = True
        self.queue.schedule(t + duration, EventKind.TRANSFER_COMPLETE, PS_ID, transfer)

    def _schedule_poll(self, sat: SatelliteId, t: float, window: ContactWindow, delay: float | None = None) -> None:
        if sat in self.polling:
            return
        when = t + (self.scenario.orchestration.poll_interval if delay is None else delay)
        if when < window.end:
            self.polling.add(sat)
            self.queue.schedule(when, EventKind.TIMER, str(sat), ("poll", sat, window))

    def _ps_transfer_done(self, transfer: _Transfer, t: float) -> None:
        self.ps_busy = False
        msg = transfer.message
        self.metrics.ps_bits[msg.iteration] += transfer.bits
        if msg.kind is MessageKind.MODEL:
            sat = transfer.receiver
            self._ps_handle(msg.cluster, Message(MessageKind.ACK, msg.iteration, msg.cluster, sat))
            self._step(sat, SatEventKind.MODEL, t, message=msg)
        else:
            self._deliver_aggregate(transfer.sender, msg, t)
        self._serve_sessions(t)

    def _deliver_aggregate(self, sat: SatelliteId, msg: Message, t: float) -> None:
        actions = self._ps_handle(msg.cluster, msg)
        accepted = any(a.kind is PSActionKind.ACK for a in actions)
        if accepted and msg.failure_start is not None:
            self.metrics.failures.append((msg.iteration, msg.cluster, t - msg.failure_start))
        if accepted:
            self._step(sat, SatEventKind.UPLOAD_DONE, t)
        else:
            self._step(sat, SatEventKind.UPLOAD_REJECTED, t, message=msg)
        for action in actions:
            if action.kind is PSActionKind.ADVANCE:
                self._on_global_update(action.iteration, action.model, t)
                acc = self._record_accuracy(t, action.model, action.iteration)
                if self.criterion.observe(acc):
                    self.ps.finished = True
                    self._finish("criterion", t)
            elif action.kind is PSActionKind.INCORPORATED:
                self._on_global_update(action.iteration, action.model, t)
            elif action.kind is PSActionKind.FINISH:
                self._finish("criterion", t)

    def _on_global_update(self, iteration: int, model: ModelParams, t: float) -> None:
        self.metrics.iteration_times.append((iteration, t))
        if self.record_models:
            self.model_history.append(model)
        logger.info("global model %d at t=%.1f s (%.1f min)", iteration, t, t / 60)

    def _states(self) -> dict[str, str]:
        states = {str(s): p.describe() for s, p in self.procs.items()}
        states[PS_ID] = _describe_ps(self.ps)
        return states

    def _finish(self, reason: str, t: float) -> None:
        self.finished = True
        self.metrics.stop_reason = reason
        self.metrics.end_time = t

    # -- main loop ----------------------------------------------------------

    def _dispatch(self, event: Event) -> None:
        t = event.time
        if event.kind is EventKind.WINDOW_OPEN:
            sat, window = event.payload
            logger.debug("%s window opens at %.1f", sat, t)
            self.queue.schedule(window.end, EventKind.WINDOW_CLOSE, event.subject, event.payload)
            self._step(sat, SatEventKind.WINDOW_OPEN, t)
        elif event.kind is EventKind.WINDOW_CLOSE:
            sat, window = event.payload
            self._schedule_window(sat, window.end + _EPS)
        elif event.kind is EventKind.LEARNING_COMPLETE:
            sat, iteration, update = event.payload
            self._step(sat, SatEventKind.LEARNING_DONE, t, update=update, iteration=iteration)
        elif event.kind is EventKind.TRANSFER_COMPLETE:
            transfer = event.payload
            if transfer.link == "ps":
                self._ps_transfer_done(transfer, t)
            else:
                self.metrics.isl_bits[transfer.message.iteration] += transfer.bits
                kind = {
                    MessageKind.PARAMS: SatEventKind.PARAMS,
                    MessageKind.PARTIAL: SatEventKind.PARTIAL,
                    MessageKind.NEWSINK: SatEventKind.NEWSINK,
                }[transfer.message.kind]
                self._step(transfer.receiver, kind, t, message=transfer.message)
        elif event.kind is EventKind.TIMER:
            purpose, sat, data = event.payload
            if purpose == "upload":
                self._enqueue_session(_Session(sat, data), t)
            elif purpose == "poll":
                self.polling.discard(sat)
                if self.procs[sat].idle and data.contains(t):
                    self._step(sat, SatEventKind.WINDOW_OPEN, t)

    def run(self) -> Metrics:
        horizon = self.scenario.horizon
        if not self.sats:
            logger.info("empty constellation, nothing to simulate")
            self.metrics.stop_reason = "empty"
            return self.metrics
        logger.info(
            "running %s: %d satellites, %s mode, ISL %s, horizon %.0f s",
            self.scenario.name, len(self.sats), self.scenario.orchestration.mode,
            "on" if self.scenario.orchestration.isl else "off", horizon,
        )
        for sat in self.sats:
            self._schedule_window(sat, 0.0)

        # windows that closed more than an orbit ago are never looked up again
        keep = orbital_period(self.cfg.altitude)
        pruned_at = 0.0
        while self.queue and not self.finished:
            if self.queue.peek_time() > horizon:
                break
            event = self.queue.pop()
            self.metrics.events += 1
            self._dispatch(event)
            if event.time - pruned_at > keep:
                self.contacts.forget_before(event.time - keep)
                pruned_at = event.time

        if not self.finished:
            if not self.queue and self.queue.now < horizon:
                raise DeadlockError(
                    f"event queue drained at t={self.queue.now:.1f} s without termination", self._states()
                )
            self.metrics.end_time = horizon if self.queue else self.queue.now
            self.metrics.stop_reason = "horizon"
        logger.info(
            "finished after %d global updates at t=%.1f s (%s)",
            self.metrics.updates, self.metrics.end_time, self.metrics.stop_reason,
        )
        return self.metrics


def _describe_ps(ps: SyncPSState | AsyncPSState) -> str:
    if isinstance(ps, SyncPSState):
        return f"sync n={ps.iteration} T={sorted(ps.transmitted)} R={sorted(ps.received)}"
    return f"async version={ps.version} A={sorted(ps.active)} B={sorted(ps.blocked)}"


def run(scenario: Scenario, **kwargs) -> Metrics:
    return Simulation(scenario, **kwargs).run()


def write_run_outputs(metrics: Metrics, out_dir: str | Path, metadata: dict | None = None) -> list[Path]:
    """accuracy.csv, traffic.csv, failures.csv and metadata.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "accuracy.csv", out / "traffic.csv", out / "failures.csv", out / "metadata.json"]
    metrics.accuracy_frame().to_csv(paths[0], index=False)
    metrics.traffic_frame().to_csv(paths[1], index=False)
    metrics.failure_frame().to_csv(paths[2], index=False)
    meta = dict(metadata or {})
    meta["run"] = {
        "stop_reason": metrics.stop_reason,
        "end_time_s": metrics.end_time,
        "updates": metrics.updates,
        "events": metrics.events,
        "aborted_transfers": metrics.aborted_transfers,
    }
    if metrics.rates is not None:
        meta["link_rates"] = {
            "isl_rate_bps": metrics.rates.isl_rate,
            "ps_rate_bps": metrics.rates.ps_rate,
            "isl_distance_m": metrics.rates.isl_distance,
            "ps_distance_m": metrics.rates.ps_distance,
        }
    paths[3].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def format_run_report(metrics: Metrics, title: str = "SIMULATION RUN") -> str:
    lines = [
        "=" * 70,
        f"  {title}",
        "=" * 70,
        "",
        "TIMELINE",
        "-" * 40,
        f"  Stop reason:           {metrics.stop_reason:>12}",
        f"  Simulated time:        {metrics.end_time / 3600:>9.2f} h",
        f"  Global updates:        {metrics.updates:>12d}",
        f"  Events processed:      {metrics.events:>12d}",
    ]
    if metrics.iteration_times:
        first = metrics.iteration_times[0][1]
        lines.append(f"  First update at:       {first / 60:>9.1f} min")
    if metrics.final_accuracy is not None:
        lines += ["", "ACCURACY", "-" * 40, f"  Final top-1:           {metrics.final_accuracy:>12.4f}"]
    lines += [
        "",
        "TRAFFIC",
        "-" * 40,
        f"  ISL bits:              {metrics.total_isl_bits:>12.4g}",
        f"  PS-link bits:          {metrics.total_ps_bits:>12.4g}",
        f"  Aborted PS transfers:  {metrics.aborted_transfers:>12d}",
    ]
    if metrics.failures:
        delays = [d for _, _, d in metrics.failures]
        lines += [
            "",
            "SINK FAILURES",
            "-" * 40,
            f"  Handled:               {len(delays):>12d}",
            f"  Mean delivery delay:   {np.mean(delays):>10.1f} s",
        ]
    lines += ["", "=" * 70]
    return "\n".join(lines)
