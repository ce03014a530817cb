"""Parameter-server and satellite state machines.

The machines are pure bookkeeping: each handler consumes one message or event,
updates its state and returns the actions the caller (the simulator) must carry
out. Nothing here knows about the event queue or simulated time beyond the
timestamps it is handed.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .config import ConstellationConfig, FailureHandlingConfig, SatelliteId, TerminationConfig
from .contacts import ContactPlan, ContactWindow
from .errors import DomainError, PlanningError, ProtocolError
from .flcore import Gradient, ModelParams, apply_update, to_dense
from .links import LinkRates
from .routing import (
    AggregationTree,
    PartialAggregate,
    SinkPlan,
    build_aggregation_tree,
    determine_new_sink,
    estimate_aggregation_time,
    forward_targets,
    next_hop_toward,
    partial_aggregate,
    pass_direction_step,
    select_sink,
)
from .sparsify import TopQCompressor

logger = logging.getLogger(__name__)

MAX_UPLOAD_ATTEMPTS = 3  # PS rejections before a sink drops its aggregate


@dataclass(frozen=True)
class ClusterSet:
    members: tuple[frozenset[SatelliteId], ...]  # cluster c is members[c - 1]

    def __post_init__(self):
        seen = set()
        for group in self.members:
            if seen & group:
                raise DomainError("clusters must be pairwise disjoint")
            seen |= group
        object.__setattr__(self, "_index", {s: c for c, g in enumerate(self.members, 1) for s in g})

    def __len__(self) -> int:
        return len(self.members)

    def cluster_of(self, sat: SatelliteId) -> int:
        return self._index[sat]

    @classmethod
    def by_plane(cls, constellation: ConstellationConfig) -> "ClusterSet":
        return cls(tuple(frozenset(constellation.plane_satellites(p)) for p in range(1, constellation.num_planes + 1)))

    @classmethod
    def per_satellite(cls, constellation: ConstellationConfig) -> "ClusterSet":
        return cls(tuple(frozenset([s]) for s in constellation.satellites()))


class MessageKind(str, Enum):
    REQUEST = "request"
    MODEL = "model"
    AGGREGATE = "aggregate"
    ACK = "ack"
    PARAMS = "params"
    PARTIAL = "partial"
    NEWSINK = "newsink"


@dataclass(eq=False)
class Message:
    kind: MessageKind
    iteration: int = 0
    cluster: int | None = None
    sender: SatelliteId | None = None
    model: ModelParams | None = None  # MODEL, PARAMS
    aggregate: PartialAggregate | None = None  # AGGREGATE, PARTIAL, NEWSINK
    plan: SinkPlan | None = None  # PARAMS
    origin: int | None = None  # PARAMS: slot of the custodian
    new_sink: SatelliteId | None = None  # NEWSINK; None while being passed around
    window: ContactWindow | None = None  # NEWSINK: window the new sink should use
    pass_hops: int = 0
    failure_start: float | None = None  # when the original sink gave up on its window
    rejections: int = 0  # AGGREGATE: times the PS has turned this upload away

    @property
    def size_bits(self) -> int:
        if self.kind in (MessageKind.MODEL, MessageKind.PARAMS):
            return self.model.size_bits
        if self.kind in (MessageKind.AGGREGATE, MessageKind.PARTIAL, MessageKind.NEWSINK):
            return self.aggregate.size_bits
        return 0


# -- parameter server ---------------------------------------------------------


class PSActionKind(str, Enum):
    TRANSMIT = "transmit"  # send the model to the requesting cluster
    ACK = "ack"
    TERMINATE = "terminate"  # close the connection without a transfer
    REJECT = "reject"  # drop the aggregate and close
    ADVANCE = "advance"  # sync: a global iteration completed
    INCORPORATED = "incorporated"  # async: one cluster update applied
    FINISH = "finish"


@dataclass
class PSAction:
    kind: PSActionKind
    cluster: int | None = None
    iteration: int = 0
    model: ModelParams | None = None


class TerminationCriterion:
    """Max global updates, or a target accuracy held for ``patience`` evaluations."""

    def __init__(self, config: TerminationConfig):
        self.config = config
        self.updates = 0
        self.streak = 0

    def observe(self, accuracy: float | None) -> bool:
        self.updates += 1
        met = self.config.max_iterations is not None and self.updates >= self.config.max_iterations
        if self.config.target_accuracy is not None and accuracy is not None:
            self.streak = self.streak + 1 if accuracy >= self.config.target_accuracy else 0
            met = met or self.streak >= self.config.patience
        return met


def _malformed(agg: PartialAggregate | None, n_d: int) -> str | None:
    if agg is None:
        return "missing payload"
    if agg.payload.n_d != n_d:
        return f"dimension {agg.payload.n_d} != {n_d}"
    if not np.all(np.isfinite(to_dense(agg.payload))):
        return "non-finite entries"
    return None


@dataclass
class SyncPSState:
    model: ModelParams  # w^n, updated as cluster aggregates arrive
    served: ModelParams  # w^{n-1}, what requests receive during iteration n
    num_clusters: int
    total_weight: float
    server_lr: float = 1.0
    iteration: int = 1
    transmitted: set[int] = field(default_factory=set)
    received: set[int] = field(default_factory=set)
    finished: bool = False

    @classmethod
    def initial(cls, model: ModelParams, num_clusters: int, total_weight: float, server_lr: float = 1.0):
        return cls(model.copy(), model, num_clusters, total_weight, server_lr)


def sync_ps_handle(state: SyncPSState, cluster: int, msg: Message) -> list[PSAction]:
    n = state.iteration
    if msg.kind is MessageKind.REQUEST:
        if state.finished or cluster in state.transmitted:
            return [PSAction(PSActionKind.TERMINATE, cluster, n)]
        return [PSAction(PSActionKind.TRANSMIT, cluster, n, state.served)]

    if msg.kind is MessageKind.ACK:
        if msg.iteration == n and not state.finished:
            state.transmitted.add(cluster)
        return []

    if msg.kind is MessageKind.AGGREGATE:
        if msg.iteration != n or cluster in state.received or cluster not in state.transmitted:
            logger.warning("PS dropped aggregate of cluster %s for iteration %s (current %s)", cluster, msg.iteration, n)
            return [PSAction(PSActionKind.REJECT, cluster, n)]
        problem = _malformed(msg.aggregate, state.model.n_d)
        if problem:
            logger.warning("PS closed connection of cluster %s: %s", cluster, problem)
            return [PSAction(PSActionKind.REJECT, cluster, n)]
        state.model = apply_update(state.model, msg.aggregate.payload, state.total_weight, state.server_lr)
        state.received.add(cluster)
        actions = [PSAction(PSActionKind.ACK, cluster, n)]
        if len(state.received) == state.num_clusters:
            completed = state.model
            state.served = completed
            state.model = completed.copy()
            state.iteration += 1
            state.transmitted.clear()
            state.received.clear()
            actions.append(PSAction(PSActionKind.ADVANCE, None, n, completed))
        return actions

    raise ProtocolError(f"PS cannot handle {msg.kind.value} messages")


@dataclass
class AsyncPSState:
    model: ModelParams
    num_clusters: int
    total_weight: float
    server_lr: float = 1.0
    rate_limit: float = 0.0  # T_u, enforced by the sinks through the PARAMS stamp
    version: int = 0  # incorporations so far
    active: set[int] = field(default_factory=set)
    blocked: set[int] = field(default_factory=set)
    finished: bool = False


def async_ps_handle(
    state: AsyncPSState,
    cluster: int,
    msg: Message,
    criterion: Callable[[ModelParams], bool] | None = None,
) -> list[PSAction]:
    """Handle one message; ``criterion`` is evaluated after every incorporation."""
    if msg.kind is MessageKind.REQUEST:
        if state.finished or cluster in state.active or cluster in state.blocked:
            return [PSAction(PSActionKind.TERMINATE, cluster, state.version)]
        return [PSAction(PSActionKind.TRANSMIT, cluster, state.version, state.model)]

    if msg.kind is MessageKind.ACK:
        if not state.finished and cluster not in state.blocked:
            state.active.add(cluster)
        return []

    if msg.kind is MessageKind.AGGREGATE:
        if cluster not in state.active:
            logger.warning("PS dropped aggregate from inactive cluster %s", cluster)
            return [PSAction(PSActionKind.REJECT, cluster, state.version)]
        problem = _malformed(msg.aggregate, state.model.n_d)
        if problem:
            logger.warning("PS closed connection of cluster %s: %s", cluster, problem)
            state.active.discard(cluster)
            return [PSAction(PSActionKind.REJECT, cluster, state.version)]
        state.model = apply_update(state.model, msg.aggregate.payload, state.total_weight, state.server_lr)
        state.active.discard(cluster)
        state.version += 1
        actions = [
            PSAction(PSActionKind.ACK, cluster, state.version),
            PSAction(PSActionKind.INCORPORATED, cluster, state.version, state.model),
        ]
        if criterion is not None and criterion(state.model):
            state.blocked = set(range(1, state.num_clusters + 1)) - state.active
            if not state.active:
                state.finished = True
                actions.append(PSAction(PSActionKind.FINISH, None, state.version, state.model))
        else:
            state.blocked.clear()
        return actions

    raise ProtocolError(f"PS cannot handle {msg.kind.value} messages")


def async_rate_limit(
    plan: SinkPlan,
    T_hat: float,
    T_u: float,
    t_now: float,
    reselect: Callable[[float], SinkPlan],
) -> SinkPlan:
    """Stretch the planning horizon to T_u and stamp the plan with t_now + T_u.

    ``reselect(horizon)`` re-runs sink selection for a longer horizon.
    """
    if T_u < 0:
        raise DomainError("T_u must be >= 0")
    if T_u == 0:
        return plan
    if T_u > T_hat:
        plan = reselect(T_u)
    return replace(plan, rate_limit_stamp=t_now + T_u)


def rate_limited_start(plan: SinkPlan | None, t_ready: float, upload_time: float) -> float:
    """When the sink should start its upload: at the stamp, unless that misses the window."""
    if plan is None or plan.rate_limit_stamp is None or plan.rate_limit_stamp <= t_ready:
        return t_ready
    if plan.window is not None and plan.window.usable_from(plan.rate_limit_stamp, upload_time) is not None:
        return plan.rate_limit_stamp
    return t_ready


# -- satellite process --------------------------------------------------------


class Role(str, Enum):
    IDLE = "idle"
    CUSTODIAN = "custodian"
    RELAY = "relay"
    SINK = "sink"


class LearningStatus(str, Enum):
    IDLE = "idle"
    RUNNING = "running"
    DONE = "done"


class SatEventKind(str, Enum):
    WINDOW_OPEN = "window-open"
    MODEL = "model"  # custody of the global model from the PS
    PARAMS = "params"
    LEARNING_DONE = "learning-done"
    PARTIAL = "partial"
    NEWSINK = "newsink"
    UPLOAD_DONE = "upload-done"
    UPLOAD_REJECTED = "upload-rejected"


@dataclass
class SatEvent:
    kind: SatEventKind
    time: float
    message: Message | None = None
    update: Gradient | None = None
    iteration: int | None = None  # LEARNING_DONE


@dataclass
class SendIsl:
    to: SatelliteId
    message: Message


@dataclass
class StartLearning:
    iteration: int
    model: ModelParams


@dataclass
class RequestModel:
    pass


@dataclass
class Upload:
    message: Message
    earliest: float  # the simulator uses the first usable PS window from here on


@dataclass
class PlaneContext:
    """Static knowledge a satellite uses for routing decisions inside its plane."""

    plane: int
    plane_sats: list[SatelliteId]
    contacts: ContactPlan
    rates: LinkRates
    param_bits: int
    gradient_bits: float  # S of one compressed gradient
    aggregate_bits: float  # predicted S of the full plane aggregate (PS upload)
    learning_time: float  # t_l used for T_hat
    failure: FailureHandlingConfig
    search_horizon: float  # seconds
    isl: bool = True
    rate_limit: float = 0.0  # T_u, async only
    routed_gradient_bits: float | None = None  # sparse routing size, None when dense

    @property
    def K(self) -> int:
        return len(self.plane_sats)

    def sat(self, slot: int) -> SatelliteId:
        return SatelliteId(self.plane, slot)


@dataclass
class SatProcState:
    sat: SatelliteId
    cluster: int
    iteration: int = -1  # newest iteration whose parameters this satellite processed
    role: Role = Role.IDLE
    plan: SinkPlan | None = None
    tree: AggregationTree | None = None
    pending: set[int] = field(default_factory=set)  # children not heard from yet
    incoming: list[PartialAggregate] = field(default_factory=list)
    learning: LearningStatus = LearningStatus.IDLE
    own: Gradient | None = None
    compressor: TopQCompressor | None = None  # residual state lives here
    uploading: bool = False  # holds an aggregate for the PS
    sink_window: ContactWindow | None = None
    stamp: float | None = None  # rate-limit stamp without ISLs

    @property
    def idle(self) -> bool:
        return self.role is Role.IDLE and not self.uploading

    def describe(self) -> str:
        return (
            f"n={self.iteration} role={self.role.value} learning={self.learning.value} "
            f"pending={sorted(self.pending)} uploading={self.uploading}"
        )


def _plan_sink(ctx: PlaneContext, state: SatProcState, t: float, horizon: float, upload: float) -> SinkPlan:
    try:
        return select_sink(ctx.contacts, ctx.plane_sats, t, horizon, upload, ctx.search_horizon)
    except PlanningError as exc:
        logger.warning("%s keeps the sink role: %s", state.sat, exc)
        return SinkPlan(state.sat, t, t + horizon, None)


def _join_iteration(state, ctx, t, n, model, plan, origin):
    state.iteration = n
    state.plan = plan
    state.tree = build_aggregation_tree(ctx.K, plan.sink.slot, ctx.plane)
    state.pending = set(state.tree.children(state.sat.slot))
    state.incoming = []
    state.own = None
    state.learning = LearningStatus.RUNNING
    actions = [
        SendIsl(
            ctx.sat(slot),
            Message(MessageKind.PARAMS, n, state.cluster, state.sat, model=model, plan=plan, origin=origin),
        )
        for slot in forward_targets(ctx.K, origin, state.sat.slot)
    ]
    actions.append(StartLearning(n, model))
    return actions


def _on_window_open(state, event, ctx):
    return [RequestModel()] if state.idle else []


def _on_model(state, event, ctx):
    msg, t = event.message, event.time
    if msg.iteration <= state.iteration:
        logger.warning("%s ignored a second model for iteration %s", state.sat, msg.iteration)
        return []
    if not ctx.isl:
        state.iteration = msg.iteration
        state.role = Role.SINK
        state.plan, state.tree = None, None
        state.pending, state.incoming, state.own = set(), [], None
        state.learning = LearningStatus.RUNNING
        state.stamp = t + ctx.rate_limit if ctx.rate_limit > 0 else None
        return [StartLearning(msg.iteration, msg.model)]

    if ctx.K == 1:
        T_hat = ctx.learning_time
    else:
        T_hat = estimate_aggregation_time(
            ctx.learning_time, ctx.K, ctx.param_bits, ctx.gradient_bits,
            ctx.rates.isl_rate, ctx.rates.isl_distance, ctx.routed_gradient_bits,
        )
    upload = ctx.rates.ps_time(ctx.aggregate_bits)
    plan = _plan_sink(ctx, state, t, T_hat, upload)
    if ctx.rate_limit > 0:
        plan = async_rate_limit(plan, T_hat, ctx.rate_limit, t, lambda h: _plan_sink(ctx, state, t, h, upload))
    state.role = Role.SINK if plan.sink == state.sat else Role.CUSTODIAN
    logger.debug("%s took custody of iteration %s, sink %s at %.1f", state.sat, msg.iteration, plan.sink, plan.planned_epoch)
    return _join_iteration(state, ctx, t, msg.iteration, msg.model, plan, state.sat.slot)


def _on_params(state, event, ctx):
    msg = event.message
    if msg.iteration <= state.iteration:
        logger.debug("%s dropped duplicate parameters for iteration %s", state.sat, msg.iteration)
        return []
    state.role = Role.SINK if msg.plan.sink == state.sat else Role.RELAY
    return _join_iteration(state, ctx, event.time, msg.iteration, msg.model, msg.plan, msg.origin)


def _on_learning_done(state, event, ctx):
    if event.iteration is not None and event.iteration != state.iteration:
        logger.warning("%s discarded a stale local update for iteration %s", state.sat, event.iteration)
        return []
    state.own = event.update
    state.learning = LearningStatus.DONE
    return _try_aggregate(state, event.time, ctx)


def _on_partial(state, event, ctx):
    msg = event.message
    if msg.iteration != state.iteration or state.tree is None:
        logger.warning("%s dropped stale partial of iteration %s (at %s)", state.sat, msg.iteration, state.iteration)
        return []
    child = msg.sender.slot
    if child not in state.pending:
        raise ProtocolError(f"{state.sat} got an unexpected partial from {msg.sender} in iteration {msg.iteration}")
    state.pending.discard(child)
    state.incoming.append(msg.aggregate)
    return _try_aggregate(state, event.time, ctx)


def _try_aggregate(state, t, ctx):
    if state.learning is not LearningStatus.DONE or state.pending:
        return []
    agg = partial_aggregate(state.own, state.sat.slot, state.iteration, state.incoming, state.sat.plane)
    state.learning = LearningStatus.IDLE
    state.own, state.incoming = None, []
    if state.tree is None or state.tree.sink == state.sat.slot:
        return _sink_ready(state, agg, t, ctx)
    state.role = Role.IDLE
    parent = ctx.sat(state.tree.parent[state.sat.slot])
    return [SendIsl(parent, Message(MessageKind.PARTIAL, state.iteration, state.cluster, state.sat, aggregate=agg))]


def _upload(state, agg, earliest, failure_start=None):
    state.uploading = True
    state.role = Role.SINK
    msg = Message(
        MessageKind.AGGREGATE, agg.iteration, state.cluster, state.sat, aggregate=agg, failure_start=failure_start
    )
    return [Upload(msg, earliest)]


def _sink_ready(state, agg, t, ctx):
    if not ctx.isl:
        earliest = max(t, state.stamp) if state.stamp is not None else t
        return _upload(state, agg, earliest)
    upload = ctx.rates.ps_time(agg.size_bits)
    window = state.plan.window
    if window is not None and window.usable_from(t, upload) is not None:
        return _upload(state, agg, rate_limited_start(state.plan, t, upload))
    logger.info("sink %s missed its PS window in iteration %s at t=%.1f", state.sat, agg.iteration, t)
    return _handle_failure(state, agg, t, ctx, failure_start=t)


def _handle_failure(state, agg, t, ctx, failure_start):
    scheme = ctx.failure.scheme
    if scheme == "none" or ctx.K == 1:
        return _upload(state, agg, t, failure_start)
    if scheme == "pass-to-neighbor":
        return _pass_along(state, agg, t, ctx, 0, failure_start)

    upload = ctx.rates.ps_time(agg.size_bits)
    hop = ctx.rates.isl_time(agg.size_bits)
    try:
        choice = determine_new_sink(
            ctx.contacts, ctx.plane_sats, state.sat, t, upload, ctx.search_horizon, hop, ctx.failure.guard_time
        )
    except PlanningError as exc:
        logger.warning("%s waits for its own next window: %s", state.sat, exc)
        return _upload(state, agg, t, failure_start)
    if choice.sink == state.sat:
        state.sink_window = choice.window
        return _upload(state, agg, choice.delivery_time, failure_start)
    state.role = Role.IDLE
    nxt = ctx.sat(next_hop_toward(ctx.K, state.sat.slot, choice.sink.slot))
    msg = Message(
        MessageKind.NEWSINK, agg.iteration, state.cluster, state.sat, aggregate=agg,
        new_sink=choice.sink, window=choice.window, failure_start=failure_start,
    )
    return [SendIsl(nxt, msg)]


def _pass_along(state, agg, t, ctx, hops, failure_start):
    upload = ctx.rates.ps_time(agg.size_bits)
    window = ctx.contacts.window_at(state.sat, t)
    if window is not None and window.usable_from(t, upload) is not None:
        return _upload(state, agg, t, failure_start)
    if hops >= ctx.K:
        # full loop: the origin holds the aggregate again and waits
        return _upload(state, agg, t, failure_start)
    state.role = Role.IDLE
    step = pass_direction_step(ctx.failure.pass_direction)
    nxt = ctx.sat((state.sat.slot - 1 + step) % ctx.K + 1)
    msg = Message(
        MessageKind.NEWSINK, agg.iteration, state.cluster, state.sat, aggregate=agg,
        pass_hops=hops + 1, failure_start=failure_start,
    )
    return [SendIsl(nxt, msg)]


def _on_newsink(state, event, ctx):
    msg, t = event.message, event.time
    agg = msg.aggregate
    if msg.new_sink is None:
        return _pass_along(state, agg, t, ctx, msg.pass_hops, msg.failure_start)
    if msg.new_sink != state.sat:
        nxt = ctx.sat(next_hop_toward(ctx.K, state.sat.slot, msg.new_sink.slot))
        return [SendIsl(nxt, replace(msg, sender=state.sat))]
    state.sink_window = msg.window
    upload = ctx.rates.ps_time(agg.size_bits)
    if msg.window is not None:
        start = msg.window.usable_from(t, upload)
        if start is not None:
            return _upload(state, agg, start, msg.failure_start)
    logger.info("new sink %s arrived too late for its window, handling the failure again", state.sat)
    return _handle_failure(state, agg, t, ctx, msg.failure_start)


def _on_upload_done(state, event, ctx):
    state.uploading = False
    state.role = Role.IDLE
    state.sink_window = None
    return []


def _on_upload_rejected(state, event, ctx):
    """Keep the aggregate and try again in the next PS window, a bounded number of times."""
    msg, t = event.message, event.time
    if msg is None or msg.aggregate is None:
        logger.warning("%s: PS rejected an upload of iteration %s", state.sat, state.iteration)
        return _on_upload_done(state, event, ctx)
    if msg.rejections + 1 >= MAX_UPLOAD_ATTEMPTS:
        logger.warning(
            "%s: PS rejected the aggregate of iteration %s %d times, dropping it",
            state.sat, msg.iteration, msg.rejections + 1,
        )
        return _on_upload_done(state, event, ctx)
    window = ctx.contacts.window_at(state.sat, t)
    earliest = window.end if window is not None else t
    logger.warning(
        "%s: PS rejected the aggregate of iteration %s, retrying from t=%.1f", state.sat, msg.iteration, earliest
    )
    state.uploading = True
    state.role = Role.SINK
    return [Upload(replace(msg, rejections=msg.rejections + 1), earliest)]


_HANDLERS = {
    SatEventKind.WINDOW_OPEN: _on_window_open,
    SatEventKind.MODEL: _on_model,
    SatEventKind.PARAMS: _on_params,
    SatEventKind.LEARNING_DONE: _on_learning_done,
    SatEventKind.PARTIAL: _on_partial,
    SatEventKind.NEWSINK: _on_newsink,
    SatEventKind.UPLOAD_DONE: _on_upload_done,
    SatEventKind.UPLOAD_REJECTED: _on_upload_rejected,
}


def satellite_step(state: SatProcState, event: SatEvent, ctx: PlaneContext) -> list:
    """Advance one satellite by one event; returns SendIsl / StartLearning / RequestModel / Upload actions."""
    return _HANDLERS[event.kind](state, event, ctx)
