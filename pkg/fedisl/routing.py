"""Intra-plane routing: aggregation trees, parameter flooding, partial aggregation,
predictive sink selection and sink-failure handling.

Slots are 1-based ring positions; slot i+1 trails slot i along the orbit.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable

from .config import SatelliteId
from .contacts import ContactPlan, ContactWindow
from .errors import DomainError, InfeasibleLinkError, PlanningError, ProtocolError
from .flcore import Gradient, add_gradients
from .links import C0

logger = logging.getLogger(__name__)


def ring_distance(a: int, b: int, K: int) -> int:
    d = (a - b) % K
    return min(d, K - d)


def successor(slot: int, K: int) -> int:
    return slot % K + 1


def predecessor(slot: int, K: int) -> int:
    return (slot - 2) % K + 1


def next_hop_toward(K: int, src: int, dst: int) -> int:
    """Next slot on the shortest ring path; antipodal ties go to the successor."""
    if src == dst:
        return src
    if (dst - src) % K <= (src - dst) % K:
        return successor(src, K)
    return predecessor(src, K)


@dataclass(frozen=True)
class AggregationTree:
    plane: int
    num_slots: int
    sink: int  # slot of the root
    parent: dict[int, int]

    @property
    def sink_id(self) -> SatelliteId:
        return SatelliteId(self.plane, self.sink)

    def children(self, slot: int) -> list[int]:
        return sorted(s for s, p in self.parent.items() if p == slot)

    def depth(self, slot: int) -> int:
        return ring_distance(slot, self.sink, self.num_slots)

    @property
    def height(self) -> int:
        return max((self.depth(s) for s in range(1, self.num_slots + 1)), default=0)

    def path_to_sink(self, slot: int) -> list[int]:
        path = [slot]
        while path[-1] != self.sink:
            path.append(self.parent[path[-1]])
        return path


def build_aggregation_tree(K: int, sink_slot: int, plane: int = 1) -> AggregationTree:
    """Shortest-path in-tree over a K-ring rooted at ``sink_slot``.

    For even K the antipode of the sink is equidistant in both directions; its
    parent is its successor.
    """
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    if not 1 <= sink_slot <= K:
        raise DomainError(f"sink slot {sink_slot} outside 1..{K}")
    parent = {}
    for slot in range(1, K + 1):
        if slot == sink_slot:
            continue
        ahead = (sink_slot - slot) % K  # hops walking towards higher slots
        behind = (slot - sink_slot) % K
        parent[slot] = successor(slot, K) if ahead <= behind else predecessor(slot, K)
    return AggregationTree(plane, K, sink_slot, parent)


@dataclass(frozen=True)
class FloodHop:
    sender: int
    receiver: int
    hop: int
    duplicate: bool


def forward_targets(K: int, origin: int, slot: int) -> list[int]:
    """Neighbours ``slot`` passes fresh parameters to: those farther from the origin."""
    if K == 1:
        return []
    if slot == origin:
        ahead, behind = successor(slot, K), predecessor(slot, K)
        return [ahead] if ahead == behind else [ahead, behind]
    here = ring_distance(slot, origin, K)
    return [n for n in (successor(slot, K), predecessor(slot, K)) if ring_distance(n, origin, K) > here]


def flood_schedule(K: int, origin: int) -> list[FloodHop]:
    """Every ISL transmission of one flooding round, in hop order."""
    received = {origin}
    frontier = [origin]
    hops = []
    hop = 0
    while frontier:
        hop += 1
        nxt = []
        for sender in frontier:
            for receiver in forward_targets(K, origin, sender):
                dup = receiver in received
                hops.append(FloodHop(sender, receiver, hop, dup))
                if not dup:
                    received.add(receiver)
                    nxt.append(receiver)
        frontier = nxt
    return hops


@dataclass(eq=False)
class PartialAggregate:
    payload: Gradient
    contributors: frozenset[int]
    iteration: int
    plane: int = 1

    @property
    def weight(self) -> float:
        return self.payload.weight

    @property
    def size_bits(self) -> int:
        return self.payload.wire_bits


def partial_aggregate(
    own: Gradient, own_slot: int, iteration: int, incoming: list[PartialAggregate], plane: int = 1
) -> PartialAggregate:
    """Own weighted gradient plus everything received from the subtree."""
    contributors = {own_slot}
    total = own
    for part in incoming:
        if part.iteration != iteration:
            raise ProtocolError(f"partial for iteration {part.iteration} mixed into iteration {iteration}")
        overlap = contributors & part.contributors
        if overlap:
            raise ProtocolError(f"slots {sorted(overlap)} contributed twice in iteration {iteration}")
        contributors |= part.contributors
        total = add_gradients(total, part.payload)
    return PartialAggregate(total, frozenset(contributors), iteration, plane)


def estimate_aggregation_time(
    t_l: float,
    K_p: int,
    param_bits: float,
    gradient_bits: float,
    rate: float,
    distance: float,
    routed_gradient_bits: float | None = None,
) -> float:
    """Predicted time from custody until the sink holds the plane aggregate.

    ``routed_gradient_bits`` replaces ceil(K_p/2) * gradient_bits when the
    gradients are sparsified (see :func:`fedisl.sparsify.sparse_routing_size`).
    """
    if not rate > 0:
        raise InfeasibleLinkError(f"ISL rate must be > 0, got {rate}")
    H = math.ceil(K_p / 2)
    grad = H * gradient_bits if routed_gradient_bits is None else routed_gradient_bits
    return t_l + (H * param_bits + grad) / rate + H * 2 * distance / C0


@dataclass(frozen=True)
class SinkPlan:
    sink: SatelliteId
    decision_time: float
    planned_epoch: float
    window: ContactWindow | None
    rate_limit_stamp: float | None = None

    def __post_init__(self):
        if self.planned_epoch < self.decision_time:
            raise DomainError("planned epoch precedes the decision time")


def select_sink(
    contacts: ContactPlan,
    plane_sats: list[SatelliteId],
    t_now: float,
    T_hat: float,
    upload_time: float,
    horizon: float,
) -> SinkPlan:
    """Pick the plane member best placed to upload at t_now + T_hat.

    Prefers the satellite visible then with the longest remaining window; if
    nobody is visible or that window cannot carry the upload, the first
    satellite to reach a usable window afterwards, planned for the start of
    that upload.
    """
    t_eval = t_now + T_hat
    best = None
    for sat in plane_sats:
        w = contacts.window_at(sat, t_eval)
        if w is not None and (best is None or w.end > best.end):
            best = w
    if best is not None and best.end - t_eval >= upload_time:
        return SinkPlan(best.satellite, t_now, t_eval, best)

    first = None
    for sat in plane_sats:
        w, start = contacts.first_usable(sat, t_eval, upload_time, horizon)
        if w is not None and (first is None or start < first[1]):
            first = (w, start)
    if first is None:
        raise PlanningError(f"no satellite of plane {plane_sats[0].plane} reaches the PS within {horizon:.0f} s")
    return SinkPlan(first[0].satellite, t_now, first[1], first[0])


def failure_time_estimate(
    hops: int, aggregate_bits: float, rate: float, distance: float, t0: float, t_g: float = 0.0
) -> float:
    """Earliest time the aggregate can sit on a satellite ``hops`` away from the sink."""
    if not rate > 0:
        raise InfeasibleLinkError(f"ISL rate must be > 0, got {rate}")
    if hops < 0:
        raise DomainError("hop count must be >= 0")
    return t0 + hops * (aggregate_bits / rate + distance / C0) + t_g


@dataclass(frozen=True)
class NewSinkChoice:
    sink: SatelliteId
    hops: int
    arrival_estimate: float  # t(k)
    delivery_time: float  # first PS contact at or after t(k)
    window: ContactWindow


def determine_new_sink(
    contacts: ContactPlan,
    plane_sats: list[SatelliteId],
    current_sink: SatelliteId,
    t0: float,
    upload_time: float,
    horizon: float,
    hop_time: float,
    t_g: float = 0.0,
) -> NewSinkChoice:
    """Satellite that can deliver the stranded aggregate to the PS soonest.

    ``hop_time`` is the per-hop forwarding time (aggregate_bits/rate + d/c_0
    in the simulator, the deterministic base in the Monte Carlo study). Ties
    go to fewer hops, then to the lower slot.
    """
    K = len(plane_sats)
    best, best_key = None, None
    for sat in plane_sats:
        h = ring_distance(sat.slot, current_sink.slot, K)
        t_k = t0 + h * hop_time + t_g
        remaining = t0 + horizon - t_k
        if remaining <= 0:
            continue
        w, start = contacts.first_usable(sat, t_k, upload_time, remaining)
        if w is None:
            continue
        key = (start, h, sat.slot)
        if best_key is None or key < best_key:
            best, best_key = NewSinkChoice(sat, h, t_k, start, w), key
    if best is None:
        raise PlanningError(f"no new sink for {current_sink} within {horizon:.0f} s")
    return best


@dataclass(frozen=True)
class PassTrace:
    hops: list[tuple[int, float]]  # (slot, time the aggregate arrived there)
    delivered_by: SatelliteId
    delivery_time: float


def pass_direction_step(direction: str) -> int:
    # the leading neighbour of slot i is slot i-1
    if direction == "leading":
        return -1
    if direction == "trailing":
        return 1
    raise DomainError(f"unknown pass direction {direction!r}")


def pass_to_neighbor(
    contacts: ContactPlan,
    plane_sats: list[SatelliteId],
    current_sink: SatelliteId,
    direction: str,
    t0: float,
    hop_time: float | Callable[[], float],
    upload_time: float,
    horizon: float,
) -> PassTrace:
    """Hand the aggregate around the ring until its holder sees the PS.

    After a full loop the aggregate is back at the origin, which waits for its
    next usable window.
    """
    K = len(plane_sats)
    step = pass_direction_step(direction)
    plane = current_sink.plane
    holder, t = current_sink.slot, t0
    trace = [(holder, t)]
    for _ in range(K):
        w = contacts.window_at(SatelliteId(plane, holder), t)
        if w is not None and w.usable_from(t, upload_time) is not None:
            return PassTrace(trace, SatelliteId(plane, holder), t)
        if K == 1:
            break
        holder = (holder - 1 + step) % K + 1
        t += hop_time() if callable(hop_time) else hop_time
        trace.append((holder, t))
    w, start = contacts.first_usable(current_sink, t, upload_time, horizon)
    if w is None:
        raise PlanningError(f"{current_sink} has no PS contact within {horizon:.0f} s after a full loop")
    return PassTrace(trace, current_sink, start)
