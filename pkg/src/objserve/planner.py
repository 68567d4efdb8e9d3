"""Admission control, replica sizing, placement, and runtime adaptation.

Replica counts come from the availability relation A = 1 - (1 - P)^N: the
plan uses the smallest N whose predicted availability meets the target,
with host stability P taken conservatively as the minimum across the chosen
datacenters. Placement fills declared locality preferences first, then
round-robins; strong consistency floors the group at three members.
Pre-warm capacity per rate-guaranteed function comes from the engine's
warm-floor formula, checked against the vcpu budget so an accepted plan can
never hit CapacityExceeded at deploy time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .engine import DEFAULT_CONCURRENCY, VCPU_PER_CONTAINER, warm_floor
from .errors import InfeasibleTarget, InsufficientDatacenters
from .model import (
    ConsistencyLevel,
    FunctionKind,
    LOCALITY_LOCAL,
    LOCALITY_NONE,
    ResolvedClass,
)
from .sim import ClusterTopology

MAX_REPLICAS = 64
HEARTBEAT_MS = 50
MISSED_HEARTBEATS = 3


def replicas_for(availability: float, stability: float) -> int:
    """Smallest N with 1 - (1 - P)^N >= A."""
    if availability >= 1.0:
        raise InfeasibleTarget("availability target must be < 1")
    if not (0.0 < availability < 1.0):
        raise ValueError("availability must be in (0,1)")
    if not (0.0 < stability < 1.0):
        raise ValueError("stability must be in (0,1)")
    n = 1
    while 1.0 - (1.0 - stability) ** n < availability:
        n += 1
        if n > MAX_REPLICAS:
            raise InfeasibleTarget(
                f"availability {availability} unreachable with stability {stability}")
    return n


def estimate_pods_baseline(target_rps: float, observed_rps: float, current_pods: int) -> int:
    """One round of the manual proportional-refinement comparator."""
    if observed_rps <= 0:
        raise ValueError("observed throughput must be positive")
    return math.ceil(target_rps / observed_rps * current_pods)


@dataclass
class Placement:
    datacenter: str
    node_id: str


@dataclass
class DeploymentPlan:
    cls: str
    replica_count: int = 1
    placements: list[Placement] = field(default_factory=list)
    consistency: ConsistencyLevel | None = None
    delta_ms: int | None = None
    prewarm: dict[str, int] = field(default_factory=dict)   # function -> containers
    accepted: bool = True
    reason: dict | None = None                               # {code, deficit, detail}
    stability: float = 0.0
    persistent: bool = False

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(p.node_id for p in self.placements)

    def to_dict(self) -> dict:
        return {
            "class": self.cls,
            "accepted": self.accepted,
            "replica_count": self.replica_count,
            "placements": [{"datacenter": p.datacenter, "node": p.node_id}
                           for p in self.placements],
            "consistency": self.consistency.value if self.consistency else None,
            "delta_ms": self.delta_ms,
            "prewarm": dict(sorted(self.prewarm.items())),
            "stability": self.stability,
            "persistent": self.persistent,
            "reason": self.reason,
        }


class Planner:
    """Stateful admission: round-robin cursors and vcpu reservations span
    successive class deployments on one topology."""

    def __init__(self, topology: ClusterTopology, allow_node_fallback: bool = True):
        self.topology = topology
        self.allow_node_fallback = allow_node_fallback
        self._dc_cursor = 0
        self._node_cursor: dict[str, int] = {}
        self._vcpu_free: dict[str, int] = {
            n.node_id: n.vcpu for dc in topology.datacenters for n in dc.nodes}

    # -- placement

    def _next_node(self, dc_name: str, used: set[str]) -> str | None:
        nodes = self.topology.dc_of(dc_name).nodes
        start = self._node_cursor.get(dc_name, 0)
        for i in range(len(nodes)):
            node = nodes[(start + i) % len(nodes)]
            if node.node_id not in used:
                self._node_cursor[dc_name] = (start + i + 1) % len(nodes)
                return node.node_id
        return None

    def _has_free_node(self, dc_name: str, used: set[str]) -> bool:
        return any(n.node_id not in used for n in self.topology.dc_of(dc_name).nodes)

    def place(self, n: int, locality) -> list[Placement]:
        """Preferred datacenters first, remainder round-robin; one replica per
        datacenter unless node-level fallback is allowed."""
        all_dcs = [d.name for d in self.topology.datacenters]
        preferred = list(locality) if isinstance(locality, tuple) else []
        for dc in preferred:
            self.topology.dc_of(dc)                   # validates the name
        order: list[str] = list(preferred)
        rotation = [d for d in all_dcs if d not in preferred]
        if rotation:
            start = self._dc_cursor % len(rotation)
            order += rotation[start:] + rotation[:start]
            self._dc_cursor += 1
        if n > len(order) and not self.allow_node_fallback:
            raise InsufficientDatacenters(
                f"need {n} datacenters, only {len(order)} eligible")
        placements: list[Placement] = []
        used: set[str] = set()
        i = 0
        while len(placements) < n:
            dc = order[i % len(order)]
            node = self._next_node(dc, used)
            if node is not None:
                placements.append(Placement(dc, node))
                used.add(node)
            elif not any(self._has_free_node(d, used) for d in order):
                raise InsufficientDatacenters(
                    f"not enough distinct nodes for {n} replicas")
            i += 1
        return placements

    # -- admission

    def admit(self, resolved: ResolvedClass, registry, default_stability: float | None = None) -> DeploymentPlan:
        """Accept-or-reject with a machine-readable first violation."""
        sla = resolved.sla
        targets = [sla.availability] + [
            f.sla.availability for f in resolved.functions.values()]
        availability = max((a for a in targets if a is not None), default=None)

        consistency = sla.consistency.level if sla.consistency else None
        delta_ms = None
        if sla.consistency and sla.consistency.staleness_sec is not None:
            delta_ms = int(sla.consistency.staleness_sec * 1000)

        locality = sla.locality
        pref_dcs = locality if isinstance(locality, tuple) else ()
        stabilities = [self.topology.dc_of(d).stability for d in pref_dcs] or \
                      [d.stability for d in self.topology.datacenters]
        stability = min(stabilities) if default_stability is None else default_stability

        try:
            n = replicas_for(availability, stability) if availability else 1
        except InfeasibleTarget as exc:
            return DeploymentPlan(cls=resolved.qualified, accepted=False,
                                  reason={"code": "InfeasibleTarget", "detail": str(exc)})
        if consistency is ConsistencyLevel.STRONG:
            n = max(n, 3)                 # quorum floor

        try:
            placements = self.place(n, locality)
        except InsufficientDatacenters as exc:
            return DeploymentPlan(cls=resolved.qualified, accepted=False, replica_count=n,
                                  reason={"code": "InsufficientDatacenters", "detail": str(exc)})

        prewarm: dict[str, int] = {}
        reservations: dict[str, int] = {}
        for fn in sorted(resolved.functions.values(), key=lambda f: f.name):
            if fn.spec.kind is not FunctionKind.TASK:
                continue
            rate = fn.sla.throughput_rps
            if not rate:
                continue
            service_ms = registry.service(fn.spec.handler_id).fixed_ms
            floor = warm_floor(rate, service_ms, DEFAULT_CONCURRENCY)
            prewarm[fn.name] = floor
            if fn.sla.locality == LOCALITY_LOCAL:
                hosts = [placements[0].node_id]
            else:
                hosts = [p.node_id for p in placements]
            for i in range(floor):
                host = hosts[i % len(hosts)]
                reservations[host] = reservations.get(host, 0) + VCPU_PER_CONTAINER
        for host, need in sorted(reservations.items()):
            if self._vcpu_free[host] < need:
                deficit = need - self._vcpu_free[host]
                return DeploymentPlan(
                    cls=resolved.qualified, accepted=False, replica_count=n,
                    placements=placements,
                    reason={"code": "CapacityExceeded", "deficit_vcpu": deficit,
                            "detail": f"node {host} lacks {deficit} vcpus"})
        for host, need in reservations.items():
            self._vcpu_free[host] -= need

        return DeploymentPlan(
            cls=resolved.qualified, replica_count=n, placements=placements,
            consistency=consistency, delta_ms=delta_ms, prewarm=prewarm,
            accepted=True, stability=stability,
            persistent=bool(sla.persistent),
        )


class PlannerControl:
    """Control-plane loop: heartbeat-based failure detection feeding the
    routing liveness view, plus corrective adaptation hooks."""

    def __init__(self, sim, node_id: str, invoker_nodes: list[str]):
        self.sim = sim
        self.node_id = node_id
        self.invoker_nodes = list(invoker_nodes)
        self.last_hb: dict[str, int] = {n: sim.now for n in invoker_nodes}
        self.believed_alive: dict[str, bool] = {n: True for n in invoker_nodes}
        self.flip_listeners: list = []        # fn(node_id, alive)
        self.actions: list[dict] = []
        for n in invoker_nodes:
            self._arm_heartbeat(n)
        sim.after(HEARTBEAT_MS, self._detector_tick)

    def _arm_heartbeat(self, node_id: str) -> None:
        self.sim.after(HEARTBEAT_MS, self._heartbeat, node_id)

    def _heartbeat(self, node_id: str) -> None:
        node = self.sim.nodes[node_id]
        if node.alive:
            self.sim.send(node_id, self.node_id, self._on_heartbeat, node_id,
                          kind="ctl:hb")
        self._arm_heartbeat(node_id)

    def _on_heartbeat(self, node_id: str) -> None:
        self.last_hb[node_id] = self.sim.now
        if not self.believed_alive[node_id]:
            self.believed_alive[node_id] = True
            self.actions.append({"at_ms": self.sim.now, "action": "rejoin",
                                 "node": node_id})
            for fn in self.flip_listeners:
                fn(node_id, True)

    def _detector_tick(self) -> None:
        deadline = MISSED_HEARTBEATS * HEARTBEAT_MS
        for node_id in self.invoker_nodes:
            if self.believed_alive[node_id] and \
                    self.sim.now - self.last_hb[node_id] > deadline:
                self.believed_alive[node_id] = False
                self.actions.append({"at_ms": self.sim.now, "action": "failover",
                                     "node": node_id})
                for fn in self.flip_listeners:
                    fn(node_id, False)
        self.sim.after(HEARTBEAT_MS, self._detector_tick)

    def first_live(self, candidates: list[str]) -> str | None:
        for c in candidates:
            if self.believed_alive.get(c, True):
                return c
        return None
