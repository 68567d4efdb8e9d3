"""Deterministic discrete-event substrate.

Everything in the platform runs as event handlers on this loop: a virtual
clock in integer milliseconds, seeded randomness, message delivery over a
latency/partition-modeled network, and failure injection. Identical
(topology, chaos, seed, workload) inputs produce identical traces; the loop
is the single execution authority and handlers must never block.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass

from .errors import SchemaError, SimEnded

# Default container/node recovery delay after an injected kill (not a
# measured value; configurable per chaos event).
DEFAULT_RESTART_MS = 2000


# --- topology --------------------------------------------------------------

@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    vcpu: int


@dataclass(frozen=True)
class DatacenterSpec:
    name: str
    tier: str                      # "edge" | "cloud"
    nodes: tuple[NodeSpec, ...]
    stability: float               # probability a replica host is operational


@dataclass(frozen=True)
class LinkSpec:
    latency_ms: int                # one-way


class ClusterTopology:
    def __init__(self, datacenters: list[DatacenterSpec], links: dict[tuple[str, str], LinkSpec]):
        self.datacenters = list(datacenters)
        self.links = dict(links)
        self._validate()

    def _validate(self) -> None:
        names = [d.name for d in self.datacenters]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate datacenter names")
        for dc in self.datacenters:
            if not dc.nodes:
                raise SchemaError(f"datacenter {dc.name!r} has no nodes")
            if not (0.0 < dc.stability < 1.0):
                raise SchemaError(f"datacenter {dc.name!r} stability must be in (0,1)")
            for n in dc.nodes:
                if n.vcpu < 1:
                    raise SchemaError(f"node {n.node_id!r} vcpu must be >= 1")
            if dc.tier not in ("edge", "cloud"):
                raise SchemaError(f"datacenter {dc.name!r} tier must be edge|cloud")
        for (a, b), link in list(self.links.items()):
            if link.latency_ms < 0:
                raise SchemaError(f"negative latency on link {a}-{b}")
            self.links[(b, a)] = link
        # intra-dc latency must not exceed any inter-dc latency
        intra = [self.links[(d.name, d.name)].latency_ms
                 for d in self.datacenters if (d.name, d.name) in self.links]
        inter = [l.latency_ms for (a, b), l in self.links.items() if a != b]
        if intra and inter and max(intra) > min(inter):
            raise SchemaError("intra-dc latency exceeds inter-dc latency")

    def dc_of(self, name: str) -> DatacenterSpec:
        for d in self.datacenters:
            if d.name == name:
                return d
        raise SchemaError(f"unknown datacenter {name!r}")

    def latency(self, dc_a: str, dc_b: str) -> int:
        link = self.links.get((dc_a, dc_b))
        if link is None:
            raise SchemaError(f"no link between {dc_a!r} and {dc_b!r}")
        return link.latency_ms

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterTopology":
        unknown = set(doc) - {"datacenters", "links"}
        if unknown:
            raise SchemaError(f"unknown topology keys: {sorted(unknown)}")
        dcs = []
        for d in doc.get("datacenters", []):
            unknown = set(d) - {"name", "tier", "nodes", "stability"}
            if unknown:
                raise SchemaError(f"unknown datacenter keys: {sorted(unknown)}")
            nodes = tuple(NodeSpec(n["id"], int(n["vcpu"])) for n in d["nodes"])
            dcs.append(DatacenterSpec(d["name"], d["tier"], nodes, float(d["stability"])))
        links = {}
        for l in doc.get("links", []):
            unknown = set(l) - {"a", "b", "latency_ms"}
            if unknown:
                raise SchemaError(f"unknown link keys: {sorted(unknown)}")
            links[(l["a"], l["b"])] = LinkSpec(int(l["latency_ms"]))
        return cls(dcs, links)

    @classmethod
    def from_file(cls, path: str) -> "ClusterTopology":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# --- chaos -----------------------------------------------------------------

@dataclass(frozen=True)
class ChaosEvent:
    at_ms: int
    kind: str                      # partition_start|partition_heal|node_kill|mtbf_failures
    a: str | None = None
    b: str | None = None
    node: str | None = None
    scope: tuple[str, ...] = ()
    mtbf_ms: int = 0
    restart_after_ms: int = DEFAULT_RESTART_MS


class ChaosSchedule:
    def __init__(self, events: list[ChaosEvent]):
        self.events = list(events)
        self._validate()

    def _validate(self) -> None:
        times = [e.at_ms for e in self.events]
        if times != sorted(times):
            raise SchemaError("chaos events must be sorted by virtual time")
        open_pairs: set[tuple[str, str]] = set()
        for e in self.events:
            if e.kind == "partition_start":
                open_pairs.add(_pair(e.a, e.b))
            elif e.kind == "partition_heal":
                if _pair(e.a, e.b) not in open_pairs:
                    raise SchemaError(f"heal at {e.at_ms} without matching partition start")
                open_pairs.discard(_pair(e.a, e.b))

    @classmethod
    def from_dict(cls, doc: dict) -> "ChaosSchedule":
        unknown = set(doc) - {"events"}
        if unknown:
            raise SchemaError(f"unknown chaos keys: {sorted(unknown)}")
        events = []
        for e in doc.get("events", []):
            allowed = {"at_ms", "kind", "a", "b", "node", "scope", "mtbf_ms", "restart_after_ms"}
            unknown = set(e) - allowed
            if unknown:
                raise SchemaError(f"unknown chaos event keys: {sorted(unknown)}")
            kind = e["kind"]
            if kind not in ("partition_start", "partition_heal", "node_kill", "mtbf_failures"):
                raise SchemaError(f"unknown chaos kind {kind!r}")
            scope = e.get("scope", [])
            if isinstance(scope, str):
                scope = [scope]
            events.append(ChaosEvent(
                at_ms=int(e["at_ms"]), kind=kind, a=e.get("a"), b=e.get("b"),
                node=e.get("node"), scope=tuple(scope),
                mtbf_ms=int(e.get("mtbf_ms", 0)),
                restart_after_ms=int(e.get("restart_after_ms", DEFAULT_RESTART_MS)),
            ))
        return cls(events)

    @classmethod
    def from_file(cls, path: str) -> "ChaosSchedule":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


# --- nodes -----------------------------------------------------------------

class SimNode:
    """A host in the simulation.

    `durable` survives kills (disk analog); everything else a component
    keeps must be re-derived in its on_restart callback.
    """

    __slots__ = ("node_id", "dc", "tier", "vcpu", "alive", "external",
                 "durable", "_crash_cbs", "_restart_cbs")

    def __init__(self, node_id: str, dc: str, tier: str, vcpu: int, external: bool = False):
        self.node_id = node_id
        self.dc = dc
        self.tier = tier
        self.vcpu = vcpu
        self.alive = True
        self.external = external       # client/gateway endpoints, never killed
        self.durable: dict = {}
        self._crash_cbs: list = []
        self._restart_cbs: list = []

    def on_crash(self, cb) -> None:
        self._crash_cbs.append(cb)

    def on_restart(self, cb) -> None:
        self._restart_cbs.append(cb)


# --- the event loop --------------------------------------------------------

class Simulator:
    """Seeded, single-threaded event loop with a message-passing network."""

    def __init__(self, topology: ClusterTopology, seed: int = 0, trace: bool = False):
        self.topology = topology
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self._heap: list[list] = []
        self._seq = 0
        self._ended = False
        self.nodes: dict[str, SimNode] = {}
        self._partitioned: set[tuple[str, str]] = set()
        self._taps: list = []          # fn(now, src, dst, kind, payload)
        self._trace_on = trace
        self._trace_hash = hashlib.sha256()
        self.events_processed = 0
        for dc in topology.datacenters:
            for n in dc.nodes:
                self.nodes[n.node_id] = SimNode(n.node_id, dc.name, dc.tier, n.vcpu)

    # -- clock / scheduling

    def schedule(self, at: int, fn, *args) -> list:
        """Queue fn(*args) to run at virtual time `at`. Returns a cancellable handle."""
        if at < self.now:
            raise SimEnded(f"schedule at {at} < now {self.now}")
        self._seq += 1
        entry = [at, self._seq, fn, args]
        heapq.heappush(self._heap, entry)
        return entry

    def after(self, delay_ms: int, fn, *args) -> list:
        return self.schedule(self.now + delay_ms, fn, *args)

    @staticmethod
    def cancel(handle: list) -> None:
        handle[2] = None

    def run(self, until: int) -> None:
        """Execute all events with time <= until; leaves the clock at `until`."""
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= until:
            at, _, fn, args = pop(heap)
            if fn is None:
                continue
            self.now = at
            self.events_processed += 1
            fn(*args)
        if until > self.now:
            self.now = until

    # -- external endpoints (clients, gateways)

    def add_external(self, node_id: str, dc: str) -> SimNode:
        spec = self.topology.dc_of(dc)
        node = SimNode(node_id, dc, spec.tier, 0, external=True)
        self.nodes[node_id] = node
        return node

    # -- network

    def tap(self, fn) -> None:
        """Register a wire tap: fn(now, src, dst, kind) for every sent message."""
        self._taps.append(fn)

    def is_partitioned(self, dc_a: str, dc_b: str) -> bool:
        return _pair(dc_a, dc_b) in self._partitioned

    def send(self, src: str, dst: str, handler, payload, kind: str = "msg") -> bool:
        """Deliver handler(payload) on dst after link latency.

        Returns False when the message is dropped (partition or dead host);
        senders observe drops only via their own timeouts.
        """
        s = self.nodes[src]
        d = self.nodes[dst]
        for t in self._taps:
            t(self.now, src, dst, kind)
        if self._trace_on:
            self._trace_hash.update(b"%d|%s|%s|%s" % (self.now, src.encode(), dst.encode(), kind.encode()))
        if not s.alive or not d.alive:
            return False
        if src == dst:
            lat = 0
        else:
            if s.dc != d.dc and _pair(s.dc, d.dc) in self._partitioned:
                return False
            lat = self.topology.latency(s.dc, d.dc)
        self.schedule(self.now + lat, self._deliver, d, handler, payload)
        return True

    def _deliver(self, node: SimNode, handler, payload) -> None:
        if node.alive:
            handler(payload)

    def trace_digest(self) -> str:
        return self._trace_hash.hexdigest()

    # -- failure injection

    def kill_node(self, node_id: str, restart_after_ms: int = DEFAULT_RESTART_MS) -> None:
        node = self.nodes[node_id]
        if node.external:
            raise SchemaError(f"cannot kill external endpoint {node_id!r}")
        if not node.alive:
            return
        node.alive = False
        for cb in node._crash_cbs:
            cb()
        if restart_after_ms >= 0:
            self.after(restart_after_ms, self._restart_node, node)

    def _restart_node(self, node: SimNode) -> None:
        node.alive = True
        for cb in node._restart_cbs:
            cb()

    def start_partition(self, dc_a: str, dc_b: str) -> None:
        self._partitioned.add(_pair(dc_a, dc_b))

    def heal_partition(self, dc_a: str, dc_b: str) -> None:
        self._partitioned.discard(_pair(dc_a, dc_b))

    def apply_chaos(self, schedule: ChaosSchedule) -> None:
        for e in schedule.events:
            if e.kind == "partition_start":
                self.schedule(e.at_ms, self.start_partition, e.a, e.b)
            elif e.kind == "partition_heal":
                self.schedule(e.at_ms, self.heal_partition, e.a, e.b)
            elif e.kind == "node_kill":
                self.schedule(e.at_ms, self.kill_node, e.node, e.restart_after_ms)
            elif e.kind == "mtbf_failures":
                for node_id in self._expand_scope(e.scope):
                    self.schedule(e.at_ms, self._mtbf_arm, node_id, e.mtbf_ms, e.restart_after_ms)

    def _expand_scope(self, scope: tuple[str, ...]) -> list[str]:
        out = []
        for item in scope:
            if item == "all":
                out.extend(n for n, node in self.nodes.items() if not node.external)
            elif item.startswith("dc:"):
                dc = item[3:]
                out.extend(n.node_id for n in self.topology.dc_of(dc).nodes)
            else:
                if item not in self.nodes:
                    raise SchemaError(f"chaos scope names unknown node {item!r}")
                out.append(item)
        return out

    def _mtbf_arm(self, node_id: str, mtbf_ms: int, restart_ms: int) -> None:
        # inter-failure gap ~ normal(mtbf, mtbf/10), clipped >= 1ms
        gap = max(1, int(self.rng.normalvariate(mtbf_ms, mtbf_ms / 10)))
        self.after(gap, self._mtbf_fire, node_id, mtbf_ms, restart_ms)

    def _mtbf_fire(self, node_id: str, mtbf_ms: int, restart_ms: int) -> None:
        node = self.nodes[node_id]
        if node.alive:
            self.kill_node(node_id, restart_ms)
        self._mtbf_arm(node_id, mtbf_ms, restart_ms)
