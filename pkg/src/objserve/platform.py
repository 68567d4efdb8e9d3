"""Cluster assembly: deploys packages onto the simulated topology.

Builds one invoker + engine per node, a replica group per class (register
stores with anti-entropy, or a raft group for strong consistency), the
durable broker/document/blob services, and the control-plane loop that
feeds the routing liveness view. Client actors are external endpoints that
route requests hash-aware (primary first, then successors on timeout) and
record every operation into the history log for the checkers.

Desk-scale simplifications, by design: the broker, document store, blob
store, and planner run on never-failing service hosts (stable-storage
assumption), and clients consult the control plane's liveness table
directly rather than through per-dc ingress replicas.
"""

from __future__ import annotations

import copy
import itertools

from .dataflow import Dag, MacroRun, Orchestrator, build_dag
from .engine import NodeEngine
from .errors import NoQuorum, SchemaError
from .grid import (
    Invoker,
    ObjectRecord,
    RENOTIFY_INTERVAL_MS,
    SWEEP_INTERVAL_MS,
    ORPHAN_GRACE_MS,
    kv_key,
    record_key,
)
from .handlers import HandlerRegistry, default_registry
from .hashring import HashRing
from .model import (
    CallContext,
    ConsistencyLevel,
    FunctionKind,
    LOCALITY_LOCAL,
    PackageSpec,
    ResolvedClass,
    resolve_inheritance,
)
from .planner import DeploymentPlan, Planner, PlannerControl
from .raft import RaftMember
from .replication import GroupMember, LwwRegister, ReplicaGroup, ae_interval_for
from .sim import ClusterTopology, Simulator
from .storage import AsyncQueue, BlobStore, DocumentStore

# long enough to ride out a reactive cold start; failover-sensitive
# workloads pass their own attempt timeout
CLIENT_ATTEMPT_TIMEOUT_MS = 3_000
STRONG_ATTEMPT_TIMEOUT_MS = 1_500


class BrokerHost:
    """Durable async-invocation queue plus its notify/renotify loop."""

    def __init__(self, sim, node_id: str, platform: "Platform"):
        self.sim = sim
        self.node_id = node_id
        self.platform = platform
        self.queue = AsyncQueue()
        self.consumed: set[int] = set()
        sim.after(RENOTIFY_INTERVAL_MS, self._renotify_tick)

    def on_submit(self, msg: dict) -> None:
        offset, was_new = self.queue.append(
            msg["producer_id"], msg["producer_seq"], msg["object_id"],
            msg["cls"], msg["function"], msg["args"])
        entry = self.queue.entries_from(offset - 1)[0]
        inv_id = AsyncQueue.invocation_id(entry)
        if msg.get("reply_to"):
            node_id, handler = msg["reply_to"]
            self.sim.send(self.node_id, node_id, handler,
                          {"req_id": msg.get("req_id"), "ok": True,
                           "invocation_id": inv_id, "offset": offset,
                           "duplicate": not was_new},
                          kind="broker:ack")
        if was_new:
            self._notify(entry)

    def _notify(self, entry) -> None:
        owner = self.platform.primary_for(entry.cls, entry.object_id)
        if owner is None:
            return
        invoker = self.platform.invokers[owner]
        self.sim.send(self.node_id, owner, invoker.on_async_entry, {
            "offset": entry.offset, "cls": entry.cls, "object_id": entry.object_id,
            "function": entry.function, "args": entry.args,
            "invocation_id": AsyncQueue.invocation_id(entry),
        }, kind="broker:notify")

    def on_consumed(self, msg: dict) -> None:
        self.consumed.add(msg["offset"])
        self.queue.record_result(msg["invocation_id"], msg["result"])

    def _renotify_tick(self) -> None:
        for entry in self.queue.entries_from(0):
            if entry.offset not in self.consumed:
                self._notify(entry)
        self.sim.after(RENOTIFY_INTERVAL_MS, self._renotify_tick)

    def on_rescan(self, msg: dict) -> None:
        node_id = msg["node"]
        for entry in self.queue.entries_from(0):
            if entry.offset in self.consumed:
                continue
            if self.platform.primary_for(entry.cls, entry.object_id) == node_id:
                self._notify(entry)


class Platform:
    def __init__(self, sim: Simulator, packages: list[PackageSpec],
                 registry: HandlerRegistry | None = None,
                 allow_node_fallback: bool = True,
                 record_history: bool = False):
        self.sim = sim
        self.topology = sim.topology
        self.packages = list(packages)
        self.registry = registry or default_registry()
        self.record_history = record_history
        self.history: list[dict] = []

        self.resolved: dict[str, ResolvedClass] = {}
        for pkg in packages:
            others = [p for p in packages if p is not pkg]
            for rc in resolve_inheritance(pkg, others):
                self.resolved[rc.qualified] = rc

        self.blobstore = BlobStore(sim)
        self.blobstore.write_hook = (
            lambda oid, key, ver: self.crash_hook("blob_written", None))
        self.docstore = DocumentStore()

        self.invoker_nodes = [n.node_id for dc in self.topology.datacenters
                              for n in dc.nodes]
        svc_dc = self.topology.datacenters[-1].name       # cloud tier by convention
        sim.add_external("svc-broker", svc_dc)
        sim.add_external("svc-planner", svc_dc)
        self.broker = BrokerHost(sim, "svc-broker", self)
        self.control = PlannerControl(sim, "svc-planner", self.invoker_nodes)
        self.control.flip_listeners.append(self._on_liveness_flip)

        self.invokers: dict[str, Invoker] = {}
        self.engines: dict[str, NodeEngine] = {}
        for node_id in self.invoker_nodes:
            node = sim.nodes[node_id]
            self.invokers[node_id] = Invoker(sim, node, self)
            self.engines[node_id] = NodeEngine(sim, node, self.registry)

        self.planner = Planner(self.topology, allow_node_fallback)
        self.plans: dict[str, DeploymentPlan] = {}
        self.groups: dict[str, ReplicaGroup] = {}
        self.members: dict[str, dict[str, GroupMember]] = {}
        self.raft_groups: dict[str, dict[str, RaftMember]] = {}
        self.election_logs: dict[str, list] = {}
        self.rings: dict[str, HashRing] = {}
        self.commit_events: dict[str, list] = {}

        self.orchestrators: dict[str, Orchestrator] = {
            node_id: Orchestrator(sim, self._make_macro_invoke(node_id),
                                  self._macro_checkpoint)
            for node_id in self.invoker_nodes}
        self._macro_seq = 0

        # instrumentation
        self.locks: dict[str, dict] = {}
        self.crash_hooks: list = []
        self._wire_counts: dict[str, int] = {}
        sim.tap(self._count_wire)
        sim.after(SWEEP_INTERVAL_MS, self._sweep_tick)

        for qualified in sorted(self.resolved):
            self.deploy_class(qualified)

    # -- deployment

    def deploy_class(self, qualified: str) -> DeploymentPlan:
        resolved = self.resolved[qualified]
        plan = self.planner.admit(resolved, self.registry)
        self.plans[qualified] = plan
        if not plan.accepted:
            return plan
        mode = plan.consistency or ConsistencyLevel.RYW
        group = ReplicaGroup(
            cls=qualified, members=plan.members, mode=mode,
            delta_ms=plan.delta_ms,
            interval_ms=ae_interval_for(plan.delta_ms))
        self.groups[qualified] = group
        self.rings[qualified] = HashRing(list(plan.members))

        if mode is ConsistencyLevel.STRONG:
            log: list = []
            self.election_logs[qualified] = log
            members = {m: RaftMember(self.sim, qualified, m, plan.members, log)
                       for m in plan.members}
            for rm in members.values():
                rm.attach_peers(members)
                rm.commit_listeners.append(self._on_raft_commit)
            self.raft_groups[qualified] = members
            self.commit_events[qualified] = []
        else:
            members = {}
            for m in plan.members:
                gm = GroupMember(self.sim, group, m, self.docstore,
                                 persistent=plan.persistent, history=self.history)
                gm.store.listeners.append(self._make_invalidator(m))
                gm.flush_hook = (lambda n=m: self.crash_hook("persisted", n))
                members[m] = gm
            for gm in members.values():
                gm.attach_peers(members)
            self.members[qualified] = members

        for fn_name, floor in sorted(plan.prewarm.items()):
            fn = resolved.functions[fn_name]
            if fn.sla.locality == LOCALITY_LOCAL:
                hosts = [plan.members[0]]
            else:
                hosts = list(plan.members)
            per_host = self._split_floor(floor, len(hosts))
            for host, share in zip(hosts, per_host):
                if share:
                    self.engines[host].install_floor(
                        f"{qualified}.{fn_name}", fn.spec.handler_id, share)
        return plan

    @staticmethod
    def _split_floor(total: int, hosts: int) -> list[int]:
        base, extra = divmod(total, hosts)
        return [base + (1 if i < extra else 0) for i in range(hosts)]

    def _make_invalidator(self, node_id: str):
        def on_change(key: str, reg: LwwRegister) -> None:
            if key.startswith("rec:"):
                self.invokers[node_id].invalidate(key[4:], reg.stamp)
        return on_change

    def _on_raft_commit(self, group_id: str, entry, at_ms: int, node_id: str) -> None:
        # record each commit once, at the leader that drove it
        members = self.raft_groups[group_id]
        if members[node_id].role == "leader":
            self.commit_events[group_id].append(at_ms)

    def _on_liveness_flip(self, node_id: str, alive: bool) -> None:
        if alive:
            self.async_rescan(node_id)
        else:
            for qualified, group in self.groups.items():
                if node_id in group.members:
                    survivor = self.control.first_live(list(group.members))
                    if survivor:
                        self.async_rescan(survivor)

    # -- routing

    def resolved_class(self, qualified: str) -> ResolvedClass:
        if qualified not in self.resolved:
            raise SchemaError(f"unknown class {qualified!r}")
        return self.resolved[qualified]

    def member(self, cls: str, node_id: str) -> GroupMember:
        return self.members[cls][node_id]

    def candidates_for(self, cls: str, oid: str) -> list[str]:
        ring = self.rings.get(cls)
        if ring is None:
            return []
        pref = ring.preference(oid)
        live = [n for n in pref if self.control.believed_alive.get(n, True)]
        dead = [n for n in pref if n not in live]
        return live + dead

    def primary_for(self, cls: str, oid: str) -> str | None:
        if cls in self.raft_groups:
            return self.strong_leader(cls)
        cands = self.candidates_for(cls, oid)
        return cands[0] if cands else None

    def strong_leader(self, cls: str) -> str | None:
        log = self.election_logs.get(cls) or []
        for event in reversed(log):
            if self.control.believed_alive.get(event["leader"], True):
                return event["leader"]
        members = self.groups[cls].members
        return self.control.first_live(list(members)) or members[0]

    def home_member(self, cls: str, dc: str) -> str:
        """Source-local member for RYW/bounded routing: same dc, else primary seat."""
        group = self.groups[cls]
        for m in group.members:
            if self.sim.nodes[m].dc == dc:
                return m
        return group.members[0]

    # -- engine dispatch

    def engine_hosts(self, cls: str, function: str) -> list[str]:
        group = self.groups[cls]
        resolved = self.resolved[cls]
        fn = resolved.functions[function]
        if fn.sla.locality == LOCALITY_LOCAL:
            return [group.members[0]]
        return list(group.members)

    def dispatch_to_engine(self, invoker: Invoker, task: dict) -> None:
        cls, fn_name = task["cls"], task["function"]
        pool_name = f"{cls}.{fn_name}"
        handler_id = self.resolved[cls].functions[fn_name].spec.handler_id
        hosts = self.engine_hosts(cls, fn_name)
        origin = invoker.node_id

        def reply_from(host: str):
            def reply(completion: dict) -> None:
                self.sim.send(host, origin, invoker.on_completion, completion,
                              kind="task:completion")
            return reply

        # local slot first; otherwise the least-loaded placement host
        choice = origin if origin in hosts else None
        if choice is not None:
            pool = self.engines[choice].pool(pool_name, handler_id)
            if pool.free_slots() <= 0 and len(hosts) > 1:
                choice = None
        if choice is None:
            live = [h for h in hosts if self.control.believed_alive.get(h, True)]
            ranked = sorted(live or hosts, key=lambda h: (
                self.engines[h].pool(pool_name, handler_id).in_flight()
                + self.engines[h].pool(pool_name, handler_id).queued(),
                h))
            choice = ranked[0]
        pool = self.engines[choice].pool(pool_name, handler_id)
        if choice == origin:
            pool.execute(task, reply_from(choice))
        else:
            self.sim.send(origin, choice,
                          lambda t, p=pool, c=choice: p.execute(t, reply_from(c)),
                          task, kind="task:dispatch")

    # -- async plumbing

    def submit_async(self, msg: dict) -> None:
        self.sim.send(msg["src"], "svc-broker", self.broker.on_submit, msg,
                      kind="broker:submit")

    def async_resolved(self, req: dict, reply: dict) -> None:
        self.sim.send(req["_via_node"], "svc-broker", self.broker.on_consumed, {
            "offset": req["offset"], "invocation_id": req["invocation_id"],
            "result": {k: v for k, v in reply.items() if k != "req_id"},
        }, kind="broker:consumed")

    def async_rescan(self, node_id: str) -> None:
        if not self.sim.nodes[node_id].alive:
            return
        self.sim.send(node_id, "svc-broker", self.broker.on_rescan,
                      {"node": node_id}, kind="broker:rescan")

    # -- macro orchestration

    def start_macro(self, invoker: Invoker, req: dict, resolved, fn) -> None:
        self._macro_seq += 1
        run_id = req.get("run_id") or f"run-{self._macro_seq}"
        dag = build_dag(fn.spec.dataflow)
        root_ref = {"cls": resolved.qualified, "object_id": req["object_id"]}
        run = MacroRun(run_id, dag, root_ref, req.get("args") or {}, invoker.node_id)

        def done(r: MacroRun) -> None:
            if r.failed is not None:
                invoker._reply(req, {"ok": False, "error": "StepFailure",
                                     "detail": str(r.failed), "run_id": r.run_id})
            else:
                invoker._reply(req, {"ok": True, "output": r.result(),
                                     "run_id": r.run_id})

        run.done_callbacks.append(done)
        self.orchestrators[invoker.node_id].start(run)

    def resume_macro(self, run_id: str, node_id: str, macro_cls: str,
                     macro_fn: str, done_cb=None) -> MacroRun:
        snap = self.docstore.get("macro-runs", run_id)
        if snap is None:
            raise SchemaError(f"no checkpoint for run {run_id!r}")
        fn = self.resolved[macro_cls].functions[macro_fn]
        dag = build_dag(fn.spec.dataflow)
        run = MacroRun(run_id, dag, snap["bindings"]["$self"],
                       snap["bindings"].get("$args") or {}, node_id)
        if done_cb:
            run.done_callbacks.append(done_cb)
        self.orchestrators[node_id].resume(run, snap)
        return run

    def _macro_checkpoint(self, run: MacroRun) -> None:
        self.docstore.put("macro-runs", run.run_id, run.snapshot())

    def _make_macro_invoke(self, node_id: str):
        pending: dict[str, dict] = {}
        seq = itertools.count()

        def on_reply(msg: dict) -> None:
            ctx = pending.pop(msg.get("req_id"), None)
            if ctx is None:
                return
            if msg.get("ok"):
                ctx["cb"](True, msg.get("output"), None)
            elif msg.get("error") == "NotOwner" and ctx["tries"] < 5:
                send(ctx, owner_hint=msg.get("owner"))
            else:
                ctx["cb"](False, None, msg.get("error"))

        def send(ctx: dict, owner_hint: str | None = None) -> None:
            target_ref = ctx["target"]
            cls, oid = target_ref["cls"], target_ref["object_id"]
            dest = owner_hint or self.primary_for(cls, oid)
            req_id = f"{node_id}-m{next(seq)}"
            pending[req_id] = ctx
            ctx["tries"] += 1
            self.sim.send(node_id, dest, self.invokers[dest].on_request, {
                "req_id": req_id, "cls": cls, "object_id": oid,
                "function": ctx["function"], "args": ctx["args"],
                "caller": {"external": False, "package": cls.rpartition(".")[0],
                           "cls": cls},
                "output_object_id": ctx["output_oid"],
                "reply_to": (node_id, on_reply),
            }, kind="macro:step")

        def invoke(orch_node: str, target, function: str, args: dict,
                   output_oid: str | None, cb) -> None:
            if isinstance(target, str):
                raise SchemaError(f"macro target {target!r} did not resolve to an object ref")
            ctx = {"target": target, "function": function, "args": args,
                   "output_oid": output_oid, "cb": cb, "tries": 0}
            send(ctx)

        return invoke

    # -- output objects

    def create_output_object(self, from_node: str, cls: str, oid: str,
                             document: dict, on_done=None) -> None:
        owner = self.primary_for(cls, oid)
        if owner is None:
            if on_done:
                on_done(False)
            return
        payload = {"cls": cls, "object_id": oid, "document": document}
        if on_done is not None:
            def ack(_msg: dict) -> None:
                on_done(True)
            payload["reply_to"] = (from_node, ack)
        self.sim.send(from_node, owner, self.invokers[owner].on_materialize,
                      payload, kind="grid:materialize")

    # -- instrumentation

    def note_arrival(self, oid: str, task_id: str) -> None:
        self.locks.setdefault(oid, {"arrivals": [], "trace": []})["arrivals"].append(task_id)

    def note_lock(self, oid: str, task_id: str) -> None:
        self.locks.setdefault(oid, {"arrivals": [], "trace": []})["trace"].append(task_id)

    def lock_trace(self, oid: str) -> list[str]:
        return list(self.locks.get(oid, {"trace": []})["trace"])

    def arrival_order(self, oid: str) -> list[str]:
        return list(self.locks.get(oid, {"arrivals": []})["arrivals"])

    def crash_hook(self, stage: str, node_id: str) -> None:
        for hook in self.crash_hooks:
            hook(stage, node_id)

    def _count_wire(self, now: int, src: str, dst: str, kind: str) -> None:
        self._wire_counts[kind] = self._wire_counts.get(kind, 0) + 1

    def wire_counts(self) -> dict[str, int]:
        return dict(self._wire_counts)

    def record(self, event: dict) -> None:
        if self.record_history:
            self.history.append(event)

    def group_digests(self, cls: str) -> dict[str, str]:
        return {m: gm.root_digest() for m, gm in self.members[cls].items()}

    def committed_blob_refs(self) -> set[tuple[str, str, str]]:
        refs: set[tuple[str, str, str]] = set()

        def add_snapshot(snap) -> None:
            if isinstance(snap, dict) and "versions" in snap:
                for k, v in snap["versions"].items():
                    refs.add((snap["object_id"], k, v))

        for members in self.members.values():
            for gm in members.values():
                for key, reg in gm.store.kv.items():
                    if key.startswith("rec:"):
                        add_snapshot(reg.value)
        for members in self.raft_groups.values():
            for rm in members.values():
                for key, entry in rm.kv.items():
                    if key.startswith("rec:"):
                        add_snapshot(entry["value"])
        for _coll, key, doc in self.docstore.scan_collections("replica:"):
            if key.startswith("rec:"):
                add_snapshot(doc.get("value"))
        return refs

    def _sweep_tick(self) -> None:
        refs = self.committed_blob_refs()
        # tokens still alive protect in-flight task writes via the age grace
        self.blobstore.sweep_orphans(refs, min_age_ms=ORPHAN_GRACE_MS)
        self.sim.after(SWEEP_INTERVAL_MS, self._sweep_tick)

    # -- clients

    def client(self, client_id: str, dc: str) -> "ClientActor":
        return ClientActor(self, client_id, dc)


class ClientActor:
    """External endpoint: hash-aware request routing with failover retries.

    The actor embeds the ingress role: it resolves the owner through the
    class ring and the control plane's liveness view, tries the primary, and
    moves to successor replicas on timeout. Every kv operation is recorded
    into the history log when history recording is on.
    """

    def __init__(self, platform: Platform, client_id: str, dc: str):
        self.platform = platform
        self.sim = platform.sim
        self.client_id = client_id
        self.dc = dc
        self.node = self.sim.add_external(client_id, dc)
        self._seq = itertools.count(1)
        self._producer_seq = 0
        self._pending: dict[str, dict] = {}

    def _req_id(self) -> str:
        return f"{self.client_id}-r{next(self._seq)}"

    # -- grid invocation (sync mode)

    def invoke(self, cls: str, oid: str, function: str, args: dict | None = None,
               payload_bytes: int = 0, cb=None,
               attempt_timeout_ms: int = CLIENT_ATTEMPT_TIMEOUT_MS) -> None:
        candidates = self.platform.candidates_for(cls, oid)
        if cls in self.platform.raft_groups:
            leader = self.platform.strong_leader(cls)
            candidates = [leader] + [m for m in self.platform.groups[cls].members
                                     if m != leader]
        ctx = {
            "kind": "invoke", "cls": cls, "object_id": oid, "function": function,
            "args": args or {}, "payload_bytes": payload_bytes,
            "candidates": candidates, "attempt": 0, "done": False,
            "cb": cb or (lambda msg: None), "timeout_ms": attempt_timeout_ms,
            "invoke_ms": self.sim.now,
        }
        self._attempt(ctx)

    def _attempt(self, ctx: dict, dest: str | None = None) -> None:
        if ctx["done"]:
            return
        if dest is None:
            if ctx["attempt"] >= len(ctx["candidates"]):
                ctx["done"] = True
                ctx["cb"]({"ok": False, "error": "Unavailable",
                           "detail": "all replicas unreachable"})
                return
            dest = ctx["candidates"][ctx["attempt"]]
        ctx["attempt"] += 1
        req_id = self._req_id()
        self._pending[req_id] = ctx
        ctx["last_req"] = req_id
        invoker = self.platform.invokers[dest]
        self.sim.send(self.client_id, dest, invoker.on_request, {
            "req_id": req_id, "cls": ctx["cls"], "object_id": ctx["object_id"],
            "function": ctx["function"], "args": ctx["args"],
            "payload_bytes": ctx["payload_bytes"],
            "caller": None, "reply_to": (self.client_id, self._on_grid_reply),
        }, kind="grid:request")
        self.sim.after(ctx["timeout_ms"], self._on_attempt_timeout, req_id)

    def _on_grid_reply(self, msg: dict) -> None:
        ctx = self._pending.pop(msg.get("req_id"), None)
        if ctx is None or ctx["done"]:
            return
        if not msg.get("ok") and msg.get("error") == "NotOwner" and ctx["attempt"] < 8:
            self._attempt(ctx, dest=msg.get("owner"))
            return
        ctx["done"] = True
        ctx["cb"](msg)

    def _on_attempt_timeout(self, req_id: str) -> None:
        ctx = self._pending.pop(req_id, None)
        if ctx is None or ctx["done"] or ctx["last_req"] != req_id:
            return
        self._attempt(ctx)

    # -- async invocation

    def submit_async(self, cls: str, oid: str, function: str, args: dict | None = None,
                     cb=None, producer_seq: int | None = None) -> int:
        if producer_seq is None:
            self._producer_seq += 1
            producer_seq = self._producer_seq
        req_id = self._req_id()
        ctx = {"kind": "async-submit", "done": False, "cb": cb or (lambda m: None)}
        self._pending[req_id] = ctx
        self.platform.submit_async({
            "src": self.client_id, "req_id": req_id,
            "producer_id": self.client_id, "producer_seq": producer_seq,
            "cls": cls, "object_id": oid, "function": function, "args": args or {},
            "reply_to": (self.client_id, self._on_async_ack),
        })
        return producer_seq

    def _on_async_ack(self, msg: dict) -> None:
        ctx = self._pending.pop(msg.get("req_id"), None)
        if ctx is not None and not ctx["done"]:
            ctx["done"] = True
            ctx["cb"](msg)

    # -- attribute operations (consistency-level routing)

    def kv_write(self, cls: str, oid: str, attr: str, value, cb=None) -> None:
        self._kv_op("write", cls, oid, attr, value, cb)

    def kv_read(self, cls: str, oid: str, attr: str, cb=None) -> None:
        self._kv_op("read", cls, oid, attr, None, cb)

    def _kv_op(self, op: str, cls: str, oid: str, attr: str, value, cb) -> None:
        key = kv_key(oid, attr)
        invoke_ms = self.sim.now
        record = self.platform.record_history

        def finish(msg: dict) -> None:
            if record:
                self.platform.history.append({
                    "op": op, "cls": cls, "key": f"{oid}#{attr}",
                    "client": self.client_id,
                    "invoke_ms": invoke_ms, "ack_ms": self.sim.now,
                    "ok": bool(msg.get("ok")),
                    "value": value if op == "write" else msg.get("value"),
                    "stamp": msg.get("stamp"),
                    "node": msg.get("node"),
                    "error": msg.get("error"),
                })
            if cb:
                cb(msg)

        if cls in self.platform.raft_groups:
            self._strong_kv(op, cls, key, value, finish)
            return
        member_node = self.platform.home_member(cls, self.dc)
        member = self.platform.member(cls, member_node)
        req_id = self._req_id()
        ctx = {"kind": "kv", "done": False, "cb": finish, "last_req": req_id}
        self._pending[req_id] = ctx
        self.sim.send(self.client_id, member_node, member.on_kv, {
            "req_id": req_id, "op": op, "key": key, "value": value,
            "reply_to": (self.client_id, self._on_kv_reply),
        }, kind="kv:request")
        self.sim.after(CLIENT_ATTEMPT_TIMEOUT_MS, self._on_kv_timeout, req_id)

    def _on_kv_reply(self, msg: dict) -> None:
        ctx = self._pending.pop(msg.get("req_id"), None)
        if ctx is not None and not ctx["done"]:
            ctx["done"] = True
            ctx["cb"](msg)

    def _on_kv_timeout(self, req_id: str) -> None:
        ctx = self._pending.pop(req_id, None)
        if ctx is not None and not ctx["done"]:
            ctx["done"] = True
            ctx["cb"]({"ok": False, "error": "Unavailable"})

    def _strong_kv(self, op: str, cls: str, key: str, value, cb,
                   dest: str | None = None, hops: int = 0) -> None:
        members = self.platform.raft_groups[cls]
        if dest is None:
            dest = self.platform.strong_leader(cls)
        req_id = self._req_id()
        ctx = {"kind": "strong-kv", "done": False, "cb": cb, "last_req": req_id,
               "op": op, "cls": cls, "key": key, "value": value, "hops": hops}
        self._pending[req_id] = ctx
        self.sim.send(self.client_id, dest, members[dest].on_client, {
            "req_id": req_id, "op": op, "key": key, "value": value,
            "reply_to": (self.client_id, self._on_strong_reply),
        }, kind="raft:client")
        self.sim.after(STRONG_ATTEMPT_TIMEOUT_MS, self._on_strong_timeout, req_id)

    def _on_strong_reply(self, msg: dict) -> None:
        ctx = self._pending.pop(msg.get("req_id"), None)
        if ctx is None or ctx["done"]:
            return
        if not msg.get("ok") and msg.get("error") == "Redirect" and ctx["hops"] < 6:
            leader = msg.get("leader")
            members = self.platform.groups[ctx["cls"]].members
            if leader is None or leader not in members:
                ranked = [m for m in members if m != msg.get("node")]
                leader = ranked[(ctx["hops"]) % len(ranked)] if ranked else members[0]
            ctx["done"] = True
            self._strong_kv(ctx["op"], ctx["cls"], ctx["key"], ctx["value"],
                            ctx["cb"], dest=leader, hops=ctx["hops"] + 1)
            return
        ctx["done"] = True
        ctx["cb"](msg)

    def _on_strong_timeout(self, req_id: str) -> None:
        ctx = self._pending.pop(req_id, None)
        if ctx is None or ctx["done"]:
            return
        ctx["done"] = True
        if ctx["hops"] < 6:
            members = self.platform.groups[ctx["cls"]].members
            nxt = members[ctx["hops"] % len(members)]
            self._strong_kv(ctx["op"], ctx["cls"], ctx["key"], ctx["value"],
                            ctx["cb"], dest=nxt, hops=ctx["hops"] + 1)
        else:
            ctx["cb"]({"ok": False, "error": "NoQuorum",
                       "detail": "no reachable leader"})
