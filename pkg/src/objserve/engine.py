"""Function execution plane: container pools, autoscaling, rate guarantees.

Each node hosts one pool per function. A pool admits a task when a warm
container has a free concurrency slot; otherwise the task queues and the
reactive autoscaler adds containers after the cold-start delay, bounded by
the node's vcpu budget. A rate guarantee of A invocations/second pins a
pre-warmed floor of ceil(A x service_seconds / concurrency_limit) containers
that the scaler never drops below, which is what admits one start with zero
cold delay every 1/A seconds.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .errors import CapacityExceeded, HandlerFault
from .handlers import BlobGateway, HandlerContext, HandlerRegistry, ServiceModel

DEFAULT_DEADLINE_MS = 30_000
DEFAULT_COLD_START_MS = 500
DEFAULT_CONCURRENCY = 10
DEFAULT_TICK_MS = 1_000
IDLE_GRACE_MS = 60_000
VCPU_PER_CONTAINER = 1


def warm_floor(rate_rps: int, service_ms: int, concurrency_limit: int) -> int:
    """Minimal stationary capacity for a guaranteed rate (Little's-law form)."""
    if rate_rps <= 0:
        return 0
    return max(1, math.ceil(rate_rps * (service_ms / 1000.0) / concurrency_limit))


@dataclass
class PoolStats:
    dispatched: int = 0
    completed: int = 0
    failed: int = 0
    timeouts: int = 0
    cold_starts: int = 0              # demand-triggered container starts
    container_ms: int = 0             # integral of warm containers over time


class FunctionPool:
    """Warm/busy slot accounting for one function on one node."""

    def __init__(self, sim, node, function: str, registry: HandlerRegistry,
                 handler_id: str, concurrency_limit: int = DEFAULT_CONCURRENCY,
                 cold_start_ms: int = DEFAULT_COLD_START_MS,
                 deadline_ms: int = DEFAULT_DEADLINE_MS):
        self.sim = sim
        self.node = node
        self.function = function
        self.registry = registry
        self.handler_id = handler_id
        self.climit = concurrency_limit
        self.cold_start_ms = cold_start_ms
        self.deadline_ms = deadline_ms
        self.warm = 0
        self.starting = 0
        self.busy_slots = 0
        self.floor = 0
        self.queue: deque = deque()
        self.stats = PoolStats()
        self._last_active_ms = sim.now
        self._last_account_ms = sim.now

    # -- capacity

    def _account(self) -> None:
        now = self.sim.now
        self.stats.container_ms += self.warm * (now - self._last_account_ms)
        self._last_account_ms = now

    def set_floor(self, containers: int) -> None:
        """Pre-warm to at least `containers`; deploy-time starts are not
        counted as cold-start events."""
        self.floor = containers
        if self.warm < containers:
            self._account()
            self.warm = containers

    def free_slots(self) -> int:
        return self.warm * self.climit - self.busy_slots

    def vcpus_used(self) -> int:
        return (self.warm + self.starting) * VCPU_PER_CONTAINER

    # -- execution

    def execute(self, task, reply) -> None:
        """Run `task` when capacity allows; `reply(completion_dict)` fires as
        a scheduled event after queueing + cold start + service time."""
        self.stats.dispatched += 1
        self._last_active_ms = self.sim.now
        if self.free_slots() > 0:
            self._start_service(task, reply)
            return
        item = {"task": task, "reply": reply, "enq_ms": self.sim.now, "state": "queued"}
        self.queue.append(item)
        self.sim.after(self.deadline_ms, self._timeout_check, item)

    def _start_service(self, task, reply) -> None:
        self.busy_slots += 1
        service = self.registry.service(self.handler_id)
        duration = service.duration_ms(task.get("payload_bytes", 0))
        self.sim.after(duration, self._finish_service, task, reply)

    def _finish_service(self, task, reply) -> None:
        if not self.node.alive:
            return
        self.busy_slots -= 1
        completion = self._run_handler(task)
        if completion["status"] == "ok":
            self.stats.completed += 1
        else:
            self.stats.failed += 1
        reply(completion)
        self._drain()

    def _run_handler(self, task) -> dict:
        gateway = None
        if task.get("read_tokens") is not None or task.get("write_tokens") is not None:
            gateway = BlobGateway(task["blob_store"], task["object_id"],
                                  task.get("read_tokens") or {},
                                  task.get("write_tokens") or {})
        ctx = HandlerContext(
            object_id=task["object_id"],
            structured=task["structured_snapshot"],
            args=task["args"],
            blobs=gateway,
            output_object_id=task.get("output_object_id"),
        )
        try:
            result = self.registry.fn(self.handler_id)(ctx) or {}
        except HandlerFault as exc:
            return {"task_id": task["task_id"], "status": "failed", "error": str(exc),
                    "new_structured": None, "new_versions": {}, "output": None}
        except Exception as exc:  # handler bug: surfaces as failed completion
            return {"task_id": task["task_id"], "status": "failed", "error": repr(exc),
                    "new_structured": None, "new_versions": {}, "output": None}
        return {
            "task_id": task["task_id"],
            "status": "ok",
            "new_structured": result.get("structured"),
            "new_versions": dict(gateway.new_versions) if gateway else {},
            "output": result.get("output"),
            "error": None,
        }

    def _drain(self) -> None:
        while self.queue and self.free_slots() > 0:
            item = self.queue.popleft()
            if item["state"] != "queued":
                continue
            if self.sim.now - item["enq_ms"] >= self.deadline_ms:
                self._emit_timeout(item)
                continue
            item["state"] = "running"
            self._start_service(item["task"], item["reply"])

    def _timeout_check(self, item) -> None:
        if item["state"] == "queued" and self.node.alive:
            self._emit_timeout(item)

    def _emit_timeout(self, item) -> None:
        item["state"] = "timeout"
        self.stats.timeouts += 1
        item["reply"]({"task_id": item["task"]["task_id"], "status": "timeout",
                       "error": "deadline exceeded", "new_structured": None,
                       "new_versions": {}, "output": None})

    def in_flight(self) -> int:
        return self.busy_slots

    def queued(self) -> int:
        return sum(1 for i in self.queue if i["state"] == "queued")

    # -- scaling

    def scale_to(self, containers: int, demand_triggered: bool) -> None:
        containers = max(containers, self.floor)
        current = self.warm + self.starting
        if containers > current:
            add = containers - current
            self.starting += add
            self.sim.after(self.cold_start_ms, self._containers_ready, add, demand_triggered)
        elif containers < self.warm:
            self._account()
            self.warm = containers

    def _containers_ready(self, count: int, demand_triggered: bool) -> None:
        if not self.node.alive:
            return
        self.starting -= count
        self._account()
        self.warm += count
        if demand_triggered:
            self.stats.cold_starts += count
        self._drain()


class NodeEngine:
    """All pools on one node, the reactive scaler, and the vcpu ledger."""

    def __init__(self, sim, node, registry: HandlerRegistry,
                 tick_ms: int = DEFAULT_TICK_MS):
        self.sim = sim
        self.node = node
        self.registry = registry
        self.tick_ms = tick_ms
        self.pools: dict[str, FunctionPool] = {}
        self.reserved_vcpu = 0
        sim.after(tick_ms, self._tick)
        node.on_crash(self._on_crash)
        node.on_restart(self._on_restart)

    def _on_crash(self) -> None:
        for pool in self.pools.values():
            pool._account()
            pool.queue.clear()
            pool.busy_slots = 0
            pool.starting = 0
            pool.warm = 0

    def _on_restart(self) -> None:
        # guaranteed floors come back as part of recovery, after one cold start
        for pool in self.pools.values():
            if pool.floor:
                pool.scale_to(pool.floor, demand_triggered=False)

    def pool(self, function: str, handler_id: str, concurrency_limit: int = DEFAULT_CONCURRENCY,
             cold_start_ms: int = DEFAULT_COLD_START_MS,
             deadline_ms: int = DEFAULT_DEADLINE_MS) -> FunctionPool:
        if function not in self.pools:
            self.pools[function] = FunctionPool(
                self.sim, self.node, function, self.registry, handler_id,
                concurrency_limit, cold_start_ms, deadline_ms)
        return self.pools[function]

    def provision_for_rate(self, function: str, handler_id: str, rate_rps: int,
                           concurrency_limit: int = DEFAULT_CONCURRENCY,
                           cold_start_ms: int = DEFAULT_COLD_START_MS) -> int:
        """Reserve and pre-warm the guaranteed-rate floor; raises
        CapacityExceeded when the node's vcpu budget cannot hold it."""
        pool = self.pool(function, handler_id, concurrency_limit, cold_start_ms)
        service = self.registry.service(handler_id)
        floor = warm_floor(rate_rps, service.fixed_ms, concurrency_limit)
        self.install_floor(function, handler_id, max(0, floor - pool.floor),
                           concurrency_limit, cold_start_ms)
        return floor

    def install_floor(self, function: str, handler_id: str, extra_containers: int,
                      concurrency_limit: int = DEFAULT_CONCURRENCY,
                      cold_start_ms: int = DEFAULT_COLD_START_MS) -> None:
        """Raise a pool's pre-warmed floor by `extra_containers`."""
        pool = self.pool(function, handler_id, concurrency_limit, cold_start_ms)
        needed = extra_containers * VCPU_PER_CONTAINER
        if self.vcpu_free() < needed:
            raise CapacityExceeded(
                f"node {self.node.node_id} lacks {needed - self.vcpu_free()} vcpus "
                f"for {function}", deficit_vcpu=needed - self.vcpu_free())
        self.reserved_vcpu += needed
        pool.set_floor(pool.floor + extra_containers)

    def vcpu_free(self) -> int:
        dynamic = sum(max(0, p.vcpus_used() - p.floor * VCPU_PER_CONTAINER)
                      for p in self.pools.values())
        return self.node.vcpu - self.reserved_vcpu - dynamic

    def execute(self, task, reply) -> None:
        self.pools[task["function"]].execute(task, reply)

    def _tick(self) -> None:
        if self.node.alive:
            for pool in self.pools.values():
                self._autoscale(pool)
        self.sim.after(self.tick_ms, self._tick)

    def _autoscale(self, pool: FunctionPool) -> None:
        observed = pool.in_flight() + pool.queued()
        desired = math.ceil(observed / pool.climit) if observed else 0
        current = pool.warm + pool.starting
        if desired > current:
            capped = min(desired, current + self.vcpu_free() // VCPU_PER_CONTAINER)
            if capped > current:
                pool.scale_to(capped, demand_triggered=True)
        elif observed == 0 and pool.warm > pool.floor:
            if self.sim.now - pool._last_active_ms >= IDLE_GRACE_MS:
                pool.scale_to(pool.floor, demand_triggered=False)

    def stats(self) -> dict[str, PoolStats]:
        return {fn: p.stats for fn, p in self.pools.items()}
