"""Replica coordination for the relaxed consistency levels.

Non-strong replica groups keep per-key last-writer-wins registers, apply
writes locally (acked immediately), and reconcile divergence with periodic
anti-entropy rounds that walk a hash-bucketed digest tree and exchange only
the divergent keys. Bounded-staleness members additionally gate reads and
writes on sync freshness: a member serves only while every peer has
completed an anti-entropy round with it within the staleness window, so an
observed read can never lag the newest acked write by the full window.
Strong groups live in raft.py.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

from .errors import StalenessWindowExceeded
from .hashring import fnv1a_64
from .model import ConsistencyLevel

FANOUT = 16
DEFAULT_AE_INTERVAL_MS = 1_000
MIN_AE_INTERVAL_MS = 250
FLUSH_INTERVAL_MS = 100

Stamp = tuple[int, str, int]       # (virtual time, node id, per-node seq)


def ae_interval_for(delta_ms: int | None) -> int:
    """Anti-entropy period: delta/4 for bounded staleness, floored."""
    if delta_ms is None:
        return DEFAULT_AE_INTERVAL_MS
    return max(MIN_AE_INTERVAL_MS, delta_ms // 4)


@dataclass(frozen=True)
class LwwRegister:
    value: object
    stamp: Stamp

    def entry_digest(self, key: str) -> str:
        blob = json.dumps([key, list(self.stamp), self.value], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def lww_merge(a: LwwRegister | None, b: LwwRegister | None) -> LwwRegister | None:
    """Commutative/associative/idempotent merge; larger stamp wins, ties
    impossible across nodes (node id is part of the stamp order)."""
    if a is None:
        return b
    if b is None:
        return a
    return b if b.stamp > a.stamp else a


@dataclass(frozen=True)
class ReplicaGroup:
    cls: str                              # qualified class name
    members: tuple[str, ...]              # node ids; first is the planner's primary seat
    mode: ConsistencyLevel
    delta_ms: int | None = None
    interval_ms: int = DEFAULT_AE_INTERVAL_MS


class ReplicaStore:
    """One member's register map plus its digest-tree view."""

    def __init__(self):
        self.kv: dict[str, LwwRegister] = {}
        self.dirty: set[str] = set()
        self.listeners: list = []             # fn(key, register) on accepted puts
        self._digests: dict[str, str] = {}    # key -> entry digest cache
        self._hashes: dict[str, str] = {}     # key -> 16-hex-char bucket path

    def _bucket(self, key: str) -> str:
        h = self._hashes.get(key)
        if h is None:
            h = f"{fnv1a_64(key):016x}"
            self._hashes[key] = h
        return h

    def put(self, key: str, reg: LwwRegister) -> bool:
        """LWW-install `reg`; returns True when the stored value changed."""
        cur = self.kv.get(key)
        win = lww_merge(cur, reg)
        if win is cur and cur is not None:
            return False
        self.kv[key] = win
        self._digests[key] = win.entry_digest(key)
        self.dirty.add(key)
        for fn in self.listeners:
            fn(key, win)
        return True

    def get(self, key: str) -> LwwRegister | None:
        return self.kv.get(key)

    def depth(self) -> int:
        n = len(self.kv)
        if n <= 1:
            return 1
        return max(1, math.ceil(math.log(n, FANOUT)))

    def digest(self, prefix: str) -> str:
        """Digest over all entries whose bucket path starts with `prefix`."""
        h = hashlib.sha256()
        for key in sorted(k for k in self.kv if self._bucket(k).startswith(prefix)):
            h.update(self._digests[key].encode())
        return h.hexdigest()

    def children(self, prefix: str) -> dict[str, str]:
        out: dict[str, str] = {}
        for c in "0123456789abcdef":
            d = self.digest(prefix + c)
            if d != _EMPTY_DIGEST:
                out[prefix + c] = d
        return out

    def entries_under(self, prefix: str) -> list[tuple[str, list, object]]:
        return sorted(
            (k, list(self.kv[k].stamp), self.kv[k].value)
            for k in self.kv if self._bucket(k).startswith(prefix))

    def take_dirty(self) -> list[str]:
        out = sorted(self.dirty)
        self.dirty.clear()
        return out


_EMPTY_DIGEST = hashlib.sha256().hexdigest()


class GroupMember:
    """Protocol state machine for one (group, node) pair.

    Driven entirely by simulator events; peers are reached only through
    sim.send, so partitions and dead hosts behave like the real network.
    """

    def __init__(self, sim, group: ReplicaGroup, node_id: str, docstore=None,
                 persistent: bool = False, history=None):
        self.sim = sim
        self.group = group
        self.node_id = node_id
        self.node = sim.nodes[node_id]
        self.store = ReplicaStore()
        self.peers = tuple(m for m in group.members if m != node_id)
        self.peer_members: dict[str, "GroupMember"] = {}
        self.last_sync: dict[str, int] = {m: sim.now for m in self.peers}
        self.docstore = docstore
        self.persistent = persistent
        self.history = history
        self._seq = 0
        self._peer_cursor = 0
        self._exchange: dict[int, dict] = {}
        self._nonce = 0
        self.reconciled_keys = 0
        self.blocked_ops = 0
        self.node.on_crash(self._on_crash)
        self.node.on_restart(self._on_restart)
        self.flush_hook = None           # test instrumentation (crash injection)
        if self.peers:
            self.sim.after(group.interval_ms, self._ae_tick)
        if (persistent and docstore is not None) or self.peers:
            self.sim.after(FLUSH_INTERVAL_MS, self._maintenance_tick)

    # -- wiring

    def attach_peers(self, members: dict[str, "GroupMember"]) -> None:
        self.peer_members = {m: members[m] for m in self.peers}

    def _collection(self) -> str:
        return f"replica:{self.group.cls}:{self.node_id}"

    # -- durability + batched fan-out

    def _maintenance_tick(self) -> None:
        if self.node.alive:
            dirty = self.store.take_dirty()
            if dirty:
                if self.persistent and self.docstore is not None:
                    for key in dirty:
                        reg = self.store.kv[key]
                        self.docstore.put(self._collection(), key,
                                          {"value": reg.value, "stamp": list(reg.stamp)})
                    if self.flush_hook:
                        self.flush_hook()
                if self.peers:
                    entries = [(k, list(self.store.kv[k].stamp), self.store.kv[k].value)
                               for k in dirty]
                    for peer in self.peers:
                        self._send(peer, "repl_push", {"from": self.node_id,
                                                       "entries": entries})
        self.sim.after(FLUSH_INTERVAL_MS, self._maintenance_tick)

    def _on_crash(self) -> None:
        self.store = ReplicaStore()
        self._exchange.clear()

    def _on_restart(self) -> None:
        if self.persistent and self.docstore is not None:
            for key, snap in self.docstore.scan(self._collection()):
                self.store.put(key, LwwRegister(snap["value"], tuple(snap["stamp"])))
            self.store.dirty.clear()
        # must complete a round with every peer before serving bounded reads
        horizon = self.group.delta_ms or 0
        self.last_sync = {m: self.sim.now - horizon for m in self.peers}

    # -- client-facing operations

    def next_stamp(self) -> Stamp:
        self._seq += 1
        return (self.sim.now, self.node_id, self._seq)

    def _gate(self) -> None:
        if self.group.mode is not ConsistencyLevel.BOUNDED_STALENESS:
            return
        delta = self.group.delta_ms or 0
        for peer in self.peers:
            if self.sim.now - self.last_sync[peer] >= delta:
                self.blocked_ops += 1
                raise StalenessWindowExceeded(
                    f"{self.node_id} out of sync with {peer} beyond {delta}ms")

    def check_staleness_gate(self) -> None:
        self._gate()

    def write(self, key: str, value) -> Stamp:
        """Apply locally with an LWW stamp; acked immediately. Blocked when
        the staleness window is exhausted."""
        self._gate()
        stamp = self.next_stamp()
        self.store.put(key, LwwRegister(value, stamp))
        return stamp

    def read(self, key: str) -> LwwRegister | None:
        self._gate()
        return self.store.get(key)

    def on_kv(self, msg: dict) -> None:
        """Network front-end for attribute reads/writes."""
        reply: dict = {"req_id": msg.get("req_id"), "node": self.node_id}
        try:
            if msg["op"] == "write":
                stamp = self.write(msg["key"], msg["value"])
                reply.update(ok=True, stamp=list(stamp))
            else:
                reg = self.read(msg["key"])
                reply.update(ok=True, value=reg.value if reg else None,
                             stamp=list(reg.stamp) if reg else None)
        except StalenessWindowExceeded as exc:
            reply.update(ok=False, error="StalenessWindowExceeded", detail=str(exc))
        node_id, handler = msg["reply_to"]
        self.sim.send(self.node_id, node_id, handler, reply, kind="kv:reply")

    # -- anti-entropy

    def _ae_tick(self) -> None:
        if self.node.alive and self.peers:
            peer = self.peers[self._peer_cursor % len(self.peers)]
            self._peer_cursor += 1
            self.start_round(peer)
        self.sim.after(self.group.interval_ms, self._ae_tick)

    def start_round(self, peer: str) -> None:
        self._nonce += 1
        nonce = self._nonce
        self._exchange[nonce] = {"peer": peer, "divergent": []}
        self._send(peer, "ae_root", {
            "nonce": nonce, "from": self.node_id,
            "root": self.store.digest("")})

    def _send(self, peer: str, kind: str, payload: dict) -> None:
        member = self.peer_members[peer]
        self.sim.send(self.node_id, peer, member.on_message,
                      {"kind": kind, **payload}, kind=f"ae:{kind}")

    def on_message(self, msg: dict) -> None:
        kind = msg["kind"]
        if kind == "repl_push":
            for key, stamp, value in msg["entries"]:
                self.store.put(key, LwwRegister(value, tuple(stamp)))
        elif kind == "ae_root":
            self._on_root(msg)
        elif kind == "ae_children":
            self._on_children(msg)
        elif kind == "ae_level":
            self._on_level(msg)
        elif kind == "ae_entries":
            self._on_entries(msg)
        elif kind == "ae_entries_back":
            self._on_entries_back(msg)
        elif kind == "ae_done":
            self.last_sync[msg["from"]] = self.sim.now

    def _on_root(self, msg: dict) -> None:
        src = msg["from"]
        if msg["root"] == self.store.digest(""):
            self.last_sync[src] = self.sim.now
            self._send(src, "ae_done", {"nonce": msg["nonce"], "from": self.node_id})
            return
        self._send(src, "ae_children", {
            "nonce": msg["nonce"], "from": self.node_id, "paths": [""],
            "children": self.store.children(""), "carry_leaves": []})

    def _on_children(self, msg: dict) -> None:
        st = self._exchange.get(msg["nonce"])
        if st is None:
            return
        mine: dict[str, str] = {}
        for parent in msg["paths"]:
            mine.update(self.store.children(parent))
        theirs = msg["children"]
        divergent = sorted(p for p in set(theirs) | set(mine)
                           if theirs.get(p) != mine.get(p))
        divergent.extend(msg.get("carry_leaves", []))
        self._descend(msg["nonce"], st["peer"], divergent)

    def _descend(self, nonce: int, peer: str, divergent: list[str]) -> None:
        depth = max(self.store.depth(), 1)
        at_leaf = [p for p in divergent if len(p) >= depth]
        deeper = [p for p in divergent if len(p) < depth]
        if deeper:
            self._send(peer, "ae_level", {
                "nonce": nonce, "from": self.node_id, "paths": deeper,
                "at_leaf": at_leaf})
            return
        self._send_entries(nonce, peer, at_leaf)

    def _on_level(self, msg: dict) -> None:
        children: dict[str, str] = {}
        for path in msg["paths"]:
            children.update(self.store.children(path))
        self._send(msg["from"], "ae_children", {
            "nonce": msg["nonce"], "from": self.node_id, "paths": msg["paths"],
            "children": children, "carry_leaves": msg.get("at_leaf", [])})

    def _send_entries(self, nonce: int, peer: str, leaf_paths: list[str]) -> None:
        entries = []
        for p in sorted(set(leaf_paths)):
            entries.extend(self.store.entries_under(p))
        self._send(peer, "ae_entries", {
            "nonce": nonce, "from": self.node_id,
            "paths": sorted(set(leaf_paths)), "entries": entries})

    def _on_entries(self, msg: dict) -> None:
        src = msg["from"]
        seen_keys = set()
        for key, stamp, value in msg["entries"]:
            seen_keys.add(key)
            if self.store.put(key, LwwRegister(value, tuple(stamp))):
                self.reconciled_keys += 1
        back = []
        for p in msg["paths"]:
            for key, stamp, value in self.store.entries_under(p):
                back.append((key, stamp, value))
        self.last_sync[src] = self.sim.now
        self._send(src, "ae_entries_back", {
            "nonce": msg["nonce"], "from": self.node_id, "entries": back})

    def _on_entries_back(self, msg: dict) -> None:
        st = self._exchange.pop(msg["nonce"], None)
        for key, stamp, value in msg["entries"]:
            if self.store.put(key, LwwRegister(value, tuple(stamp))):
                self.reconciled_keys += 1
        self.last_sync[msg["from"]] = self.sim.now

    def root_digest(self) -> str:
        return self.store.digest("")
