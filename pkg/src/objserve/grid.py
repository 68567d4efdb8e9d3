"""Object data grid: per-node invokers over replicated register stores.

An invoker owns the objects whose primary the class hash ring places on its
node. All work on one object serializes through a local FIFO queue at that
primary ("localized locking": zero cross-node lock coordination — requests
that land on a non-owner are re-routed, never locked remotely). Task
functions ship a structured snapshot plus scoped blob tokens to the engine;
completions commit atomically (structured document, unstructured version
map, and async offset swap in one event), after which old blob versions are
purged and write-behind persistence and batched replication pick the record
up. Async invocations flow through the durable queue with idempotent
producers, per-object last-offset gating, and renotify sweeps, which
together give exactly-once effects across invoker crashes and failovers.
"""

from __future__ import annotations

import copy
from collections import deque

from .errors import StalenessWindowExceeded
from .model import Access, CallContext, ConsistencyLevel, FunctionKind, check_access
from .replication import GroupMember, LwwRegister

SWEEP_INTERVAL_MS = 10_000
RENOTIFY_INTERVAL_MS = 2_000
ORPHAN_GRACE_MS = 30_000

# instrumented stages of the two-phase commit sequence, in order
CRASH_POINTS = (
    "task_dispatched",
    "blob_written",
    "completion_received",
    "metadata_committed",
    "old_purged",
    "persisted",
)


class ObjectRecord:
    __slots__ = ("object_id", "cls", "structured", "versions", "last_offset", "stamp")

    def __init__(self, object_id: str, cls: str, structured: dict | None = None,
                 versions: dict | None = None, last_offset: int = 0, stamp=None):
        self.object_id = object_id
        self.cls = cls
        self.structured = structured if structured is not None else {}
        self.versions = versions if versions is not None else {}
        self.last_offset = last_offset
        self.stamp = stamp

    def snapshot(self) -> dict:
        return {
            "object_id": self.object_id,
            "cls": self.cls,
            "structured": copy.deepcopy(self.structured),
            "versions": dict(self.versions),
            "last_offset": self.last_offset,
        }

    @classmethod
    def from_snapshot(cls_, snap: dict, stamp=None) -> "ObjectRecord":
        return cls_(snap["object_id"], snap["cls"],
                    copy.deepcopy(snap["structured"]), dict(snap["versions"]),
                    snap["last_offset"], stamp)


def record_key(object_id: str) -> str:
    return f"rec:{object_id}"


def kv_key(object_id: str, attr: str) -> str:
    return f"kv:{object_id}#{attr}"


class Invoker:
    """Grid node: serializes object work, offloads tasks, commits completions."""

    def __init__(self, sim, node, platform):
        self.sim = sim
        self.node = node
        self.node_id = node.node_id
        self.platform = platform
        self.records: dict[str, ObjectRecord] = {}       # materialized cache
        self.queues: dict[str, deque] = {}
        self.active: dict[str, dict] = {}                # oid -> running item
        self.outstanding: dict[str, dict] = {}           # task_id -> item
        self.async_inflight: set[int] = set()
        self._task_seq = 0
        node.on_crash(self._on_crash)
        node.on_restart(self._on_restart)

    # -- lifecycle

    def _on_crash(self) -> None:
        self.records.clear()
        self.queues.clear()
        self.active.clear()
        self.outstanding.clear()
        self.async_inflight.clear()

    def _on_restart(self) -> None:
        # replica stores reload from the document store in their own hooks;
        # unprocessed async work is recovered by a full log rescan
        self.sim.after(1, self.platform.async_rescan, self.node_id)

    # -- async queue entries (notify / renotify / rescan deliveries)

    def on_async_entry(self, entry: dict) -> None:
        offset = entry["offset"]
        if offset in self.async_inflight:
            return
        if self.platform.primary_for(entry["cls"], entry["object_id"]) != self.node_id:
            return
        self.async_inflight.add(offset)
        req = {
            "cls": entry["cls"], "object_id": entry["object_id"],
            "function": entry["function"], "args": entry["args"],
            "offset": offset, "invocation_id": entry["invocation_id"],
            "caller": entry.get("caller"), "reply_to": None,
            "_via_node": self.node_id,
        }
        self.on_request(req)

    def on_materialize(self, msg: dict) -> None:
        """Install an output object's record (idempotent by construction:
        pre-generated ids + deterministic handlers)."""
        rec = ObjectRecord(msg["object_id"], msg["cls"],
                           copy.deepcopy(msg["document"]))
        self.store_record(rec)
        reply_to = msg.get("reply_to")
        if reply_to is not None:
            node_id, handler = reply_to
            self.sim.send(self.node_id, node_id, handler, {"ok": True},
                          kind="grid:materialize-ack")

    # -- record access

    def member_for(self, cls: str) -> GroupMember:
        return self.platform.member(cls, self.node_id)

    def is_strong(self, cls: str) -> bool:
        return cls in self.platform.raft_groups

    def load_record(self, cls: str, oid: str) -> ObjectRecord | None:
        rec = self.records.get(oid)
        if rec is not None:
            return rec
        reg = self.member_for(cls).store.get(record_key(oid))
        if reg is None:
            return None
        rec = ObjectRecord.from_snapshot(reg.value, reg.stamp)
        self.records[oid] = rec
        return rec

    def store_record(self, rec: ObjectRecord) -> None:
        member = self.member_for(rec.cls)
        stamp = member.next_stamp()
        rec.stamp = stamp
        self.records[rec.object_id] = rec
        member.store.put(record_key(rec.object_id), LwwRegister(rec.snapshot(), stamp))

    def invalidate(self, oid: str, stamp) -> None:
        rec = self.records.get(oid)
        if rec is not None and rec.stamp != stamp:
            del self.records[oid]

    # -- request entry (delivered as a network message)

    def on_request(self, req: dict) -> None:
        cls, oid = req["cls"], req["object_id"]
        if self.platform.primary_for(cls, oid) != self.node_id:
            self._reply(req, {"ok": False, "error": "NotOwner",
                              "owner": self.platform.primary_for(cls, oid)})
            return
        resolved = self.platform.resolved_class(cls)
        fn = resolved.functions.get(req["function"])
        if fn is None:
            self._reply(req, {"ok": False, "error": "NoSuchFunction"})
            return
        caller = req.get("caller") or CallContext()
        if isinstance(caller, dict):
            caller = CallContext(**caller)
        if not check_access(caller, fn.access, resolved.qualified, resolved.package):
            self._reply(req, {"ok": False, "error": "AccessDenied"})
            return
        if fn.spec.kind is FunctionKind.MACRO:
            self.platform.start_macro(self, req, resolved, fn)
            return
        self._enqueue(req, resolved, fn)

    def _enqueue(self, req: dict, resolved, fn) -> None:
        oid = req["object_id"]
        self._task_seq += 1
        task_id = f"{self.node_id}-t{self._task_seq}"
        item = {"req": req, "resolved": resolved, "fn": fn, "task_id": task_id,
                "offset": req.get("offset")}
        self.platform.note_arrival(oid, task_id)
        q = self.queues.setdefault(oid, deque())
        q.append(item)
        if oid not in self.active:
            self._advance(oid)

    def _advance(self, oid: str) -> None:
        q = self.queues.get(oid)
        if not q:
            self.active.pop(oid, None)
            self.queues.pop(oid, None)
            return
        item = q.popleft()
        self.active[oid] = item
        self.platform.note_lock(oid, item["task_id"])
        try:
            self._start(item)
        except StalenessWindowExceeded as exc:
            self._finish_item(item, {"ok": False, "error": "StalenessWindowExceeded",
                                     "detail": str(exc)})

    def _finish_item(self, item: dict, reply: dict) -> None:
        oid = item["req"]["object_id"]
        self._reply(item["req"], reply)
        if item["offset"] is not None:
            self.async_inflight.discard(item["offset"])
            self.platform.async_resolved(item["req"], reply)
        self.active.pop(oid, None)
        self._advance(oid)

    def _start(self, item: dict) -> None:
        req, resolved, fn = item["req"], item["resolved"], item["fn"]
        oid = req["object_id"]
        if self.is_strong(resolved.qualified):
            self._start_strong(item)
            return
        member = self.member_for(resolved.qualified)
        if member.group.mode is ConsistencyLevel.BOUNDED_STALENESS:
            member.check_staleness_gate()

        # offset gate: an async request at or below the record's last
        # processed offset has already taken effect and must be skipped
        rec = self.load_record(resolved.qualified, oid)
        if item["offset"] is not None and rec is not None \
                and item["offset"] <= rec.last_offset:
            self._finish_item(item, {"ok": True, "skipped": True, "output": None})
            return

        if fn.spec.kind is FunctionKind.BUILTIN:
            self._run_builtin(item, rec)
            return
        self._dispatch_task(item, rec)

    # -- strong-mode classes: record state lives in the raft log

    def _raft(self, cls: str):
        return self.platform.raft_groups[cls][self.node_id]

    def _start_strong(self, item: dict) -> None:
        req, resolved, fn = item["req"], item["resolved"], item["fn"]
        oid, cls = req["object_id"], resolved.qualified
        raft = self._raft(cls)
        entry = raft.kv.get(record_key(oid))
        snap = entry["value"] if entry else None
        rec = ObjectRecord.from_snapshot(snap) if snap else None
        if item["offset"] is not None and rec is not None \
                and item["offset"] <= rec.last_offset:
            self._finish_item(item, {"ok": True, "skipped": True, "output": None})
            return
        name = req["function"]
        if fn.spec.kind is FunctionKind.BUILTIN:
            if name == "get":
                def on_read(ok, record, err):
                    if not ok:
                        self._finish_item(item, {"ok": False, "error": "NoQuorum",
                                                 "detail": str(err)})
                    elif record is None or record["value"] is None:
                        self._finish_item(item, {"ok": False, "error": "NoSuchObject"})
                    else:
                        self._finish_item(item, {"ok": True, "output": {
                            "structured": copy.deepcopy(record["value"]["structured"]),
                            "versions": dict(record["value"]["versions"])}})
                raft.client_read(record_key(oid), on_read)
                return
            if name == "new":
                new_rec = rec or ObjectRecord(oid, cls)
            elif name == "update":
                if rec is None:
                    self._finish_item(item, {"ok": False, "error": "NoSuchObject"})
                    return
                new_rec = rec
                for k, v in (req.get("args", {}).get("set") or {}).items():
                    new_rec.structured[k] = v
            elif name == "delete":
                self._propose_record(item, record_key(oid), None,
                                     {"ok": True, "output": None})
                return
            else:
                self._finish_item(item, {"ok": False, "error": "NoSuchFunction"})
                return
            if item["offset"] is not None:
                new_rec.last_offset = max(new_rec.last_offset, item["offset"])
            self._propose_record(item, record_key(oid), new_rec.snapshot(),
                                 {"ok": True, "output": {"object_id": oid}
                                  if name == "new" else None})
            return
        self._dispatch_task(item, rec)

    def _propose_record(self, item: dict, key: str, snapshot, reply: dict) -> None:
        raft = self._raft(item["resolved"].qualified)

        def on_commit(ok, entry, err):
            if ok:
                self._finish_item(item, reply)
            else:
                self._finish_item(item, {"ok": False, "error": "NoQuorum",
                                         "detail": str(err)})
        raft.client_write(key, snapshot, on_commit)

    # -- built-ins (no engine hop)

    def _run_builtin(self, item: dict, rec: ObjectRecord | None) -> None:
        req, resolved = item["req"], item["resolved"]
        name = req["function"]
        oid = req["object_id"]
        args = req.get("args") or {}
        if name == "new":
            if rec is None:
                rec = ObjectRecord(oid, resolved.qualified)
                if item["offset"] is not None:
                    rec.last_offset = item["offset"]
                self.store_record(rec)
            self._finish_item(item, {"ok": True, "output": {"object_id": oid}})
            return
        if rec is None:
            self._finish_item(item, {"ok": False, "error": "NoSuchObject"})
            return
        if name == "get":
            self._finish_item(item, {"ok": True, "output": {
                "structured": copy.deepcopy(rec.structured),
                "versions": dict(rec.versions)}})
        elif name == "update":
            for k, v in (args.get("set") or {}).items():
                rec.structured[k] = v
            if item["offset"] is not None:
                rec.last_offset = item["offset"]
            self.store_record(rec)
            self._finish_item(item, {"ok": True, "output": None})
        elif name == "delete":
            self.records.pop(oid, None)
            member = self.member_for(resolved.qualified)
            member.store.put(record_key(oid),
                             LwwRegister(None, member.next_stamp()))
            self._finish_item(item, {"ok": True, "output": None})

    # -- task offload

    def _dispatch_task(self, item: dict, rec: ObjectRecord | None) -> None:
        req, resolved, fn = item["req"], item["resolved"], item["fn"]
        oid = req["object_id"]
        if rec is None:
            rec = ObjectRecord(oid, resolved.qualified)
        blobstore = self.platform.blobstore
        read_tokens, write_tokens = {}, {}
        old_versions = dict(rec.versions)
        for key in resolved.unstructured_keys():
            cur = rec.versions.get(key)
            if cur is not None:
                read_tokens[key] = blobstore.mint_token(oid, key, cur, "read").token
            write_tokens[key] = blobstore.mint_token(
                oid, key, blobstore.new_version_id(), "write-new-version").token
        task = {
            "task_id": item["task_id"],
            "object_id": oid,
            "cls": resolved.qualified,
            "function": req["function"],
            "args": req.get("args") or {},
            "structured_snapshot": copy.deepcopy(rec.structured),
            "read_tokens": read_tokens,
            "write_tokens": write_tokens,
            "blob_store": blobstore,
            "payload_bytes": req.get("payload_bytes", 0),
            "offset": item["offset"],
            "output_object_id": req.get("output_object_id"),
        }
        item["old_versions"] = old_versions
        self.outstanding[item["task_id"]] = item
        self.platform.crash_hook("task_dispatched", self.node_id)
        self.platform.dispatch_to_engine(self, task)

    def on_completion(self, completion: dict) -> None:
        item = self.outstanding.pop(completion["task_id"], None)
        if item is None:
            return                        # UnknownTask: stale completion after crash
        self.platform.crash_hook("completion_received", self.node_id)
        if not self.node.alive:
            return
        if completion["status"] != "ok":
            # failed or timed out: nothing is applied; fresh blob versions
            # become orphans and the sweeper reclaims them
            err = "Timeout" if completion["status"] == "timeout" else "EngineFailure"
            self._finish_item(item, {"ok": False, "error": err,
                                     "detail": completion.get("error")})
            return
        self._commit(item, completion)

    def _commit(self, item: dict, completion: dict) -> None:
        req, resolved = item["req"], item["resolved"]
        oid, cls = req["object_id"], resolved.qualified
        if self.is_strong(cls):
            entry = self._raft(cls).kv.get(record_key(oid))
            rec = ObjectRecord.from_snapshot(entry["value"]) \
                if entry and entry["value"] else ObjectRecord(oid, cls)
        else:
            rec = self.load_record(cls, oid) or ObjectRecord(oid, cls)
        if completion.get("new_structured") is not None:
            rec.structured = copy.deepcopy(completion["new_structured"])
        replaced = []
        for key, version in (completion.get("new_versions") or {}).items():
            old = rec.versions.get(key)
            if old is not None:
                replaced.append((oid, key, old))
            rec.versions[key] = version
        if item["offset"] is not None:
            rec.last_offset = max(rec.last_offset, item["offset"])

        if self.is_strong(cls):
            def proposed(ok, _entry, err):
                if not ok:
                    self._finish_item(item, {"ok": False, "error": "NoQuorum",
                                             "detail": str(err)})
                    return
                self._commit_blobs_and_reply(item, completion, replaced)
            self._raft(cls).client_write(record_key(oid), rec.snapshot(), proposed)
            return
        self.store_record(rec)
        self.platform.crash_hook("metadata_committed", self.node_id)
        self._commit_blobs_and_reply(item, completion, replaced)

    def _commit_blobs_and_reply(self, item: dict, completion: dict, replaced) -> None:
        req = item["req"]
        oid = req["object_id"]
        blobstore = self.platform.blobstore
        for key, version in (completion.get("new_versions") or {}).items():
            blobstore.commit_version(oid, key, version)
        for ref in replaced:
            blobstore.purge(*ref)
        self.platform.crash_hook("old_purged", self.node_id)

        output = completion.get("output")
        if item["fn"].output_class and isinstance(output, dict):
            out_oid = req.get("output_object_id") or \
                f"{oid}:{req['function']}:{item['task_id']}"
            out_cls = item["fn"].output_class
            document = output

            def materialized(_ok: bool) -> None:
                self._finish_item(item, {"ok": True, "output": {
                    "cls": out_cls, "object_id": out_oid, "document": document}})
            self.platform.create_output_object(self.node_id, out_cls, out_oid,
                                               document, on_done=materialized)
            return
        self._finish_item(item, {"ok": True, "output": output})

    # -- replies

    def _reply(self, req: dict, payload: dict) -> None:
        reply_to = req.get("reply_to")
        if reply_to is None:
            return
        node_id, handler = reply_to
        payload = {**payload, "req_id": req.get("req_id")}
        self.sim.send(self.node_id, node_id, handler, payload, kind="grid:reply")
