"""Leader-quorum replicated log for strong-consistency groups.

Standard protocol shape: randomized election timeouts (150-300 ms),
50 ms heartbeats, log matching, majority commit restricted to the leader's
current term. Linearizable reads use the read-index path (leader confirms a
majority heartbeat round before serving) instead of writing no-op entries.
Term/vote/log persist across node kills via the node's durable area;
everything else is rebuilt on restart.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import NoQuorum

HEARTBEAT_MS = 50
ELECTION_MIN_MS = 150
ELECTION_MAX_MS = 300
CLIENT_TIMEOUT_MS = 1_000

FOLLOWER, CANDIDATE, LEADER = "follower", "candidate", "leader"


@dataclass
class LogEntry:
    term: int
    index: int
    command: dict


class RaftMember:
    """One member of one strong replica group."""

    def __init__(self, sim, group_id: str, node_id: str, member_ids: tuple[str, ...],
                 election_log: list | None = None):
        self.sim = sim
        self.group_id = group_id
        self.node_id = node_id
        self.node = sim.nodes[node_id]
        self.members = tuple(member_ids)
        self.peers = tuple(m for m in member_ids if m != node_id)
        self.peer_members: dict[str, "RaftMember"] = {}
        self.election_log = election_log if election_log is not None else []
        self.commit_listeners: list = []

        durable = self.node.durable.setdefault(f"raft:{group_id}", {
            "term": 0, "voted_for": None, "log": []})
        self._durable = durable

        self.role = FOLLOWER
        self.leader_hint: str | None = None
        self.commit_index = 0
        self.last_applied = 0
        self.kv: dict[str, dict] = {}
        self.commit_term = 0              # term of the newest committed entry

        # leader volatile
        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self.pending_writes: dict[int, list] = {}    # log index -> callbacks
        self.pending_reads: list[dict] = []
        self._wave = 0
        self._wave_acks: dict[int, set] = {}

        self._last_heartbeat_ms = sim.now
        self._epoch = 0               # invalidates timer chains across restarts
        self.node.on_crash(self._on_crash)
        self.node.on_restart(self._on_restart)
        self._arm_election_timer()

    # -- durable accessors

    @property
    def term(self) -> int:
        return self._durable["term"]

    @term.setter
    def term(self, value: int) -> None:
        self._durable["term"] = value

    @property
    def voted_for(self):
        return self._durable["voted_for"]

    @voted_for.setter
    def voted_for(self, value) -> None:
        self._durable["voted_for"] = value

    @property
    def log(self) -> list[LogEntry]:
        return self._durable["log"]

    def attach_peers(self, members: dict[str, "RaftMember"]) -> None:
        self.peer_members = {m: members[m] for m in self.peers}

    # -- crash / restart

    def _on_crash(self) -> None:
        self._epoch += 1
        self.role = FOLLOWER
        self.leader_hint = None
        self.commit_index = 0
        self.last_applied = 0
        self.kv = {}
        self.commit_term = 0
        self.pending_writes = {}
        self.pending_reads = []
        self._wave_acks = {}

    def _on_restart(self) -> None:
        self._last_heartbeat_ms = self.sim.now
        self._arm_election_timer()

    # -- timers

    def _arm_election_timer(self) -> None:
        timeout = self.sim.rng.randint(ELECTION_MIN_MS, ELECTION_MAX_MS)
        self.sim.after(timeout, self._election_check, timeout, self._epoch)

    def _election_check(self, timeout: int, epoch: int) -> None:
        if epoch != self._epoch or not self.node.alive:
            return
        if self.role != LEADER and self.sim.now - self._last_heartbeat_ms >= timeout:
            self._start_election()
        self._arm_election_timer()

    def _start_election(self) -> None:
        self.term += 1
        self.role = CANDIDATE
        self.voted_for = self.node_id
        self.leader_hint = None
        self._votes = {self.node_id}
        last = self.log[-1] if self.log else None
        for peer in self.peers:
            self._send(peer, {
                "kind": "rv", "term": self.term, "candidate": self.node_id,
                "last_log_index": last.index if last else 0,
                "last_log_term": last.term if last else 0})

    def _majority(self) -> int:
        return len(self.members) // 2 + 1

    def _send(self, peer: str, msg: dict) -> None:
        member = self.peer_members[peer]
        self.sim.send(self.node_id, peer, member.on_message, msg,
                      kind=f"raft:{msg['kind']}")

    # -- message handling

    def on_message(self, msg: dict) -> None:
        if msg["term"] > self.term:
            self.term = msg["term"]
            self.voted_for = None
            self._become_follower()
        kind = msg["kind"]
        if kind == "rv":
            self._on_request_vote(msg)
        elif kind == "rv_resp":
            self._on_vote_response(msg)
        elif kind == "ae":
            self._on_append_entries(msg)
        elif kind == "ae_resp":
            self._on_append_response(msg)

    def _become_follower(self) -> None:
        if self.role == LEADER:
            self._fail_pending(NoQuorum("lost leadership"))
        self.role = FOLLOWER

    def _on_request_vote(self, msg: dict) -> None:
        grant = False
        if msg["term"] >= self.term and self.voted_for in (None, msg["candidate"]):
            last = self.log[-1] if self.log else None
            my_last_term = last.term if last else 0
            my_last_index = last.index if last else 0
            up_to_date = (msg["last_log_term"], msg["last_log_index"]) >= (my_last_term, my_last_index)
            if up_to_date:
                grant = True
                self.voted_for = msg["candidate"]
                self._last_heartbeat_ms = self.sim.now
        self._send(msg["candidate"], {
            "kind": "rv_resp", "term": self.term, "from": self.node_id, "granted": grant})

    def _on_vote_response(self, msg: dict) -> None:
        if self.role != CANDIDATE or msg["term"] != self.term or not msg["granted"]:
            return
        self._votes.add(msg["from"])
        if len(self._votes) >= self._majority():
            self._become_leader()

    def _become_leader(self) -> None:
        self.role = LEADER
        self.leader_hint = self.node_id
        self.election_log.append({"term": self.term, "leader": self.node_id,
                                  "at_ms": self.sim.now})
        last_index = self.log[-1].index if self.log else 0
        self.next_index = {p: last_index + 1 for p in self.peers}
        self.match_index = {p: 0 for p in self.peers}
        self._broadcast_append()
        self.sim.after(HEARTBEAT_MS, self._heartbeat, self._epoch, self.term)

    def _heartbeat(self, epoch: int, term: int) -> None:
        if epoch != self._epoch or self.role != LEADER or self.term != term \
                or not self.node.alive:
            return
        self._broadcast_append()
        self.sim.after(HEARTBEAT_MS, self._heartbeat, epoch, term)

    def _broadcast_append(self) -> None:
        self._wave += 1
        self._wave_acks[self._wave] = {self.node_id}
        if len(self._wave_acks) > 256:
            cutoff = self._wave - 128
            self._wave_acks = {w: a for w, a in self._wave_acks.items() if w > cutoff}
        for peer in self.peers:
            nxt = self.next_index[peer]
            prev = self.log[nxt - 2] if nxt >= 2 and nxt - 2 < len(self.log) else None
            entries = [(e.term, e.index, e.command) for e in self.log[nxt - 1:]]
            self._send(peer, {
                "kind": "ae", "term": self.term, "leader": self.node_id,
                "prev_index": prev.index if prev else 0,
                "prev_term": prev.term if prev else 0,
                "entries": entries, "leader_commit": self.commit_index,
                "wave": self._wave})

    def _on_append_entries(self, msg: dict) -> None:
        if msg["term"] < self.term:
            self._send(msg["leader"], {"kind": "ae_resp", "term": self.term,
                                       "from": self.node_id, "success": False,
                                       "match": 0, "wave": msg["wave"]})
            return
        self._last_heartbeat_ms = self.sim.now
        self.leader_hint = msg["leader"]
        if self.role != FOLLOWER:
            self._become_follower()
        prev_index = msg["prev_index"]
        if prev_index > 0:
            if prev_index > len(self.log) or self.log[prev_index - 1].term != msg["prev_term"]:
                self._send(msg["leader"], {"kind": "ae_resp", "term": self.term,
                                           "from": self.node_id, "success": False,
                                           "match": 0, "wave": msg["wave"]})
                return
        for term, index, command in msg["entries"]:
            if index <= len(self.log):
                if self.log[index - 1].term != term:
                    del self.log[index - 1:]
                    self.log.append(LogEntry(term, index, command))
            else:
                self.log.append(LogEntry(term, index, command))
        if msg["leader_commit"] > self.commit_index:
            self.commit_index = min(msg["leader_commit"], len(self.log))
            self._apply_committed()
        match = msg["prev_index"] + len(msg["entries"])
        self._send(msg["leader"], {"kind": "ae_resp", "term": self.term,
                                   "from": self.node_id, "success": True,
                                   "match": match, "wave": msg["wave"]})

    def _on_append_response(self, msg: dict) -> None:
        if self.role != LEADER or msg["term"] != self.term:
            return
        peer = msg["from"]
        if not msg["success"]:
            self.next_index[peer] = max(1, self.next_index[peer] - 1)
            return
        self.match_index[peer] = max(self.match_index[peer], msg["match"])
        self.next_index[peer] = self.match_index[peer] + 1
        acks = self._wave_acks.get(msg["wave"])
        if acks is not None:
            acks.add(peer)
            if len(acks) >= self._majority():
                self._serve_ready_reads(msg["wave"])
        self._advance_commit()

    def _advance_commit(self) -> None:
        matches = sorted([len(self.log)] + list(self.match_index.values()), reverse=True)
        candidate = matches[self._majority() - 1]
        while candidate > self.commit_index:
            if self.log[candidate - 1].term == self.term:
                self.commit_index = candidate
                self._apply_committed()
                break
            candidate -= 1

    def _apply_committed(self) -> None:
        while self.last_applied < self.commit_index:
            self.last_applied += 1
            entry = self.log[self.last_applied - 1]
            cmd = entry.command
            self.kv[cmd["key"]] = {"value": cmd["value"], "index": entry.index,
                                   "committed_ms": self.sim.now}
            self.commit_term = entry.term
            for listener in self.commit_listeners:
                listener(self.group_id, entry, self.sim.now, self.node_id)
            for cb in self.pending_writes.pop(entry.index, []):
                cb(True, entry, None)
        self._serve_applied_reads()

    # -- client operations (invoked at this member via platform routing)

    def client_write(self, key: str, value, cb) -> None:
        """cb(ok, entry|None, error); error ("redirect", hint) when not leader."""
        if self.role != LEADER:
            cb(False, None, ("redirect", self.leader_hint))
            return
        index = (self.log[-1].index if self.log else 0) + 1
        self.log.append(LogEntry(self.term, index, {"key": key, "value": value}))
        self.pending_writes.setdefault(index, []).append(cb)
        self.sim.after(CLIENT_TIMEOUT_MS, self._write_deadline, index, self.term)
        self._broadcast_append()

    def _write_deadline(self, index: int, term: int) -> None:
        if self.commit_index >= index:
            return
        for cb in self.pending_writes.pop(index, []):
            cb(False, None, NoQuorum(f"no quorum for index {index} (term {term})"))

    def client_read(self, key: str, cb) -> None:
        """Read-index read; cb(ok, value_record|None, error)."""
        if self.role != LEADER:
            cb(False, None, ("redirect", self.leader_hint))
            return
        if self.commit_term != self.term:
            # fresh leader: must commit an entry of its own term before
            # read-index is safe; wait for write traffic or give up
            self.pending_reads.append({"key": key, "cb": cb, "read_index": None,
                                       "wave": None, "confirmed": False,
                                       "deadline": self.sim.now + CLIENT_TIMEOUT_MS})
            self.sim.after(CLIENT_TIMEOUT_MS, self._read_deadline)
            return
        self._wave += 1
        wave = self._wave
        self._wave_acks[wave] = {self.node_id}
        self.pending_reads.append({"key": key, "cb": cb, "read_index": self.commit_index,
                                   "wave": wave, "confirmed": len(self.members) == 1,
                                   "deadline": self.sim.now + CLIENT_TIMEOUT_MS})
        self.sim.after(CLIENT_TIMEOUT_MS, self._read_deadline)
        if len(self.members) == 1:
            self._serve_applied_reads()
        else:
            self._broadcast_append()

    def _serve_ready_reads(self, wave: int) -> None:
        for read in self.pending_reads:
            if read["wave"] is not None and read["wave"] <= wave:
                read["confirmed"] = True
        self._serve_applied_reads()

    def _serve_applied_reads(self) -> None:
        remaining = []
        for read in self.pending_reads:
            if read["read_index"] is None and self.commit_term == self.term:
                # retro-arm reads that waited for a current-term commit
                self._wave += 1
                read["read_index"] = self.commit_index
                read["wave"] = self._wave
                self._wave_acks[self._wave] = {self.node_id}
                self._broadcast_append()
            if read["confirmed"] and read["read_index"] is not None \
                    and self.last_applied >= read["read_index"]:
                read["cb"](True, self.kv.get(read["key"]), None)
            else:
                remaining.append(read)
        self.pending_reads = remaining

    def _read_deadline(self) -> None:
        now = self.sim.now
        remaining = []
        for read in self.pending_reads:
            if now >= read["deadline"]:
                read["cb"](False, None, NoQuorum("read could not confirm quorum"))
            else:
                remaining.append(read)
        self.pending_reads = remaining

    def on_client(self, msg: dict) -> None:
        """Network front-end: {op, key, value?, reply_to, req_id}."""
        reply_to = msg["reply_to"]

        def respond(payload: dict) -> None:
            self.sim.send(self.node_id, reply_to[0], reply_to[1],
                          {"req_id": msg.get("req_id"), "node": self.node_id,
                           **payload},
                          kind="raft:client-reply")

        def cb(ok, result, err):
            if ok:
                if msg["op"] == "write":
                    respond({"ok": True, "stamp": [result.index]})
                else:
                    respond({"ok": True,
                             "value": result["value"] if result else None,
                             "stamp": [result["index"]] if result else None})
            elif isinstance(err, tuple) and err and err[0] == "redirect":
                respond({"ok": False, "error": "Redirect", "leader": err[1]})
            else:
                respond({"ok": False, "error": "NoQuorum", "detail": str(err)})

        if msg["op"] == "write":
            self.client_write(msg["key"], msg["value"], cb)
        else:
            self.client_read(msg["key"], cb)

    def _fail_pending(self, err: Exception) -> None:
        for index, cbs in list(self.pending_writes.items()):
            for cb in cbs:
                cb(False, None, err)
        self.pending_writes = {}
        for read in self.pending_reads:
            read["cb"](False, None, err)
        self.pending_reads = []
