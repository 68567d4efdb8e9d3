"""Simulated storage planes: blob store, document store, async queue.

These stand in for the object storage, document database, and durable
message broker of a real deployment. They survive node failures (stable
storage); access control for blobs goes through scoped, expiring capability
tokens so a function container can only touch the exact versions its task
was granted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidToken, TokenExpired, WrongMode

TOKEN_TTL_MS = 30_000


@dataclass(frozen=True)
class CapabilityToken:
    token: str                       # 128-bit random value, hex
    object_id: str
    key: str
    version: str
    mode: str                        # "read" | "write-new-version"
    expires_at: int


@dataclass
class _BlobEntry:
    data: bytes
    created_ms: int
    committed: bool


class BlobStore:
    """Content store keyed by (object_id, key, version id).

    Committed versions are immutable; versions written for a task stay
    uncommitted until the owning invoker commits the completion, and orphaned
    versions are purged by the sweeper.
    """

    def __init__(self, sim):
        self.sim = sim
        self._blobs: dict[tuple[str, str, str], _BlobEntry] = {}
        self._tokens: dict[str, CapabilityToken] = {}
        self._version_seq = 0
        self.write_hook = None       # test instrumentation (crash injection)

    # -- invoker side

    def mint_token(self, object_id: str, key: str, version: str, mode: str,
                   ttl_ms: int = TOKEN_TTL_MS) -> CapabilityToken:
        value = f"{self.sim.rng.getrandbits(128):032x}"
        tok = CapabilityToken(value, object_id, key, version, mode,
                              self.sim.now + ttl_ms)
        self._tokens[value] = tok
        return tok

    def new_version_id(self) -> str:
        self._version_seq += 1
        return f"v{self._version_seq}"

    def put_committed(self, object_id: str, key: str, version: str, data: bytes) -> None:
        self._blobs[(object_id, key, version)] = _BlobEntry(data, self.sim.now, True)

    def commit_version(self, object_id: str, key: str, version: str) -> None:
        entry = self._blobs.get((object_id, key, version))
        if entry is not None:
            entry.committed = True

    def purge(self, object_id: str, key: str, version: str) -> None:
        self._blobs.pop((object_id, key, version), None)

    def read_committed(self, object_id: str, key: str, version: str) -> bytes | None:
        entry = self._blobs.get((object_id, key, version))
        return entry.data if entry else None

    # -- function side (token-gated)

    def access(self, token_value: str, object_id: str, key: str,
               payload: bytes | None = None) -> bytes | str:
        """Read the granted version, or store `payload` under the granted
        fresh version id (uncommitted) and return that id."""
        tok = self._tokens.get(token_value)
        if tok is None or tok.object_id != object_id or tok.key != key:
            raise InvalidToken(f"token not valid for ({object_id}, {key})")
        if self.sim.now >= tok.expires_at:
            raise TokenExpired(f"token for ({object_id}, {key}) expired")
        if payload is None:
            if tok.mode != "read":
                raise WrongMode("write token used for read")
            entry = self._blobs.get((tok.object_id, tok.key, tok.version))
            if entry is None:
                raise InvalidToken("granted version no longer exists")
            return entry.data
        if tok.mode != "write-new-version":
            raise WrongMode("read token used for write")
        del self._tokens[token_value]    # write grants are single use
        self._blobs[(tok.object_id, tok.key, tok.version)] = _BlobEntry(
            payload, self.sim.now, False)
        if self.write_hook:
            self.write_hook(tok.object_id, tok.key, tok.version)
        return tok.version

    # -- maintenance / instrumentation

    def sweep_orphans(self, committed_refs: set[tuple[str, str, str]],
                      min_age_ms: int = TOKEN_TTL_MS) -> int:
        """Drop uncommitted versions older than `min_age_ms` that no object
        references. Returns the purge count."""
        doomed = [k for k, e in self._blobs.items()
                  if not e.committed and k not in committed_refs
                  and self.sim.now - e.created_ms >= min_age_ms]
        for k in doomed:
            del self._blobs[k]
        return len(doomed)

    def inventory(self) -> list[tuple[str, str, str, bool]]:
        return sorted((o, k, v, e.committed) for (o, k, v), e in self._blobs.items())


class DocumentStore:
    """Durable structured store (document database analog).

    Write-behind targets land here; nodes reload from here after a crash.
    Values are opaque snapshots owned by the writer.
    """

    def __init__(self):
        self._docs: dict[tuple[str, str], dict] = {}

    def put(self, collection: str, doc_id: str, snapshot: dict) -> None:
        self._docs[(collection, doc_id)] = snapshot

    def get(self, collection: str, doc_id: str) -> dict | None:
        return self._docs.get((collection, doc_id))

    def delete(self, collection: str, doc_id: str) -> None:
        self._docs.pop((collection, doc_id), None)

    def scan(self, collection: str) -> list[tuple[str, dict]]:
        return sorted((doc_id, snap) for (coll, doc_id), snap in self._docs.items()
                      if coll == collection)

    def scan_collections(self, prefix: str) -> list[tuple[str, str, dict]]:
        return sorted((coll, doc_id, snap) for (coll, doc_id), snap in self._docs.items()
                      if coll.startswith(prefix))


@dataclass(frozen=True)
class QueueEntry:
    offset: int
    producer_id: str
    producer_seq: int
    object_id: str
    cls: str
    function: str
    args: dict


class AsyncQueue:
    """Append-only invocation log with idempotent-producer dedupe.

    Offsets are strictly increasing; a (producer id, sequence) pair is only
    ever admitted once. Results are recorded first-wins so redelivered
    completions cannot overwrite the original outcome.
    """

    def __init__(self):
        self._log: list[QueueEntry] = []
        self._dedupe: dict[tuple[str, int], int] = {}
        self._results: dict[str, dict] = {}

    def append(self, producer_id: str, producer_seq: int, object_id: str,
               cls: str, function: str, args: dict) -> tuple[int, bool]:
        """Returns (offset, was_new)."""
        key = (producer_id, producer_seq)
        if key in self._dedupe:
            return self._dedupe[key], False
        offset = len(self._log) + 1
        self._log.append(QueueEntry(offset, producer_id, producer_seq,
                                    object_id, cls, function, args))
        self._dedupe[key] = offset
        return offset, True

    def entries_from(self, offset_exclusive: int = 0) -> list[QueueEntry]:
        return self._log[offset_exclusive:]

    def entries_for_object(self, object_id: str, after_offset: int = 0) -> list[QueueEntry]:
        return [e for e in self._log if e.object_id == object_id and e.offset > after_offset]

    def __len__(self) -> int:
        return len(self._log)

    @staticmethod
    def invocation_id(entry: QueueEntry) -> str:
        return f"inv-{entry.offset}"

    def record_result(self, invocation_id: str, result: dict) -> None:
        self._results.setdefault(invocation_id, result)

    def result(self, invocation_id: str) -> dict | None:
        return self._results.get(invocation_id)
