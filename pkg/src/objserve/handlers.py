"""Handler registry and the built-in synthetic handlers.

Handlers are pure with respect to the grid: they see a snapshot of the
structured state plus the call args, and may touch unstructured state only
through the blob gateway tokens granted to their task. Each handler declares
a service-time model (fixed ms and/or per-KB ms) since real compute is out
of scope; the defaults loosely mirror chatty / data-intensive /
compute-intensive workload classes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

from .errors import HandlerFault, SchemaError


@dataclass(frozen=True)
class ServiceModel:
    fixed_ms: int = 2
    per_kb_ms: float = 0.0

    def duration_ms(self, payload_bytes: int) -> int:
        return max(1, int(self.fixed_ms + self.per_kb_ms * (payload_bytes / 1024.0)))


SERVICE_CHATTY = ServiceModel(fixed_ms=2)
SERVICE_DATA = ServiceModel(fixed_ms=25)
SERVICE_COMPUTE = ServiceModel(fixed_ms=500)


class BlobGateway:
    """Token-gated view of the blob store handed to a running handler."""

    def __init__(self, store, object_id: str, read_tokens: dict, write_tokens: dict):
        self._store = store
        self._object_id = object_id
        self._read = dict(read_tokens)        # key -> token value
        self._write = dict(write_tokens)
        self.new_versions: dict[str, str] = {}

    def read(self, key: str) -> bytes:
        if key not in self._read:
            raise HandlerFault(f"no read grant for key {key!r}")
        return self._store.access(self._read[key], self._object_id, key)

    def write(self, key: str, payload: bytes) -> str:
        if key not in self._write:
            raise HandlerFault(f"no write grant for key {key!r}")
        version = self._store.access(self._write[key], self._object_id, key, payload)
        self.new_versions[key] = version
        return version


@dataclass
class HandlerContext:
    object_id: str
    structured: dict                 # private copy; mutate freely
    args: dict
    blobs: BlobGateway | None = None
    output_object_id: str | None = None


class HandlerResult(dict):
    """Handlers return {"structured": dict | None, "output": any}."""


class HandlerRegistry:
    def __init__(self):
        self._handlers: dict[str, tuple] = {}

    def register(self, handler_id: str, fn, service: ServiceModel = SERVICE_CHATTY) -> None:
        self._handlers[handler_id] = (fn, service)

    def override_service(self, handler_id: str, service: ServiceModel) -> None:
        fn, _ = self._require(handler_id)
        self._handlers[handler_id] = (fn, service)

    def _require(self, handler_id: str) -> tuple:
        if handler_id not in self._handlers:
            raise SchemaError(f"no handler registered for {handler_id!r}")
        return self._handlers[handler_id]

    def fn(self, handler_id: str):
        return self._require(handler_id)[0]

    def service(self, handler_id: str) -> ServiceModel:
        return self._require(handler_id)[1]

    def known(self, handler_id: str) -> bool:
        return handler_id in self._handlers


# --- built-in synthetic handlers --------------------------------------------

def echo(ctx: HandlerContext):
    return {"output": copy.deepcopy(ctx.args)}


def json_update(ctx: HandlerContext):
    """Set key/value pairs from args["set"] into the structured document."""
    for k, v in (ctx.args.get("set") or {}).items():
        ctx.structured[k] = v
    return {"structured": ctx.structured}


def list_append(ctx: HandlerContext):
    key = ctx.args.get("key", "items")
    ctx.structured.setdefault(key, []).append(ctx.args.get("value"))
    return {"structured": ctx.structured}


def counter_increment(ctx: HandlerContext):
    ctx.structured["count"] = ctx.structured.get("count", 0) + ctx.args.get("by", 1)
    return {"structured": ctx.structured}


def blob_rewrite(ctx: HandlerContext):
    """Read an unstructured key, transform it, write it back as a new version."""
    key = ctx.args.get("key", "data")
    current = b""
    try:
        current = ctx.blobs.read(key)
    except HandlerFault:
        pass                                      # first write: no prior version
    suffix = str(ctx.args.get("suffix", "!")).encode()
    ctx.blobs.write(key, current + suffix)
    ctx.structured["rewrites"] = ctx.structured.get("rewrites", 0) + 1
    return {"structured": ctx.structured}


def tag_output(ctx: HandlerContext):
    """Produce a document whose trail concatenates upstream trails and any
    literal string inputs; dataflow pipelines use it so composition is
    observable and checkable outside the platform."""
    trail: list = []
    tags: list = []
    for item in ctx.args.get("inputs") or []:
        if isinstance(item, dict) and "trail" in item:
            trail.extend(item["trail"])
        elif isinstance(item, str):
            tags.append(item)
    trail.extend(tags or ["step"])
    return {"output": {"trail": trail}}


def faulty(ctx: HandlerContext):
    raise HandlerFault("synthetic failure")


def default_registry() -> HandlerRegistry:
    reg = HandlerRegistry()
    reg.register("echo", echo, SERVICE_CHATTY)
    reg.register("json_update", json_update, SERVICE_CHATTY)
    reg.register("list_append", list_append, SERVICE_CHATTY)
    reg.register("counter_increment", counter_increment, SERVICE_CHATTY)
    reg.register("blob_rewrite", blob_rewrite, SERVICE_DATA)
    reg.register("transcode_sim", blob_rewrite, SERVICE_COMPUTE)
    reg.register("tag_output", tag_output, SERVICE_CHATTY)
    reg.register("faulty", faulty, SERVICE_CHATTY)
    return reg
