"""Application model: package files, classes, inheritance, SLAs, access.

Package files are a YAML subset. A package declares classes (state keys +
function bindings, optionally with per-class or per-binding quality targets)
and functions (BUILTIN | TASK | MACRO). Availability in files is a percent
("99.9"); internally it is a fraction in (0,1). Everything here is immutable
after resolution and safe to share read-only across the runtime.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import yaml

from .dataflow import DataflowSpec, DataflowStep, build_dag
from .errors import (
    ConflictError,
    CycleError,
    MissingParentError,
    PackageSyntaxError,
    SchemaError,
)

BUILTIN_FUNCTIONS = ("new", "get", "update", "delete")

LOCALITY_LOCAL = "Local"
LOCALITY_NONE = "None"


class Access(str, Enum):
    PUBLIC = "PUBLIC"
    PACKAGE = "PACKAGE"
    PRIVATE = "PRIVATE"


class StateKind(str, Enum):
    STRUCTURED = "structured"
    UNSTRUCTURED = "unstructured"


class FunctionKind(str, Enum):
    BUILTIN = "BUILTIN"
    TASK = "TASK"
    MACRO = "MACRO"


class ConsistencyLevel(str, Enum):
    RYW = "RYW"
    BOUNDED_STALENESS = "BoundedStaleness"
    STRONG = "Strong"


@dataclass(frozen=True)
class ConsistencySpec:
    level: ConsistencyLevel
    staleness_sec: float | None = None

    def __post_init__(self):
        if self.level is ConsistencyLevel.BOUNDED_STALENESS:
            if self.staleness_sec is None or self.staleness_sec <= 0:
                raise SchemaError("BoundedStaleness requires stalenessSec > 0")
        elif self.staleness_sec is not None:
            raise SchemaError("stalenessSec only valid with BoundedStaleness")


@dataclass(frozen=True)
class SlaSpec:
    """Declared non-functional targets. Unset fields inherit (see merge_sla)."""

    throughput_rps: int | None = None
    availability: float | None = None
    locality: str | tuple[str, ...] | None = None
    consistency: ConsistencySpec | None = None
    persistent: bool | None = None

    def __post_init__(self):
        if self.throughput_rps is not None and self.throughput_rps <= 0:
            raise SchemaError("throughput must be a positive integer")
        if self.availability is not None and not (0.0 < self.availability < 1.0):
            raise SchemaError("availability must be strictly inside (0,1)")

    def is_empty(self) -> bool:
        return self == EMPTY_SLA


EMPTY_SLA = SlaSpec()


def merge_sla(base: SlaSpec | None, override: SlaSpec | None) -> SlaSpec:
    """Per-field override: a field set in `override` wins, else `base`."""
    base = base or EMPTY_SLA
    override = override or EMPTY_SLA
    return SlaSpec(
        throughput_rps=override.throughput_rps if override.throughput_rps is not None else base.throughput_rps,
        availability=override.availability if override.availability is not None else base.availability,
        locality=override.locality if override.locality is not None else base.locality,
        consistency=override.consistency if override.consistency is not None else base.consistency,
        persistent=override.persistent if override.persistent is not None else base.persistent,
    )


@dataclass(frozen=True)
class StateKeySpec:
    name: str
    kind: StateKind = StateKind.UNSTRUCTURED
    access: Access = Access.PUBLIC


@dataclass(frozen=True)
class FunctionBinding:
    function: str                       # declared or built-in function name
    access: Access = Access.PUBLIC
    output_class: str | None = None     # raw reference, resolved later
    sla: SlaSpec = EMPTY_SLA            # method-level override


@dataclass(frozen=True)
class ClassSpec:
    name: str
    parent: str | None = None
    state_keys: tuple[StateKeySpec, ...] = ()
    bindings: tuple[FunctionBinding, ...] = ()
    sla: SlaSpec = EMPTY_SLA


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    kind: FunctionKind
    handler_id: str | None = None
    dataflow: DataflowSpec | None = None


@dataclass(frozen=True)
class PackageSpec:
    name: str
    classes: tuple[ClassSpec, ...] = ()
    functions: tuple[FunctionSpec, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate class names in package {self.name!r}")
        declared = {f.name for f in self.functions} | set(BUILTIN_FUNCTIONS)
        for c in self.classes:
            for b in c.bindings:
                if b.function not in declared:
                    raise SchemaError(
                        f"class {c.name!r} binds unknown function {b.function!r}")

    def cls(self, name: str) -> ClassSpec:
        for c in self.classes:
            if c.name == name:
                return c
        raise SchemaError(f"no class {name!r} in package {self.name!r}")

    def function(self, name: str) -> FunctionSpec | None:
        for f in self.functions:
            if f.name == name:
                return f
        return None


# --- parsing ----------------------------------------------------------------

def _require_mapping(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(f"{where} must be a mapping")
    return value


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise SchemaError(f"unknown keys in {where}: {sorted(unknown)}")


def _parse_access(value, where: str) -> Access:
    if value is None:
        return Access.PUBLIC
    try:
        return Access(value)
    except ValueError:
        raise SchemaError(f"bad access modifier {value!r} in {where}") from None


def _parse_availability(value, where: str) -> float:
    # files carry percent ("99.9"); internal representation is a fraction
    try:
        pct = float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"availability in {where} must be a number") from None
    if not (0.0 < pct < 100.0):
        raise SchemaError(f"availability percent in {where} must be in (0,100)")
    return round(pct / 100.0, 12)


def _parse_locality(value, where: str):
    if value is None or value == LOCALITY_NONE:
        return LOCALITY_NONE if value == LOCALITY_NONE else None
    if value == LOCALITY_LOCAL:
        return LOCALITY_LOCAL
    if isinstance(value, list) and all(isinstance(x, str) for x in value):
        return tuple(value)
    raise SchemaError(f"bad locality {value!r} in {where}")


def _parse_sla(qos, constraint, where: str) -> SlaSpec:
    qos = _require_mapping(qos, f"{where}.qos") if qos is not None else {}
    constraint = _require_mapping(constraint, f"{where}.constraint") if constraint is not None else {}
    _check_keys(qos, {"throughput", "availability", "locality", "consistency", "stalenessSec"}, f"{where}.qos")
    _check_keys(constraint, {"persistent"}, f"{where}.constraint")

    throughput = qos.get("throughput")
    if throughput is not None:
        if not isinstance(throughput, int) or isinstance(throughput, bool):
            raise SchemaError(f"throughput in {where} must be an integer")

    availability = qos.get("availability")
    if availability is not None:
        availability = _parse_availability(availability, where)

    consistency = None
    if "consistency" in qos:
        level_raw = qos["consistency"]
        try:
            level = ConsistencyLevel(level_raw)
        except ValueError:
            raise SchemaError(f"bad consistency level {level_raw!r} in {where}") from None
        staleness = qos.get("stalenessSec")
        consistency = ConsistencySpec(level, float(staleness) if staleness is not None else None)
    elif "stalenessSec" in qos:
        raise SchemaError(f"stalenessSec without consistency in {where}")

    persistent = constraint.get("persistent")
    if persistent is not None and not isinstance(persistent, bool):
        raise SchemaError(f"persistent in {where} must be a boolean")

    return SlaSpec(
        throughput_rps=throughput,
        availability=availability,
        locality=_parse_locality(qos.get("locality"), where),
        consistency=consistency,
        persistent=persistent,
    )


def _parse_key_spec(doc, where: str) -> StateKeySpec:
    doc = _require_mapping(doc, where)
    _check_keys(doc, {"name", "access", "kind"}, where)
    if "name" not in doc:
        raise SchemaError(f"state key in {where} needs a name")
    kind_raw = doc.get("kind", StateKind.UNSTRUCTURED.value)
    try:
        kind = StateKind(kind_raw)
    except ValueError:
        raise SchemaError(f"bad state kind {kind_raw!r} in {where}") from None
    return StateKeySpec(doc["name"], kind, _parse_access(doc.get("access"), where))


def _parse_binding(doc, where: str) -> FunctionBinding:
    doc = _require_mapping(doc, where)
    _check_keys(doc, {"function", "name", "access", "outputCls", "qos", "constraint", "image"}, where)
    fn = doc.get("function", doc.get("name"))
    if not fn:
        raise SchemaError(f"function binding in {where} needs function|name")
    if "function" in doc and "name" in doc and doc["function"] != doc["name"]:
        raise SchemaError(f"binding in {where} gives conflicting function and name")
    return FunctionBinding(
        function=fn,
        access=_parse_access(doc.get("access"), where),
        output_class=doc.get("outputCls"),
        sla=_parse_sla(doc.get("qos"), doc.get("constraint"), where),
    )


def _parse_class(doc, where: str) -> ClassSpec:
    doc = _require_mapping(doc, where)
    _check_keys(doc, {"name", "parent", "stateSpec", "keySpecs", "functions", "qos", "constraint"}, where)
    if "name" not in doc:
        raise SchemaError(f"class in {where} needs a name")
    name = doc["name"]
    if "stateSpec" in doc and "keySpecs" in doc:
        raise SchemaError(f"class {name!r} declares both stateSpec and keySpecs")
    key_docs = []
    if "stateSpec" in doc:
        state = _require_mapping(doc["stateSpec"], f"class {name}.stateSpec")
        _check_keys(state, {"keySpecs"}, f"class {name}.stateSpec")
        key_docs = state.get("keySpecs") or []
    elif "keySpecs" in doc:
        key_docs = doc["keySpecs"] or []
    keys = tuple(_parse_key_spec(k, f"class {name} key") for k in key_docs)
    if len({k.name for k in keys}) != len(keys):
        raise SchemaError(f"duplicate state key names in class {name!r}")
    bindings = tuple(_parse_binding(b, f"class {name} binding") for b in doc.get("functions") or [])
    if len({b.function for b in bindings}) != len(bindings):
        raise SchemaError(f"duplicate function bindings in class {name!r}")
    return ClassSpec(
        name=name,
        parent=doc.get("parent"),
        state_keys=keys,
        bindings=bindings,
        sla=_parse_sla(doc.get("qos"), doc.get("constraint"), f"class {name}"),
    )


def _parse_function(doc, where: str) -> FunctionSpec:
    doc = _require_mapping(doc, where)
    _check_keys(doc, {"name", "type", "image", "handler", "dataflow"}, where)
    if "name" not in doc or "type" not in doc:
        raise SchemaError(f"function in {where} needs name and type")
    name = doc["name"]
    try:
        kind = FunctionKind(doc["type"])
    except ValueError:
        raise SchemaError(f"bad function type {doc['type']!r} for {name!r}") from None
    # `image` is accepted and ignored (no container runtimes here)
    dataflow = None
    if kind is FunctionKind.MACRO:
        if "dataflow" not in doc:
            raise SchemaError(f"macro {name!r} needs a dataflow block")
        dataflow = _parse_dataflow(doc["dataflow"], f"macro {name}")
        build_dag(dataflow)  # validates acyclicity and var definitions
    elif "dataflow" in doc:
        raise SchemaError(f"dataflow block on non-macro function {name!r}")
    if kind is FunctionKind.BUILTIN and name not in BUILTIN_FUNCTIONS:
        raise SchemaError(f"{name!r} is not a built-in function name")
    handler = doc.get("handler")
    if kind is FunctionKind.TASK and not handler:
        raise SchemaError(f"task function {name!r} needs a handler id")
    return FunctionSpec(name=name, kind=kind, handler_id=handler, dataflow=dataflow)


def _parse_dataflow(doc, where: str) -> DataflowSpec:
    doc = _require_mapping(doc, where)
    _check_keys(doc, {"steps", "output"}, where)
    steps = []
    for s in doc.get("steps") or []:
        s = _require_mapping(s, f"{where} step")
        _check_keys(s, {"name", "target", "function", "inputs", "output_var", "immutable"}, f"{where} step")
        if "name" not in s or "function" not in s:
            raise SchemaError(f"step in {where} needs name and function")
        steps.append(DataflowStep(
            name=s["name"],
            target=s.get("target", "$self"),
            function=s["function"],
            inputs=tuple(s.get("inputs") or ()),
            output_var=s.get("output_var"),
            immutable=bool(s.get("immutable", False)),
        ))
    return DataflowSpec(steps=tuple(steps), output=doc.get("output"))


def parse_package(text: str) -> PackageSpec:
    """Parse a package file into a PackageSpec; unknown keys are rejected."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PackageSyntaxError(f"malformed package file: {exc}") from exc
    if not isinstance(doc, dict):
        raise PackageSyntaxError("package file must be a mapping")
    _check_keys(doc, {"name", "classes", "functions"}, "package")
    if "name" not in doc:
        raise SchemaError("package needs a name")
    classes = tuple(_parse_class(c, "classes") for c in doc.get("classes") or [])
    functions = tuple(_parse_function(f, "functions") for f in doc.get("functions") or [])
    return PackageSpec(name=doc["name"], classes=classes, functions=functions)


def parse_package_file(path: str) -> PackageSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_package(fh.read())


# --- serialization ----------------------------------------------------------

def _sla_to_doc(sla: SlaSpec) -> tuple[dict, dict]:
    qos: dict = {}
    if sla.throughput_rps is not None:
        qos["throughput"] = sla.throughput_rps
    if sla.availability is not None:
        qos["availability"] = round(sla.availability * 100.0, 10)
    if sla.locality is not None:
        qos["locality"] = list(sla.locality) if isinstance(sla.locality, tuple) else sla.locality
    if sla.consistency is not None:
        qos["consistency"] = sla.consistency.level.value
        if sla.consistency.staleness_sec is not None:
            qos["stalenessSec"] = sla.consistency.staleness_sec
    constraint: dict = {}
    if sla.persistent is not None:
        constraint["persistent"] = sla.persistent
    return qos, constraint


def serialize_package(pkg: PackageSpec) -> str:
    """Emit package text that parses back to an equal PackageSpec."""
    doc: dict = {"name": pkg.name, "classes": [], "functions": []}
    for c in pkg.classes:
        cdoc: dict = {"name": c.name}
        if c.parent:
            cdoc["parent"] = c.parent
        if c.state_keys:
            cdoc["stateSpec"] = {"keySpecs": [
                {"name": k.name, "kind": k.kind.value, "access": k.access.value}
                for k in c.state_keys]}
        if c.bindings:
            cdoc["functions"] = []
            for b in c.bindings:
                bdoc: dict = {"function": b.function, "access": b.access.value}
                if b.output_class:
                    bdoc["outputCls"] = b.output_class
                qos, constraint = _sla_to_doc(b.sla)
                if qos:
                    bdoc["qos"] = qos
                if constraint:
                    bdoc["constraint"] = constraint
                cdoc["functions"].append(bdoc)
        qos, constraint = _sla_to_doc(c.sla)
        if qos:
            cdoc["qos"] = qos
        if constraint:
            cdoc["constraint"] = constraint
        doc["classes"].append(cdoc)
    for f in pkg.functions:
        fdoc: dict = {"name": f.name, "type": f.kind.value}
        if f.handler_id:
            fdoc["handler"] = f.handler_id
        if f.dataflow is not None:
            fdoc["dataflow"] = {
                "steps": [{
                    "name": s.name, "target": s.target, "function": s.function,
                    "inputs": list(s.inputs), "output_var": s.output_var,
                    "immutable": s.immutable,
                } for s in f.dataflow.steps],
                **({"output": f.dataflow.output} if f.dataflow.output else {}),
            }
        doc["functions"].append(fdoc)
    if not doc["classes"]:
        del doc["classes"]
    if not doc["functions"]:
        del doc["functions"]
    return yaml.safe_dump(doc, sort_keys=False)


# --- inheritance resolution ---------------------------------------------------

@dataclass(frozen=True)
class ResolvedFunction:
    name: str
    spec: FunctionSpec
    access: Access
    output_class: str | None            # qualified "pkg.cls" or None
    sla_override: SlaSpec               # method-level declaration only
    sla: SlaSpec                        # effective after class+method merge


@dataclass(frozen=True)
class ResolvedClass:
    name: str
    package: str
    parent: str | None                  # qualified or None
    state_keys: dict[str, StateKeySpec]
    functions: dict[str, ResolvedFunction]
    sla: SlaSpec                        # effective class-level

    @property
    def qualified(self) -> str:
        return f"{self.package}.{self.name}"

    def unstructured_keys(self) -> list[str]:
        return [k for k, s in self.state_keys.items() if s.kind is StateKind.UNSTRUCTURED]


class ResolvedClassSet:
    def __init__(self, classes: dict[str, ResolvedClass]):
        self.classes = classes          # qualified name -> ResolvedClass

    def get(self, qualified: str) -> ResolvedClass:
        if qualified not in self.classes:
            raise SchemaError(f"unknown class {qualified!r}")
        return self.classes[qualified]

    def __iter__(self):
        return iter(self.classes.values())

    def __eq__(self, other):
        return isinstance(other, ResolvedClassSet) and self.classes == other.classes


def _builtin_spec(name: str) -> FunctionSpec:
    return FunctionSpec(name=name, kind=FunctionKind.BUILTIN)


def _qualify(ref: str, package: str) -> str:
    if ref.startswith("."):
        return f"{package}{ref}"
    if "." in ref:
        return ref
    return f"{package}.{ref}"


def resolve_inheritance(pkg: PackageSpec, registry: list[PackageSpec] | tuple = ()) -> ResolvedClassSet:
    """Resolve every class of `pkg` against `pkg` + `registry`.

    Resolution unions inherited state keys and function bindings, applies
    overrides by name, and computes effective per-field SLAs (method-level
    declarations win over the class chain). Raises CycleError,
    MissingParentError, or ConflictError per the model contracts.
    """
    packages = {p.name: p for p in (pkg, *registry)}

    def lookup(qualified: str) -> tuple[PackageSpec, ClassSpec]:
        pkg_name, _, cls_name = qualified.rpartition(".")
        owner = packages.get(pkg_name)
        if owner is None:
            raise MissingParentError(f"unknown package {pkg_name!r}")
        try:
            return owner, owner.cls(cls_name)
        except SchemaError:
            raise MissingParentError(f"unknown class {qualified!r}") from None

    resolved: dict[str, ResolvedClass] = {}
    in_progress: set[str] = set()

    def resolve(qualified: str) -> ResolvedClass:
        if qualified in resolved:
            return resolved[qualified]
        if qualified in in_progress:
            raise CycleError(f"inheritance cycle through {qualified!r}")
        in_progress.add(qualified)
        owner, spec = lookup(qualified)

        if spec.parent:
            parent_q = _qualify(spec.parent, owner.name)
            parent = resolve(parent_q)
            state_keys = dict(parent.state_keys)
            inherited_fns = dict(parent.functions)
            class_sla = merge_sla(parent.sla, spec.sla)
        else:
            parent_q = None
            state_keys = {}
            inherited_fns = {}
            class_sla = spec.sla

        for key in spec.state_keys:
            prior = state_keys.get(key.name)
            if prior is not None and prior.kind is not key.kind:
                raise ConflictError(
                    f"state key {key.name!r} redeclared with kind {key.kind.value} "
                    f"(was {prior.kind.value}) in {qualified!r}")
            state_keys[key.name] = key

        functions: dict[str, ResolvedFunction] = {}
        # inherited bindings keep their method-level overrides but re-merge
        # against this class's effective SLA
        for name, fn in inherited_fns.items():
            functions[name] = replace(fn, sla=merge_sla(class_sla, fn.sla_override))
        for b in spec.bindings:
            fn_spec = owner.function(b.function)
            if fn_spec is None:
                if b.function in BUILTIN_FUNCTIONS:
                    fn_spec = _builtin_spec(b.function)
                elif b.function in inherited_fns:
                    fn_spec = inherited_fns[b.function].spec
                else:
                    raise SchemaError(f"unresolvable function {b.function!r} in {qualified!r}")
            functions[b.function] = ResolvedFunction(
                name=b.function,
                spec=fn_spec,
                access=b.access,
                output_class=_qualify(b.output_class, owner.name) if b.output_class else None,
                sla_override=b.sla,
                sla=merge_sla(class_sla, b.sla),
            )

        out = ResolvedClass(
            name=spec.name, package=owner.name, parent=parent_q,
            state_keys=state_keys, functions=functions, sla=class_sla,
        )
        in_progress.discard(qualified)
        resolved[qualified] = out
        return out

    for c in pkg.classes:
        resolve(f"{pkg.name}.{c.name}")
    return ResolvedClassSet({q: r for q, r in resolved.items() if q.startswith(pkg.name + ".")})


# --- access control -----------------------------------------------------------

@dataclass(frozen=True)
class CallContext:
    """Who is asking: an external caller, or a function of some class."""

    external: bool = True
    package: str | None = None
    cls: str | None = None              # qualified class name

    @classmethod
    def from_class(cls_, qualified: str) -> "CallContext":
        pkg, _, _ = qualified.rpartition(".")
        return cls_(external=False, package=pkg, cls=qualified)


EXTERNAL_CALLER = CallContext()


def check_access(caller: CallContext, access: Access, owner_class: str, owner_package: str) -> bool:
    """Deterministic allow/deny; deny is a value, never an error."""
    if access is Access.PUBLIC:
        return True
    if caller.external:
        return False
    if access is Access.PACKAGE:
        return caller.package == owner_package
    return caller.cls == owner_class
