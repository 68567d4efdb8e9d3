"""Macro (dataflow) functions: declarative DAGs of object invocations.

A macro declares steps whose inputs are temp variables bound by earlier
steps (or the macro's arguments); the platform derives the dependency DAG,
dispatches independent steps concurrently, and tracks intermediate state at
an orchestrator co-located with the root object. Immutable runs pre-generate
every step's output object id so a crashed run can be resumed without a
second side effect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CycleError, NotIdempotent, SchemaError, StepFailure, UndefinedVar

# vars implicitly bound at run start
IMPLICIT_VARS = ("$self", "$args")


@dataclass(frozen=True)
class DataflowStep:
    name: str
    target: str                     # "$self" or a temp var holding an object ref
    function: str
    inputs: tuple = ()              # "$var" entries are refs, anything else literal
    output_var: str | None = None
    immutable: bool = False


@dataclass(frozen=True)
class DataflowSpec:
    steps: tuple[DataflowStep, ...] = ()
    output: str | None = None       # defaults to the last step's output_var

    def final_output_var(self) -> str | None:
        if self.output:
            return self.output
        for step in reversed(self.steps):
            if step.output_var:
                return step.output_var
        return None


@dataclass(frozen=True)
class Dag:
    spec: DataflowSpec
    layers: tuple[tuple[str, ...], ...]          # topological layers, names sorted
    deps: dict[str, tuple[str, ...]]             # step -> step names it waits on


def _var_refs(step: DataflowStep):
    for token in (step.target, *step.inputs):
        if isinstance(token, str) and token.startswith("$"):
            yield token


def build_dag(spec: DataflowSpec) -> Dag:
    """Validate a dataflow and compute its topological layering."""
    names = [s.name for s in spec.steps]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate step names in dataflow")
    producer: dict[str, str] = {}
    for s in spec.steps:
        if s.output_var:
            var = f"${s.output_var}"
            if var in producer or var in IMPLICIT_VARS:
                raise SchemaError(f"output var {var} bound twice")
            producer[var] = s.name

    deps: dict[str, tuple[str, ...]] = {}
    for s in spec.steps:
        wanted = set()
        for var in _var_refs(s):
            if var in IMPLICIT_VARS:
                continue
            if var not in producer:
                raise UndefinedVar(f"step {s.name!r} uses undefined var {var}")
            if producer[var] == s.name:
                raise CycleError(f"step {s.name!r} consumes its own output")
            wanted.add(producer[var])
        deps[s.name] = tuple(sorted(wanted))

    out_var = spec.final_output_var()
    if out_var and f"${out_var}" not in producer:
        raise UndefinedVar(f"dataflow output var ${out_var} is never bound")

    # Kahn layering; ready steps sort lexicographically for reproducible traces
    remaining = dict(deps)
    done: set[str] = set()
    layers: list[tuple[str, ...]] = []
    while remaining:
        ready = sorted(n for n, d in remaining.items() if all(p in done for p in d))
        if not ready:
            raise CycleError(f"dependency cycle among steps {sorted(remaining)}")
        layers.append(tuple(ready))
        for n in ready:
            done.add(n)
            del remaining[n]
    return Dag(spec=spec, layers=tuple(layers), deps=deps)


# --- execution ---------------------------------------------------------------

@dataclass
class StepRecord:
    status: str = "pending"          # pending | inflight | done | failed
    output: object = None
    started_ms: int | None = None
    finished_ms: int | None = None


class MacroRun:
    """Orchestrator-side state of one dataflow execution."""

    def __init__(self, run_id: str, dag: Dag, root_object: str, args: dict,
                 orchestrator_node: str):
        self.run_id = run_id
        self.dag = dag
        self.orchestrator_node = orchestrator_node
        self.bindings: dict[str, object] = {"$self": root_object, "$args": args}
        self.steps: dict[str, StepRecord] = {s.name: StepRecord() for s in dag.spec.steps}
        self.pre_generated_ids: dict[str, str] = {}
        self.failed: StepFailure | None = None
        self.done_callbacks: list = []

    @property
    def complete(self) -> bool:
        return all(r.status == "done" for r in self.steps.values())

    def result(self):
        var = self.dag.spec.final_output_var()
        if var is None:
            return None
        return self.bindings.get(f"${var}")

    # serialization for the checkpoint store -------------------------------

    def snapshot(self) -> dict:
        return {
            "run_id": self.run_id,
            "orchestrator_node": self.orchestrator_node,
            "bindings": {k: v for k, v in self.bindings.items()},
            "status": {n: r.status for n, r in self.steps.items()},
            "pre_generated_ids": dict(self.pre_generated_ids),
        }

    def restore(self, snap: dict) -> None:
        self.bindings = dict(snap["bindings"])
        self.pre_generated_ids = dict(snap["pre_generated_ids"])
        for name, status in snap["status"].items():
            # in-flight steps at crash time are re-dispatched
            self.steps[name].status = "done" if status == "done" else "pending"


class Orchestrator:
    """Drives macro runs from the invoker that owns the root object.

    The platform supplies `invoke(node, target_oid, function, args, output_oid,
    on_done)` which routes a single grid invocation, and `checkpoint(run)`
    which persists run state to the document store after each completion.
    """

    def __init__(self, sim, invoke, checkpoint):
        self.sim = sim
        self._invoke = invoke
        self._checkpoint = checkpoint
        self.runs: dict[str, MacroRun] = {}

    def start(self, run: MacroRun) -> None:
        self.runs[run.run_id] = run
        if all(s.immutable for s in run.dag.spec.steps):
            for s in run.dag.spec.steps:
                run.pre_generated_ids.setdefault(s.name, f"{run.run_id}:{s.name}")
        self._checkpoint(run)
        self._pump(run)

    def resume(self, run: MacroRun, snap: dict) -> None:
        """Re-execute a checkpointed run; refused unless every step is immutable."""
        if not all(s.immutable for s in run.dag.spec.steps):
            raise NotIdempotent(f"run {run.run_id!r} has mutable steps; resume refused")
        run.restore(snap)
        self.runs[run.run_id] = run
        self._pump(run)

    def _pump(self, run: MacroRun) -> None:
        if run.failed is not None:
            return
        if run.complete:
            self._finish(run)
            return
        by_name = {s.name: s for s in run.dag.spec.steps}
        for layer in run.dag.layers:
            for name in layer:
                rec = run.steps[name]
                if rec.status != "pending":
                    continue
                if not all(run.steps[d].status == "done" for d in run.dag.deps[name]):
                    continue
                self._dispatch(run, by_name[name])

    def _dispatch(self, run: MacroRun, step: DataflowStep) -> None:
        rec = run.steps[step.name]
        rec.status = "inflight"
        rec.started_ms = self.sim.now
        target = run.bindings[step.target] if step.target.startswith("$") else step.target
        args = {}
        resolved_inputs = []
        for token in step.inputs:
            if isinstance(token, str) and token.startswith("$"):
                resolved_inputs.append(run.bindings.get(token))
            else:
                resolved_inputs.append(token)
        args["inputs"] = resolved_inputs
        output_oid = run.pre_generated_ids.get(step.name)
        self._invoke(
            run.orchestrator_node, target, step.function, args, output_oid,
            lambda ok, value, err, r=run, s=step: self._on_step_done(r, s, ok, value, err),
        )

    def _on_step_done(self, run: MacroRun, step: DataflowStep, ok: bool, value, err) -> None:
        rec = run.steps[step.name]
        rec.finished_ms = self.sim.now
        if not ok:
            rec.status = "failed"
            run.failed = StepFailure(step.name, str(err))
            self._checkpoint(run)
            for cb in run.done_callbacks:
                cb(run)
            return
        rec.status = "done"
        rec.output = value
        if step.output_var:
            run.bindings[f"${step.output_var}"] = value
        self._checkpoint(run)
        self._pump(run)

    def _finish(self, run: MacroRun) -> None:
        for cb in run.done_callbacks:
            cb(run)

    def step_intervals(self, run_id: str) -> dict[str, tuple[int, int]]:
        run = self.runs[run_id]
        return {n: (r.started_ms, r.finished_ms) for n, r in run.steps.items()
                if r.started_ms is not None}
