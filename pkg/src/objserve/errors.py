"""Exception types shared across the platform."""


class ObserveError(Exception):
    """Base class for all platform errors."""


# --- package model ---------------------------------------------------------

class PackageSyntaxError(ObserveError):
    """Package file text is not well-formed."""


class SchemaError(ObserveError):
    """Unknown field, bad enum value, or violated structural invariant."""


class CycleError(ObserveError):
    """Inheritance or dataflow dependency cycle."""


class MissingParentError(ObserveError):
    """Parent class reference cannot be resolved."""


class ConflictError(ObserveError):
    """Same state key declared twice with different kinds."""


# --- simulation ------------------------------------------------------------

class SimEnded(ObserveError):
    """Event scheduled in the past or after the run window closed."""


# --- object grid -----------------------------------------------------------

class EmptyRing(ObserveError):
    pass


class AccessDenied(ObserveError):
    pass


class NoSuchFunction(ObserveError):
    pass


class EngineFailure(ObserveError):
    """Handler reported failure; surfaces to the synchronous caller."""


class UnknownTask(ObserveError):
    pass


class NotOwner(ObserveError):
    """Request landed on a node that does not own the object's primary."""


class InvalidToken(ObserveError):
    pass


class TokenExpired(ObserveError):
    pass


class WrongMode(ObserveError):
    pass


# --- engine ----------------------------------------------------------------

class Timeout(ObserveError):
    pass


class HandlerFault(ObserveError):
    """Raised inside a handler; mapped to a failed completion."""


class CapacityExceeded(ObserveError):
    def __init__(self, message: str, deficit_vcpu: int = 0):
        super().__init__(message)
        self.deficit_vcpu = deficit_vcpu


# --- consistency -----------------------------------------------------------

class NoQuorum(ObserveError):
    pass


class StalenessWindowExceeded(ObserveError):
    pass


# --- planner ---------------------------------------------------------------

class InfeasibleTarget(ObserveError):
    pass


class InsufficientDatacenters(ObserveError):
    pass


# --- dataflow --------------------------------------------------------------

class UndefinedVar(ObserveError):
    pass


class NotIdempotent(ObserveError):
    """Resume refused: some step lacks the immutable flag."""


class StepFailure(ObserveError):
    def __init__(self, step: str, cause: str):
        super().__init__(f"step {step!r} failed: {cause}")
        self.step = step
        self.cause = cause


# --- workload cli ----------------------------------------------------------

class ScenarioError(ObserveError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class MalformedHistory(ObserveError):
    pass
