"""Exception hierarchy shared by every stage of the pipeline."""


class ProfilingAgentError(Exception):
    """Base class for all pipeline errors."""


# model acquisition / shapes
class UnknownModel(ProfilingAgentError):
    pass


class DeviceUnavailable(ProfilingAgentError):
    pass


class UnresolvableShape(ProfilingAgentError):
    pass


# llm gateway
class BackendUnavailable(ProfilingAgentError):
    pass


class SchemaViolation(ProfilingAgentError):
    pass


class Timeout(ProfilingAgentError):
    pass


class NoJsonFound(ProfilingAgentError):
    pass


# profiling
class ShapeMismatch(ProfilingAgentError):
    pass


class ForwardShapeError(ProfilingAgentError):
    pass


class OutOfMemory(ProfilingAgentError):
    pass


class CorruptReport(ProfilingAgentError):
    pass


# analysis / compression
class EmptyPlan(ProfilingAgentError):
    pass


class TraceFailure(ProfilingAgentError):
    pass


class DegenerateWidth(ProfilingAgentError):
    pass


class BrokenForward(ProfilingAgentError):
    pass


class UnsupportedDtype(ProfilingAgentError):
    pass


class NoEligibleLayers(ProfilingAgentError):
    pass


# evaluation
class DatasetUnavailable(ProfilingAgentError):
    pass


class IncompatibleInput(ProfilingAgentError):
    pass


class MismatchedRuns(ProfilingAgentError):
    pass


# iterative loop / orchestration
class IterationFailure(ProfilingAgentError):
    pass


class AllIterationsFailed(ProfilingAgentError):
    pass


class ConfigError(ProfilingAgentError):
    pass


class StageFailure(ProfilingAgentError):
    pass


class MissingArtifacts(ProfilingAgentError):
    pass
