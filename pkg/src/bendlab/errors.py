"""Exception types shared across bendlab modules."""


class BendlabError(Exception):
    """Base class for every error bendlab raises on purpose."""


# --- layer addressing ---

class PathSyntaxError(BendlabError):
    """A layer path string is malformed (empty segment, bad characters)."""


class PatternSyntaxError(BendlabError):
    """A glob pattern segment is neither a name, an index, '*' nor '**'."""


class PathNotFound(BendlabError):
    """A path (or pattern) does not name any node in the model tree."""


class NotBendable(BendlabError):
    """The resolved node is a container or otherwise not a bend target."""


# --- operators ---

class OperatorParamError(BendlabError):
    """Operator parameters are missing, unknown, or out of range."""


class NonFiniteOutput(BendlabError):
    """A transform or generation step produced NaN/Inf values."""


# --- hook engine ---

class DuplicateId(BendlabError):
    """A bend spec id is already installed in this session."""


class UnknownHandle(BendlabError):
    """A hook handle was never issued by this session."""


class OutOfOrderStep(BendlabError):
    """notify_step received a step index lower than the previous one."""


class ConcurrentGeneration(BendlabError):
    """The session (or its pipeline) is already running a generation."""


# --- pipeline / adapters ---

class AdapterError(BendlabError):
    """A backend adapter is missing a required capability."""

    def __init__(self, capability: str, message: str | None = None):
        self.capability = capability
        super().__init__(message or f"adapter lacks required capability: {capability}")


class ShapeMismatch(BendlabError):
    """Array shapes are incompatible (e.g. offset vector width)."""


# --- feature visualization ---

class ChannelOutOfRange(BendlabError):
    """Requested channel index exceeds the tensor's channel count."""


class NonFiniteInput(BendlabError):
    """A map handed to the display normalizer contains NaN/Inf."""


class SizeMismatch(BendlabError):
    """Grid tiles do not all share the same size."""


# --- recipes ---

class SchemaError(BendlabError):
    """A recipe document violates the schema; carries a location string."""

    def __init__(self, location: str, reason: str):
        self.location = location
        self.reason = reason
        super().__init__(f"{location}: {reason}")


class VersionError(BendlabError):
    """Unsupported recipe version."""

    def __init__(self, version, supported=(1,)):
        self.version = version
        self.supported = tuple(supported)
        super().__init__(
            f"unsupported recipe version {version!r}; supported: {sorted(self.supported)}"
        )


# --- bend-expression DSL ---

class ParseError(BendlabError):
    """Bend expression is malformed; carries the character position."""

    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"at position {position}: {reason}")


class UnknownOperator(BendlabError):
    """Bend expression names an operator kind that does not exist."""


class BadParamValue(BendlabError):
    """Bend expression parameter value is not a number."""
