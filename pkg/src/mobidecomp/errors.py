"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class MobidecompError(Exception):
    """Base class for every error raised by this package."""

    code = "error"


class ConfigurationError(MobidecompError, ValueError):
    code = "configuration-error"


class MissingPrerequisiteError(MobidecompError, FileNotFoundError):
    """An artifact produced by an earlier command (for example posterior draws) is absent."""

    code = "missing-prerequisite"


# --- ingestion -------------------------------------------------------------


class IngestError(MobidecompError, ValueError):
    code = "ingest-error"


class ParseError(IngestError):
    """Input file does not follow its schema.

    ``path`` and ``line`` (1-based, header is line 1) locate the problem when known.
    """

    code = "parse-error"

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class RangeError(IngestError):
    code = "range-error"


class DuplicateKeyError(IngestError):
    code = "duplicate-key"


class ValidationError(IngestError):
    code = "validation-error"


class InvalidPopulationError(IngestError):
    code = "invalid-population"


class IncompleteWeekError(IngestError):
    code = "incomplete-week"


class UnresolvableGapError(IngestError):
    code = "unresolvable-gap"


class DegenerateIncidenceError(IngestError):
    code = "degenerate-incidence"


# --- model / differentiation ------------------------------------------------


class DomainError(MobidecompError, ValueError):
    code = "domain-error"


class EvaluationError(MobidecompError, ArithmeticError):
    """Non-finite value met while evaluating a density or a tape node."""

    code = "evaluation-error"

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class CapabilityError(MobidecompError, TypeError):
    code = "capability-error"


# --- sampling ----------------------------------------------------------------


class AdaptationFailure(MobidecompError, RuntimeError):
    code = "adaptation-failure"

    def __init__(self, message: str, chain: int | None = None):
        if chain is not None:
            message = f"chain {chain}: {message}"
        super().__init__(message)
        self.chain = chain


class UndefinedDiagnosticError(MobidecompError, ValueError):
    code = "undefined-diagnostic"


# --- statistics --------------------------------------------------------------


class DegenerateColumnError(MobidecompError, ValueError):
    code = "degenerate-column"


class SingularDesignError(MobidecompError, ValueError):
    code = "singular-design"

    def __init__(self, message: str, columns: list | None = None):
        super().__init__(message)
        self.columns = list(columns or [])


class PressUndefinedError(MobidecompError, ValueError):
    code = "press-undefined"


class DegenerateFitError(MobidecompError, ValueError):
    code = "degenerate-fit"


class InsufficientDataError(MobidecompError, ValueError):
    code = "insufficient-data"
