"""Exception hierarchy shared across the package."""


class CascadeError(Exception):
    """Base class for all package errors."""


class ConfigError(CascadeError):
    """A configuration document or object is invalid.

    ``problems`` lists every offending field so callers can report them all
    at once instead of failing on the first.
    """

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ": " + "; ".join(self.problems)
        super().__init__(message)


class ConstructionError(ConfigError):
    """A requested synthetic construction is not representable."""


class IntegrityError(CascadeError):
    """Two artifacts that must agree (trace/spec, paired records) do not."""


class StageError(CascadeError):
    """A stage model failed to produce a usable output."""

    def __init__(self, message, endpoint=None, body=None):
        self.endpoint = endpoint
        self.body = body
        super().__init__(message)


class AttackError(CascadeError):
    """Objective evaluation failed while searching; carries the candidate."""

    def __init__(self, message, candidate=None):
        self.candidate = candidate
        super().__init__(f"{message} (candidate={candidate})")
