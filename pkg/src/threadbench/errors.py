"""Exception hierarchy shared across the pipeline.

Everything a caller is expected to handle derives from ``ThreadbenchError`` so
the CLI can map domain failures to exit status 1.
"""


class ThreadbenchError(Exception):
    """Base class for domain errors."""


class ShapeMismatch(ThreadbenchError, ValueError):
    pass


class SchemaViolation(ThreadbenchError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvalidLabel(ThreadbenchError, ValueError):
    pass


class MissingTags(ThreadbenchError, ValueError):
    pass


class BadLabel(ThreadbenchError, ValueError):
    pass


class InvalidGold(ThreadbenchError, ValueError):
    pass


class InsufficientRuns(ThreadbenchError, ValueError):
    pass


class ConfigError(ThreadbenchError, ValueError):
    pass


class LlmError(ThreadbenchError):
    """Backend or model-output failure; ``raw`` keeps the offending payload."""

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


class AuthError(LlmError):
    pass


class RateLimited(LlmError):
    pass


class BackendTimeout(LlmError):
    pass


class MalformedResponse(LlmError):
    pass


class BackendUnavailable(LlmError):
    """Transient server failures persisted past the retry budget."""


class UnparseableModelOutput(LlmError):
    pass


class AliasLeak(LlmError):
    pass


class GoldNotFound(LlmError):
    pass


class TooFewOptions(LlmError):
    pass
