"""Exception types shared across the package."""


class HmragError(Exception):
    """Base class for package-specific errors."""


class ConfigError(HmragError):
    """Invalid or missing configuration."""


class GatewayError(HmragError):
    """A model or search backend failed.

    Retrieval agents convert this into an unavailable answer candidate
    instead of failing the whole query.
    """


class BackendUnavailableError(GatewayError):
    """Backend unreachable after exhausting the configured retries."""


class SearchParseError(GatewayError):
    """Search response was not valid JSON or missed required fields."""

    def __init__(self, message: str, raw_payload: str = ""):
        super().__init__(message)
        self.raw_payload = raw_payload


class ScriptMismatchError(HmragError):
    """A scripted test double had no entry for the observed input.

    Deliberately not a GatewayError: a miss is a test-configuration bug
    and must fail loudly instead of degrading to an unavailable answer.
    """


class ClassificationParseError(HmragError):
    """Intent-judgment response contained neither decision token."""


class PipelineError(HmragError):
    """Query could not be answered, e.g. every agent was unavailable."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
