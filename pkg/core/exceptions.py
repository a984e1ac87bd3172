"""
Domain errors plus the custom DRF exception handler (HackSoft Approach 1).

Services raise ``DacsError`` subclasses; the handler turns them into the
same ``{"detail": ...}`` JSON shape DRF uses for its own errors.
"""

from django.core.exceptions import ValidationError as DjangoValidationError
from rest_framework import exceptions, status
from rest_framework.response import Response
from rest_framework.serializers import as_serializer_error
from rest_framework.views import exception_handler


class DacsError(Exception):
    """Base class for every harness error."""


class UnknownAgent(DacsError):
    def __init__(self, agent_id: str):
        super().__init__(f"Unknown agent: {agent_id!r}")
        self.agent_id = agent_id


class DuplicateRequest(DacsError):
    pass


class FocusContextOverflow(DacsError):
    def __init__(self, agent_id: str, tokens: int, budget: int):
        super().__init__(
            f"Focus context for {agent_id!r} needs {tokens} tokens, budget is {budget}"
        )
        self.agent_id = agent_id
        self.tokens = tokens
        self.budget = budget


class ProtocolViolation(DacsError):
    pass


class ScenarioInvalid(DacsError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class UnknownScenario(DacsError):
    pass


class UnreadableFile(DacsError):
    def __init__(self, path, reason: str):
        super().__init__(f"Cannot read {path}: {reason}")
        self.path = path


class MalformedMarker(DacsError):
    pass


class BackendUnavailable(DacsError):
    pass


class MissingApiKey(DacsError):
    pass


class EmptyTrial(DacsError):
    pass


class VerdictMissing(DacsError):
    pass


class KappaUndefined(DacsError):
    pass


class InsufficientSamples(DacsError):
    pass


class DegenerateVariance(DacsError):
    pass


class SingularFit(DacsError):
    pass


class ReportIncomplete(DacsError):
    pass


class BatchAborted(DacsError):
    def __init__(self, message: str, completed: int):
        super().__init__(message)
        self.completed = completed


class TrialFailed(DacsError):
    def __init__(self, message: str, log_path=None):
        super().__init__(message)
        self.log_path = log_path


def custom_exception_handler(exc, ctx):
    """
    1. Convert Django ValidationError -> DRF ValidationError.
    2. Map harness errors to 400 (404 for an unknown scenario).
    3. Ensure ``response.data`` always has the ``detail`` key.
    """
    if isinstance(exc, DjangoValidationError):
        exc = exceptions.ValidationError(as_serializer_error(exc))

    if isinstance(exc, DacsError):
        code = (
            status.HTTP_404_NOT_FOUND
            if isinstance(exc, UnknownScenario)
            else status.HTTP_400_BAD_REQUEST
        )
        return Response({"detail": str(exc)}, status=code)

    response = exception_handler(exc, ctx)

    if response is None:
        return response

    if isinstance(exc.detail, (list, dict)):
        response.data = {"detail": response.data}

    return response
