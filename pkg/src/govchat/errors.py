"""Exception hierarchy shared across all layers.

Each error carries a stable ``code`` string that is used verbatim in wire
responses ({"ok": false, "err": <code>}), so transports can round-trip
errors without losing their type.
"""

from __future__ import annotations


class GovchatError(Exception):
    """Base class for all errors raised by this package."""

    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class InvalidKeyError(GovchatError):
    code = "KeyError"


class DecryptError(GovchatError):
    code = "DecryptError"


class UsernameError(GovchatError):
    code = "UsernameError"


class DuplicateGroupError(GovchatError):
    code = "DuplicateGroup"


class UnknownGroupError(GovchatError):
    code = "UnknownGroup"


class NotAMemberError(GovchatError):
    code = "NotAMember"


class AlreadyMemberError(GovchatError):
    code = "AlreadyMember"


class BadKeyPackageError(GovchatError):
    code = "BadKeyPackage"


class PendingCommitInFlightError(GovchatError):
    code = "PendingCommitInFlight"


class GroupFrozenError(GovchatError):
    """The group detected a fork and refuses further sends."""

    code = "GroupFrozen"


class RetriesExhaustedError(GovchatError):
    code = "RetriesExhausted"


class AuthFailureError(GovchatError):
    code = "AuthFailure"


class UnknownActionTypeError(GovchatError):
    code = "UnknownActionType"


class UnknownTargetError(GovchatError):
    code = "UnknownTarget"


class EpochMismatchError(GovchatError):
    code = "EpochMismatch"


class UnknownMessageIdError(GovchatError):
    code = "UnknownMessageId"


class DuplicateProposalError(GovchatError):
    code = "DuplicateProposal"


class BannedError(GovchatError):
    code = "Banned"


class ExhaustedError(GovchatError):
    code = "Exhausted"


class UnauthorizedError(GovchatError):
    code = "Unauthorized"


class NameTakenError(GovchatError):
    code = "NameTaken"


class NotFoundError(GovchatError):
    code = "NotFound"


class RejectedConflictError(GovchatError):
    """Ordered send lost the race for its parent epoch; carries the backlog."""

    code = "RejectedConflict"

    def __init__(self, message: str = "", backlog=None):
        super().__init__(message)
        self.backlog = backlog or []


class ParseError(GovchatError):
    code = "ParseError"


class UnverifiedCaseError(GovchatError):
    code = "UnverifiedCase"


class UnknownCaseError(GovchatError):
    code = "UnknownCase"


class ScenarioSetupError(GovchatError):
    code = "ScenarioSetupError"


_BY_CODE = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, GovchatError)
}


def error_for_code(code: str, message: str = "") -> GovchatError:
    """Rebuild a typed error from its wire code (unknown codes degrade to base)."""
    cls = _BY_CODE.get(code, GovchatError)
    err = cls(message)
    if cls is GovchatError:
        err.code = code
    return err
