"""Exception hierarchy shared by every service.

Errors cross service boundaries as JSON (``{"error": <class name>, ...}``)
and are rebuilt on the calling side by :func:`from_wire`, so every class
here must be constructible from its message alone (plus the extra fields
listed in ``wire_fields``).
"""

from __future__ import annotations

from typing import Any


class QsafeError(Exception):
    """Base class for all typed errors raised by qsafenet."""

    wire_fields: tuple[str, ...] = ()

    def to_wire(self) -> dict[str, Any]:
        body: dict[str, Any] = {"error": type(self).__name__, "message": str(self)}
        for name in self.wire_fields:
            body[name] = getattr(self, name)
        return body


# core_crypto
class LengthMismatch(QsafeError):
    pass


class UnsupportedSuite(QsafeError):
    pass


class MalformedPublicKey(QsafeError):
    pass


class MalformedCiphertext(QsafeError):
    pass


class MalformedSecretKey(QsafeError):
    pass


class EmptyInputs(QsafeError):
    pass


class DuplicateLabel(QsafeError):
    pass


class IntegrityError(QsafeError):
    """Authenticated decryption of a session-channel payload failed."""


# qkd_sim / kms
class UnknownLink(QsafeError):
    pass


class KeysExhausted(QsafeError):
    pass


class LinkKeysExhausted(KeysExhausted):
    pass


class SizeUnavailable(QsafeError):
    pass


class UnknownKeyId(QsafeError):
    pass


class AlreadyConsumed(QsafeError):
    pass


class DuplicateSession(QsafeError):
    pass


class NoRule(QsafeError):
    pass


# qusec
class DuplicateId(QsafeError):
    pass


class UnknownEndpoint(QsafeError):
    pass


class UnknownApplication(QsafeError):
    pass


class SameNodeSession(QsafeError):
    pass


class NoQuantumPath(QsafeError):
    pass


class InfeasibleLevel(QsafeError):
    pass


class ParticipantUnreachable(QsafeError):
    pass


class UnknownSession(QsafeError):
    pass


class NotYetDerived(QsafeError):
    pass


class AlreadyDelivered(QsafeError):
    pass


class WrongCaller(QsafeError):
    pass


# vkms
class ControllerUnreachable(QsafeError):
    pass


class RoleKindMismatch(QsafeError):
    pass


class LocalKmsUnavailable(QsafeError):
    pass


class KemFailure(QsafeError):
    pass


class OtpLengthMismatch(QsafeError):
    pass


class KeyConfirmationFailed(QsafeError):
    pass


class DerivationFailed(QsafeError):
    wire_fields = ("level", "cause")

    def __init__(self, message: str, level: str | None = None, cause: str | None = None):
        super().__init__(message)
        self.level = level
        self.cause = cause


# transport
class Unreachable(QsafeError):
    """Destination service is down or cannot be contacted."""


class UnknownRoute(QsafeError):
    pass


class BadRequest(QsafeError):
    pass


# harness
class ParseError(QsafeError):
    pass


class ValidationError(QsafeError):
    pass


class AssignmentMismatch(QsafeError):
    pass


class KeyMismatch(QsafeError):
    pass


class NoSamples(QsafeError):
    pass


def _all_subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_all_subclasses(sub))
    return out


def from_wire(body: dict[str, Any]) -> QsafeError:
    """Rebuild a typed error from its JSON form; unknown names become QsafeError."""
    registry = {c.__name__: c for c in _all_subclasses(QsafeError)}
    cls = registry.get(body.get("error", ""), QsafeError)
    message = body.get("message", "")
    if cls is DerivationFailed:
        return DerivationFailed(message, level=body.get("level"), cause=body.get("cause"))
    return cls(message)
