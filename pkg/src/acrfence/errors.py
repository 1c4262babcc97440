"""Exception hierarchy shared by every acrfence module."""

from __future__ import annotations


class AcrFenceError(Exception):
    """Base class for all errors raised by acrfence."""


# protocol
class MalformedFrame(AcrFenceError):
    pass


class ProtocolViolation(AcrFenceError):
    pass


class MissingToolName(ProtocolViolation):
    pass


# effect log
class StorageFailure(AcrFenceError):
    pass


class DuplicateKey(AcrFenceError):
    pass


class NotFound(AcrFenceError):
    pass


class AlreadyFinalized(AcrFenceError):
    pass


# classifier
class PolicyMissing(AcrFenceError):
    pass


class ConfigError(AcrFenceError):
    pass


class AnalyzerUnreachable(AcrFenceError):
    pass


class AnalyzerMalformed(AcrFenceError):
    pass


# fence
class UnknownSession(AcrFenceError):
    pass


class FutureCheckpoint(AcrFenceError):
    pass


class NoPendingFork(AcrFenceError):
    pass


class TokenMismatch(AcrFenceError):
    pass


class BranchIdInUse(AcrFenceError):
    pass


class UpstreamFailure(AcrFenceError):
    pass


class UpstreamUnreachable(UpstreamFailure):
    pass


class BindFailure(AcrFenceError):
    pass


# simlab
class ScenarioMalformed(AcrFenceError):
    pass
