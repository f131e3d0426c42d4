"""Exception hierarchy. Every error raised on purpose derives from RiskFilterError."""
from __future__ import annotations


class RiskFilterError(Exception):
    pass


class NonFiniteTransition(RiskFilterError):
    def __init__(self, message: str, member_index: int | None = None):
        super().__init__(message)
        self.member_index = member_index


class UnknownEnv(RiskFilterError):
    pass


class InvalidOverride(RiskFilterError):
    pass


class UnstableClosedLoop(RiskFilterError):
    pass


class EmptyUnsafeSample(RiskFilterError):
    pass


class DegenerateDenominator(RiskFilterError):
    pass


class OutOfDomain(RiskFilterError):
    pass


class NoConvergence(RiskFilterError):
    pass


class NoUnsafeStates(RiskFilterError):
    pass


class NonPositiveXibar(RiskFilterError):
    pass


class EmptySublevelSet(RiskFilterError):
    pass


class AllBetaInfeasible(RiskFilterError):
    """No risk parameter on the grid admits a threshold below the sublevel bound.

    This is the neurotic-breakdown regime. The best (infeasible) certificate is
    attached as ``certificate``.
    """

    def __init__(self, message: str, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class ExpectationPremiseViolated(RiskFilterError):
    pass


class BetaUnderflow(RiskFilterError):
    pass


class Theta1TooLarge(RiskFilterError):
    pass


class CertificateMissing(RiskFilterError):
    pass


class CertificationRefused(RiskFilterError):
    pass


class MalformedCsv(RiskFilterError):
    pass


class ConfigError(RiskFilterError):
    pass


class StageError(RiskFilterError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
