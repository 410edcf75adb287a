"""Exception types shared across the package."""


class IbrobustError(Exception):
    """Base class for all package-specific errors."""


# tensor engine
class ShapeMismatch(IbrobustError):
    pass


class NonFinite(IbrobustError):
    """An operation produced NaN or Inf from finite inputs."""


class LossNotScalar(IbrobustError):
    pass


class DetachedNode(IbrobustError):
    """A tensor does not belong to the tape being differentiated."""


class NonFiniteEvaluation(IbrobustError):
    """A function under finite-difference checking returned NaN or Inf."""


# models
class UnsupportedShape(IbrobustError):
    pass


class NonPositiveSigma(IbrobustError):
    pass


class TeacherMissing(IbrobustError):
    pass


class DivergedLoss(IbrobustError):
    """Training loss became non-finite."""


# entropy coding
class ZeroLikelihood(IbrobustError):
    """A symbol fell outside the entropy model's support."""


class SymbolOutOfSupport(IbrobustError):
    pass


class CorruptStream(IbrobustError):
    pass


# attacks
class NonFiniteGradient(IbrobustError):
    pass


class JacobianTooLarge(IbrobustError):
    pass


class NoSaliencyCandidates(IbrobustError):
    """Every pixel has zero saliency; the attack cannot make progress."""


# metrics / datasets / harness
class LabelOutOfRange(IbrobustError):
    pass


class SizeMismatch(IbrobustError):
    pass


class BadMagic(IbrobustError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class TruncatedFile(IbrobustError):
    pass


class CountMismatch(IbrobustError):
    pass


class RecordSizeMismatch(IbrobustError):
    pass


class ConfigError(IbrobustError):
    pass


class DataError(IbrobustError):
    pass


class StageFailure(IbrobustError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class EmptyReport(IbrobustError):
    pass
