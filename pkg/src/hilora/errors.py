"""Exception hierarchy shared by all hilora modules."""


class HiloraError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(HiloraError, ValueError):
    pass


class NotPositiveDefinite(HiloraError, ValueError):
    pass


class NonPositiveDiagonal(HiloraError, ValueError):
    pass


class EmptyInput(HiloraError, ValueError):
    pass


class KTooLarge(HiloraError, ValueError):
    pass


class InvalidProbabilities(HiloraError, ValueError):
    pass


class DegenerateInput(HiloraError, ValueError):
    pass


class IndexOutOfRange(HiloraError, IndexError):
    pass


class EmptyPool(HiloraError, ValueError):
    pass


class ParseError(HiloraError, ValueError):
    pass


class ShapeMismatch(ParseError):
    """Declared rank/dim disagree with the stored payload."""


class InvalidSpec(HiloraError, ValueError):
    pass


class TooFewSamples(HiloraError, ValueError):
    pass


class IrreparablySingular(HiloraError, ValueError):
    pass


class MissingSampleSource(HiloraError, KeyError):
    pass


class EmptyScores(HiloraError, ValueError):
    pass


class NoCandidates(HiloraError, ValueError):
    pass


class InvalidIndex(HiloraError, IndexError):
    pass


class InvalidLayer(HiloraError, IndexError):
    pass


class InfiniteMoment(HiloraError, ArithmeticError):
    """The alpha-moment integral diverges (weighted precision not SPD)."""


class ConfigError(HiloraError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
