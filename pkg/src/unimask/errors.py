"""Exception types shared across the package."""

from __future__ import annotations


class UnimaskError(Exception):
    """Base class for all errors raised by unimask."""


class ShapeMismatch(UnimaskError, ValueError):
    pass


class SumMismatch(UnimaskError, ValueError):
    """RLE counts do not add up to height * width."""


class MissingCategory(UnimaskError, KeyError):
    pass


class IndexOutOfRange(UnimaskError, IndexError):
    pass


class EmptyBox(UnimaskError, ValueError):
    pass


class MissingSupervision(UnimaskError, ValueError):
    """A nonzero cost weight needs a GT field (mask or box) that is absent."""


class TooFewPredictions(UnimaskError, ValueError):
    pass


class WrongTask(UnimaskError, ValueError):
    pass


class VocabularyMismatch(UnimaskError, ValueError):
    pass


class MissingGTMasks(UnimaskError, ValueError):
    pass


class DimMismatch(UnimaskError, ValueError):
    pass


class ParseError(UnimaskError, ValueError):
    pass


class ValidationError(UnimaskError, ValueError):
    """Raised with every problem found, not only the first one."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
