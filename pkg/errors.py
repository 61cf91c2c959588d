"""
Domain exceptions for the interference design toolkit.

Everything derives from ``InterferenceDesignError`` (itself a ``ValueError``)
so callers that only care about "bad input or degenerate draw" can catch one
type, while the Monte Carlo harness can single out the degenerate-draw
subset it is allowed to retry.
"""


class InterferenceDesignError(ValueError):
    """Root of every error raised by this package."""


# --- design / parameter validation -----------------------------------------

class NonPositiveAlphaError(InterferenceDesignError):
    pass


class DegenerateGeometryError(InterferenceDesignError):
    pass


class EmptyArmsError(InterferenceDesignError):
    pass


class OutOfRangeError(InterferenceDesignError):
    pass


class IndexOutOfRangeError(InterferenceDesignError):
    pass


class UnbalancedAlphaUnsupportedError(InterferenceDesignError):
    pass


class ConfigError(InterferenceDesignError):
    """Run-config file could not be parsed or validated."""


# --- randomization ------------------------------------------------------------

class DimensionUnsupportedError(InterferenceDesignError):
    pass


class EmptyTableError(InterferenceDesignError):
    pass


class DegenerateVarianceError(InterferenceDesignError):
    pass


# --- estimation ---------------------------------------------------------------

class DegenerateDrawError(InterferenceDesignError):
    """A realized assignment cannot support the requested fit.

    Subclasses are the failures a fresh random draw can cure; the simulation
    harness retries exactly these.
    """


class AllColumnsDroppedError(DegenerateDrawError):
    pass


class MissingBetaColumnError(DegenerateDrawError):
    pass


class SingularGramError(DegenerateDrawError):
    pass


class NonFiniteInputError(InterferenceDesignError):
    pass


class ZeroDenominatorError(InterferenceDesignError):
    pass


class EmptyInputError(InterferenceDesignError):
    pass


# --- interchange --------------------------------------------------------------

class MalformedTableError(InterferenceDesignError):
    """A CSV/JSON table is missing required columns or holds unparsable values."""
