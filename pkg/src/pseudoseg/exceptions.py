"""Exception hierarchy shared by the pipeline and the command line."""


class PseudoSegError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this error."""

    exit_code = 1


class ConfigurationError(PseudoSegError, ValueError):
    exit_code = 2


class DataError(PseudoSegError, ValueError):
    exit_code = 3


class DivergenceError(PseudoSegError, FloatingPointError):
    """A training loss became non-finite."""

    exit_code = 4


class ShapeError(PseudoSegError, ValueError):
    exit_code = 2
