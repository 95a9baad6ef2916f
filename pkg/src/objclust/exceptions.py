"""Exception types raised across the package."""


class ConfigError(ValueError):
    """A configuration file or override could not be parsed."""


class ConfigValidationError(ConfigError):
    """A configuration parsed but violates an invariant."""


class UndefinedMetricError(ValueError):
    """A metric was requested on input for which it is not defined."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss.

    ``diagnostics_path`` points at the dump written before aborting.
    """

    def __init__(self, message, diagnostics_path=None):
        super().__init__(message)
        self.diagnostics_path = diagnostics_path


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass
