"""Exception types shared across the toolkit."""


class ReiterateError(Exception):
    """Base class for toolkit failures."""


class ConfigError(ReiterateError):
    """Invalid configuration or argument schema violation (CLI exit code 2)."""


class ResolutionError(ReiterateError):
    """Grid too coarse for the requested operation; message names the required spacing."""


class CompatibilityError(ReiterateError):
    """Right-hand side incompatible with the periodic problem (nonzero mean)."""


class SolverFailure(ReiterateError):
    """Iterative solve stagnated or hit a non-SPD direction (CLI exit code 3)."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []
