"""Exception types shared across the package."""


class TempermixError(Exception):
    """Base class for all package-specific errors."""


class StateSpaceCapError(TempermixError):
    """A requested state space exceeds the configured size cap."""


class UnsupportedKindError(TempermixError, ValueError):
    """Requested combination of model and ladder/restriction is undefined
    (e.g. a dampened ladder over an exponential model, RGB restriction with q != 3)."""


class DivisibilityError(TempermixError, ValueError):
    """An experiment referencing the landmark classes n/2, n/3, n/4, n/6, 2n/3
    was given an n not divisible by 12."""


class WindowError(TempermixError, ValueError):
    """The weight profile along the balanced-minority line is monotone: no
    interior minimum exists.  The two-mode geometry requires mu in the
    coexistence window (4*ln2, 3)."""


class NoTraceError(TempermixError, ValueError):
    """The class distribution admits no level-uniform interior minimum, so no
    trace threshold can be defined."""


class ChainConsistencyError(TempermixError, RuntimeError):
    """A built chain violates row-stochasticity, detailed balance, or the
    stationarity of its recorded weights."""


class EigenConvergenceError(TempermixError, RuntimeError):
    """The iterative eigensolver did not converge to the requested tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(TempermixError, ValueError):
    """One or more experiment-config fields failed validation.  Carries the
    aggregated list of individual problems."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
