"""Exception hierarchy shared by all churnssm modules."""


class ChurnSSMError(Exception):
    """Base class for every error raised by churnssm."""


class InputError(ChurnSSMError, ValueError):
    """Malformed or out-of-domain input data."""


class ConfigurationError(ChurnSSMError, ValueError):
    """Inconsistent model or run configuration (dimensions, specs, params)."""


class ConstraintError(ConfigurationError):
    """Natural-scale parameters outside their admissible region."""


class CollinearityError(ConfigurationError):
    """Covariates are linearly dependent (with each other or a model level)."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class NumericalError(ChurnSSMError, ArithmeticError):
    """Numerical breakdown, e.g. a non-positive innovation variance."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FitError(NumericalError):
    """Likelihood maximisation failed on every start.

    ``best`` carries the best point found so far (unconstrained scale) and
    ``loglikelihood`` its value, so callers can still inspect it.
    """

    def __init__(self, message, best=None, loglikelihood=None):
        super().__init__(message)
        self.best = best
        self.loglikelihood = loglikelihood


class ValidationError(InputError):
    """An input record violates a documented invariant."""


class MissingArtifactError(ChurnSSMError, FileNotFoundError):
    """A pipeline step was invoked before the step producing its inputs."""

    def __init__(self, path, command):
        super().__init__(f"missing {path}; run `{command}` first")
        self.path = path
        self.command = command
