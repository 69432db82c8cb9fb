"""Exception types shared across the package.

Two families matter to callers: configuration and argument problems
(ValueError side, CLI exit code 2) and numerical or runtime failures
discovered mid-computation (RuntimeError side, CLI exit code 3).
"""


class VpdiffError(Exception):
    """Base class for package-specific failures."""


class ConfigError(VpdiffError, ValueError):
    """Invalid configuration. The message lists every violation found."""


class DegenerateDataError(VpdiffError, ValueError):
    """Dataset cannot be normalized (zero variance in some coordinate)."""


class SingularTargetError(VpdiffError, ValueError):
    """Denoising target requested at step 0 where it is undefined."""


class DirectionError(VpdiffError, ValueError):
    """Ensemble has the wrong direction for the requested diagnostic."""


class SampleSizeError(VpdiffError, ValueError):
    """Too few samples for the requested statistic."""


class TrainingFailureError(VpdiffError, RuntimeError):
    """Loss became non-finite during training.

    Carries the offending step index in ``step``.
    """

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class PropagationError(VpdiffError, RuntimeError):
    """Reverse simulation produced non-finite states beyond tolerance.

    Carries the step index where the failure was detected in ``step``.
    """

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
