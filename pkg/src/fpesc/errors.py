"""Exception types raised across the package."""


class FpescError(Exception):
    """Base class for all package errors."""


class ModeMismatchError(FpescError):
    """Operation needs a torus domain but got free space (or vice versa)."""


class JetMismatchError(FpescError, ValueError):
    """Truncated Taylor operands disagree in dimension or degree."""


class OrderExceededError(FpescError, ValueError):
    pass


class SingularityError(FpescError, ZeroDivisionError):
    pass


class UnsupportedOrderError(FpescError, ValueError):
    pass


class InvalidFieldError(FpescError, ValueError):
    pass


class NotTrainableError(FpescError, TypeError):
    pass


class OutOfRangeError(FpescError, ValueError):
    """Requested time is outside (or off) the stored time grid."""


class InvalidInitialError(FpescError, ValueError):
    pass


class PathSingularityError(FpescError):
    pass


class DivergenceError(FpescError, FloatingPointError):
    """A trajectory produced a non-finite value.

    ``time`` is the first grid time at which the state stopped being finite;
    ``sample`` is the offending sample index when known.
    """

    def __init__(self, time, sample=None, where="forward"):
        self.time = float(time)
        self.sample = sample
        self.where = where
        msg = f"non-finite state in {where} pass at t={self.time:.6g}"
        if sample is not None:
            msg += f" (sample {sample})"
        super().__init__(msg)


class ConfigError(FpescError, ValueError):
    pass
