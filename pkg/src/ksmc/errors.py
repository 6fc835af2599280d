"""Exception types shared across the package.

Each class carries an ``exit_code`` used by the command line runner to map
failures onto category codes.
"""


class KsmcError(Exception):
    exit_code = 1


class ConfigError(KsmcError, ValueError):
    exit_code = 2


class InvalidModelError(ConfigError):
    pass


class NumericalError(KsmcError, ArithmeticError):
    exit_code = 3


class NumericalOverflowError(NumericalError):
    """Non-finite value produced while integrating or updating particles."""

    def __init__(self, message, particle_index=None, time_index=None, iteration=None):
        self.particle_index = particle_index
        self.time_index = time_index
        self.iteration = iteration
        details = []
        if time_index is not None:
            details.append(f"time index {time_index}")
        if iteration is not None:
            details.append(f"inner iteration {iteration}")
        if particle_index is not None:
            details.append(f"particle {particle_index}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class SingularGeometryError(NumericalError):
    pass


class InsufficientDataError(KsmcError, ValueError):
    exit_code = 2


class OutputError(KsmcError, OSError):
    exit_code = 4
