"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`SortedEffectsError`. The three intermediate classes map onto the CLI
exit codes (config 2, data 3, numeric 4).
"""


class SortedEffectsError(Exception):
    exit_code = 1


class ConfigError(SortedEffectsError):
    exit_code = 2


class DataError(SortedEffectsError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class EmptySampleError(DataError):
    pass


class NumericalError(SortedEffectsError):
    exit_code = 4


class SingularDesignError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(NumericalError):
    pass


class DegenerateOutcomeError(NumericalError):
    pass


class SolverError(NumericalError):
    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class DegenerateScaleError(NumericalError):
    def __init__(self, message, where=()):
        super().__init__(message)
        self.where = tuple(where)


class EmptyGroupError(NumericalError):
    def __init__(self, message, cutoffs=None):
        super().__init__(message)
        self.cutoffs = cutoffs


class InstabilityError(NumericalError):
    pass


class ToleranceError(NumericalError):
    pass


class DrawFailureError(NumericalError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})
