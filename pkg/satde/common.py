import logging

log_format_str = '%(asctime)s - %(process)d - %(name)s - %(module)s:%(lineno)d - %(levelname)s - %(message)s'
log_formatter = logging.Formatter(log_format_str)

SCHEMA_VERSION = 1

# Process exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_INCONCLUSIVE = 4


class SatdeError(Exception):
    pass


class ValidationError(SatdeError, ValueError):
    '''
    A precondition on an input failed. ``field`` names the offending input.
    '''
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericalError(SatdeError, ArithmeticError):
    '''
    NaN, overflow or loss of probability mass during a computation.
    '''
    pass


class InconclusiveError(SatdeError):
    '''
    No verdict could be reached where the caller needs one.
    '''
    pass
