"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: input/configuration problems exit 1,
numeric failures exit 2.
"""


class WMRError(Exception):
    pass


class ConfigurationError(WMRError, ValueError):
    """Shapes or hyper-parameters that cannot work together."""


class InputError(WMRError, ValueError):
    """Bad data handed in by a caller (labels, frames, files)."""


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class NumericError(WMRError, ArithmeticError):
    """NaN/Inf showed up where finite values are required."""


class InvariantViolation(WMRError, AssertionError):
    """Internal contract broken, e.g. an annotation with no secondary region."""


class NoPrimaryError(InputError):
    """No person detection to use as the primary region."""
