"""Exception types shared across the package.

Each class carries the process exit status the CLI reports for it.
"""


class LabError(Exception):
    category = "error"
    exit_status = 1


class ConfigParseError(LabError):
    category = "parse_error"
    exit_status = 2


class ContractViolation(LabError, ValueError):
    category = "validation_error"
    exit_status = 3


class IntegrationFailure(LabError, ArithmeticError):
    category = "integration_failure"
    exit_status = 4

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class UnsupportedCapability(LabError, NotImplementedError):
    category = "unsupported_capability"
    exit_status = 5
