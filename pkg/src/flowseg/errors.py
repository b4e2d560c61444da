"""Exception hierarchy shared by every stage.

Each class carries the process exit code the command line maps it to.
"""


class FlowSegError(Exception):
    exit_code = 1


class ConfigError(FlowSegError, ValueError):
    exit_code = 2


class IngestionError(FlowSegError, OSError):
    exit_code = 3


class ShapeError(FlowSegError, ValueError):
    exit_code = 2


class DomainError(FlowSegError, ValueError):
    exit_code = 2


class NumericError(FlowSegError, ArithmeticError):
    exit_code = 4


class TrainingDivergedError(NumericError):
    def __init__(self, epoch, message="non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch
