"""Exception types shared across the engine"""


class PHPError(Exception):
    """Base class for all engine errors"""


class ValidationError(PHPError, ValueError):
    """Invalid spec, config, or call arguments"""


class TaskLookupError(PHPError, KeyError):
    """A per-task bank was asked for a task it never registered"""

    def __str__(self):
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class HookShapeError(PHPError, ValueError):
    """A hook returned tokens that do not fit the expected layout"""


class CheckpointError(PHPError, ValueError):
    """Checkpoint manifest or arrays are missing, corrupt, or mis-shaped"""


class NonFiniteLossError(PHPError, ArithmeticError):
    """Loss evaluated to NaN or inf"""
