"""Numerical error taxonomy shared by every app.

Input and file-format problems are reported with Django's ``ValidationError``;
the classes here cover failures that arise while doing the math. Each carries
the process exit code the management commands use for it.
"""


class NumericError(Exception):
    """Base class for numerical failures (CLI exit code 3)."""
    exit_code = 3


class DegenerateQuaternionError(NumericError):
    """Raised when an orientation quaternion has zero norm."""

    def __init__(self, index):
        self.index = index
        super().__init__(f"Primitive {index} has a zero-norm orientation quaternion.")


class NonFiniteParameterError(NumericError):
    """Raised when a raw parameter holds NaN or infinity at render time."""

    def __init__(self, field, index):
        self.field = field
        self.index = index
        super().__init__(f"Non-finite value in '{field}' of primitive {index}.")


class RenderMismatchError(NumericError):
    """Raised when a backward pass is fed a forward output from other inputs."""


class NonFiniteLossError(NumericError):
    """Raised when a loss value or its image gradient is NaN or infinite."""


class EmptySeedCloudError(NumericError):
    """Raised when initialization has no points to seed from."""


class ShapeMismatchError(ValueError):
    """Raised when two images or arrays that must agree in shape do not."""

    def __init__(self, left, right):
        super().__init__(f"Shape mismatch: {tuple(left)} vs {tuple(right)}.")
