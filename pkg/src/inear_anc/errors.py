"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI uses when it reaches the
top level, so commands only need to catch ``AncError``.
"""

from __future__ import annotations


class AncError(Exception):
    """Base class for all inear-anc errors."""

    exit_code = 1


class ConfigError(AncError, ValueError):
    """Invalid configuration value; the message names the field."""

    exit_code = 2


class SpectralError(AncError, ValueError):
    """Invalid input to a spectral estimation routine."""

    exit_code = 2


class IngestionError(AncError):
    """A path archive could not be read or failed validation."""

    exit_code = 3

    def __init__(
        self,
        message: str,
        *,
        repetition: int | None = None,
        role: str | None = None,
        doa: float | None = None,
    ):
        self.repetition = repetition
        self.role = role
        self.doa = doa
        context = []
        if repetition is not None:
            context.append(f"repetition {repetition}")
        if role is not None:
            context.append(f"role {role}")
        if doa is not None:
            context.append(f"DoA {doa:g} deg")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class InfeasibleDesignError(AncError):
    """No feasible improvement over the zero filter, or a violated constraint."""

    exit_code = 4


class ClosedLoopSingularityError(AncError):
    """|1 + W B_x| fell below the numeric floor."""

    exit_code = 5

    def __init__(self, message: str, *, bin_index: int | None = None,
                 frequency: float | None = None):
        self.bin_index = bin_index
        self.frequency = frequency
        if bin_index is not None:
            message = f"{message} at bin {bin_index}"
            if frequency is not None:
                message = f"{message} ({frequency:.1f} Hz)"
        super().__init__(message)


class CausalityWarning(UserWarning):
    """The ear-drum path arrives earlier than the control path can act."""
