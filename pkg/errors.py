"""
Exception hierarchy for the blockade simulator
==============================================

Library code raises these; only the command-line layer turns them into
exit codes (see ``exit_code_for``).
"""

from typing import Any, Dict, List, Optional, Tuple

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class BlockadeError(RuntimeError):
    """Base class for every error raised by the simulator."""

    exit_code = EXIT_NUMERICAL


class ConfigError(BlockadeError, ValueError):
    """A parameter file, YAML default or flag could not be used."""

    exit_code = EXIT_USAGE

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"invalid configuration key '{key}': {message}")


class TraceFormatError(BlockadeError, ValueError):
    """A CSV input is malformed."""

    exit_code = EXIT_USAGE

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}, line {line}: {message}")


class DispersiveModelError(BlockadeError, ValueError):
    """The dispersive formulas were asked for on atomic resonance."""


class SingularSystemError(BlockadeError):
    """The quasi-steady 2x2 system for (a, M) has no unique solution."""


class IntegrationError(BlockadeError):
    """An integrator failed; carries the last state that was still finite."""

    def __init__(self, message: str, last_time: Optional[float] = None, last_state: Any = None):
        self.last_time = last_time
        self.last_state = last_state
        if last_time is not None:
            message = f"{message} (last valid state at t = {last_time:.6g} us: {last_state})"
        super().__init__(message)


class StepBudgetExceeded(IntegrationError):
    """The full integrator would need more steps than its budget allows."""

    def __init__(self, estimated_steps: int, max_steps: int, last_time: Optional[float] = None,
                 last_state: Any = None):
        self.estimated_steps = estimated_steps
        self.max_steps = max_steps
        super().__init__(
            f"step budget exceeded ({estimated_steps} > {max_steps} steps); "
            "use the slow-manifold integrator (integrate_slow) for long windows",
            last_time=last_time,
            last_state=last_state,
        )


class NoMidpointError(BlockadeError):
    """A trace handed to midpoint alignment never reaches half the reference level."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"trace '{name}' has no 50% crossing")


class NoTransitionError(BlockadeError):
    """A reference trace needed for fitting shows no transition."""


class BracketingError(BlockadeError):
    """The Γ search interval does not bracket a minimum of the slope residual."""

    def __init__(self, message: str, profile: List[Tuple[float, float]]):
        self.profile = profile
        rows = ", ".join(f"{gamma:.4g}: {residual:.4g}" for gamma, residual in profile)
        super().__init__(f"{message}; residual profile {{{rows}}}")


class FitError(BlockadeError, ValueError):
    """A regression was given data it cannot fit."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception onto the command-line exit-code contract."""
    if isinstance(exc, BlockadeError):
        return exc.exit_code
    return EXIT_NUMERICAL


def describe(exc: BaseException) -> Dict[str, Any]:
    """Key-value summary of an exception for manifests and logs."""
    info: Dict[str, Any] = {"error_type": type(exc).__name__, "error": str(exc)}
    if isinstance(exc, IntegrationError) and exc.last_time is not None:
        info["last_time_us"] = exc.last_time
    if isinstance(exc, ConfigError):
        info["key"] = exc.key
    return info
