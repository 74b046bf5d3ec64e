"""Exception types shared across the package."""


class GoalflowError(Exception):
    """Base class for all package errors."""


class ShapeError(GoalflowError):
    """Array dimensions do not match what an operation requires."""


class InvalidMaskError(GoalflowError):
    """An action mask with no valid entries was passed to a distribution op."""


class NonFiniteGradientError(GoalflowError):
    """An optimizer step was refused because the gradient contains NaN or inf."""


class CheckpointError(GoalflowError):
    """A checkpoint file is missing, malformed, or incompatible."""


class TerminalStateError(GoalflowError):
    """A forward-only operation was applied to a terminated state."""


class NonTerminalStateError(GoalflowError):
    """A terminal-only operation (e.g. reward) was applied to a non-terminal state."""


class NoParentError(GoalflowError):
    """A backward operation was applied to the initial state."""


class InvalidActionError(GoalflowError):
    """The requested action is masked out at the given state."""


class UnreachableGoalError(GoalflowError):
    """The goal does not correspond to any reachable terminal object."""


class EnumerationCapError(GoalflowError):
    """Exhaustive enumeration would exceed the configured state/goal cap."""


class EmptyBufferError(GoalflowError):
    """A sample was requested from a buffer holding no records."""


class InvalidTrajectoryError(GoalflowError):
    """A trajectory record failed replay validation."""


class TrainingDivergedError(GoalflowError):
    """The training loss became non-finite; the run was aborted."""


class ConfigError(GoalflowError):
    """A config file or option set is malformed or inconsistent."""
