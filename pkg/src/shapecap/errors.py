"""Exception types shared across the package."""

from __future__ import annotations


class InputError(ValueError):
    """Caller handed us something that violates a documented precondition."""


class GenerationError(RuntimeError):
    """Scene rejection sampling exhausted its attempt budget."""


class DatasetParseError(ValueError):
    """A dataset file line failed to parse; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class TrainingError(RuntimeError):
    """Training produced a non-finite or divergent loss; names the component."""


class SamplingError(RuntimeError):
    """The reverse diffusion produced a non-finite state; carries the step."""

    def __init__(self, step: int, message: str) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step
