"""Error types shared across modules."""


class ConfigError(ValueError):
    """A config document, task definition, or CLI flag set is invalid."""


class DataFormatError(ValueError):
    """An input file (TSV, checkpoint, config JSON) is malformed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, lr: float):
        super().__init__(f"non-finite loss at step {step} (lr={lr:g})")
        self.step = step
        self.lr = lr
