"""Exception types raised across the toolkit."""


class DimensionError(ValueError):
    """Tensor shapes or channel counts do not line up."""


class QuantInputError(ValueError):
    """Input to a quantizer is empty or contains non-finite values."""


class FitError(ValueError):
    """Calibration statistics are too degenerate to fit a quantizer."""


class EncodingError(ValueError):
    """A region code does not fit its bit-field."""


class AllocationError(RuntimeError):
    """The greedy allocator cannot reach the requested average bit-width."""


class UnknownSiteError(KeyError):
    """A layer/site identifier does not exist in the model."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message
