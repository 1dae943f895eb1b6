"""Exception types shared across the package."""


class DomainError(ArithmeticError):
    """An expression was evaluated outside its mathematical domain."""


class PrefixSyntaxError(ValueError):
    """A token sequence is not a valid prefix encoding of an expression."""


class RangeError(ValueError):
    """A number cannot be represented by the sign/mantissa/exponent tokens."""


class LengthError(ValueError):
    """An encoded equation does not fit the padded length."""


class GenerationTimeout(RuntimeError):
    """The synthetic data generator gave up after too many rejections."""


class ShapeError(ValueError):
    """Model inputs do not match the model configuration."""


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, batch_index=None):
        self.step = step
        self.batch_index = batch_index
        msg = f"non-finite loss at step {step}"
        if batch_index is not None:
            msg += f" (batch entry {batch_index})"
        super().__init__(msg)


class DegenerateError(RuntimeError):
    """Every candidate of a CMA-ES generation was invalid."""


class AllRestartsFailed(RuntimeError):
    """BFGS could not start from any restart point."""


class DiskError(OSError):
    """An artifact could not be written or read back."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or from an incompatible version."""
