class PartAlignError(Exception):
    """Base class for every error raised by the PartAlign package."""


class ShapeMismatchError(PartAlignError, ValueError):
    """Raised when two operands (or an operand and an expectation) disagree in shape."""

    def __init__(self, operation: str, *shapes: tuple, message: str = ""):
        self.operation = operation
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(shape)) for shape in shapes)
        self.message = message or f"{operation}: incompatible shapes {rendered}"
        super().__init__(self.message)


class NonFiniteError(PartAlignError, ArithmeticError):
    """Raised when NaN or infinite values reach an operation that rejects them."""

    def __init__(self, where: str, message: str = ""):
        self.where = where
        self.message = message or f"Non-finite values encountered in {where}."
        super().__init__(self.message)


class GraphConsumedError(PartAlignError, RuntimeError):
    """Raised when backward is run twice over the same recorded graph."""

    def __init__(self, message: str = ""):
        self.message = message or "Compute graph was already consumed by a previous backward pass; run a new forward first."
        super().__init__(self.message)


class VariantStateError(PartAlignError, ValueError):
    """Raised when the alignment variant and the supplied state (bank, aligner) disagree."""


class ProposalError(PartAlignError, ValueError):
    """Raised when the part proposer cannot produce the requested number of boxes."""


class CheckpointError(PartAlignError):
    """Raised when a checkpoint is unreadable or incompatible with the current code."""

    def __init__(self, path, message: str = ""):
        self.path = path
        self.message = message or f"Checkpoint at '{path}' is invalid."
        super().__init__(self.message)


class ConfigurationError(PartAlignError, ValueError):
    """Raised for invalid run configuration values or unknown configuration keys."""


class EnvironmentVariableNotFoundError(PartAlignError):
    """Custom exception raised when a required environment variable is not found."""

    def __init__(self, variable_name: str, message: str = ""):
        self.variable_name = variable_name
        self.message = message or f"Environment variable '{variable_name}' not found."
        super().__init__(self.message)
