"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class SchemaError(ValueError):
    """Parsed data violates the dataset schema (e.g. inconsistent widths)."""


class VocabularyError(KeyError):
    """A clause refers to a predicate unknown to the vocabulary."""


class NumericError(RuntimeError):
    """A solver hit a numerically hopeless state (indefinite Gram, divergence)."""


class NotTrainedError(RuntimeError):
    """A model was used before training / loading parameters."""
