"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration and usage
problems exit 2, dataset/file-format problems exit 3, and a non-finite
training loss exits 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, argument, or precondition."""


class ShapeError(ConfigError):
    """Array shapes do not line up for the requested operation."""


class BindingError(ConfigError):
    """A low-rank adapter does not match the weight it is bound to."""


class VocabError(ConfigError):
    """Unknown token id or word."""


class DataError(ValueError):
    """Dataset or file content is malformed."""


class FormatError(DataError):
    """Tensor container is corrupt, truncated, or of the wrong type."""


class GraphError(RuntimeError):
    """Autodiff graph misuse (non-scalar loss, repeated backward, ...)."""


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss and stopped.

    Carries a diagnostic ``dump`` describing the step that failed.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dict(dump) if dump else {}
