"""Exception types shared across the package."""


class StylespaceError(Exception):
    """Base class for all stylespace errors."""


class ShapeError(StylespaceError):
    """Tensor shapes are incompatible for the requested operation."""


class GraphError(StylespaceError):
    """Invalid use of the autodiff graph (non-scalar root, double backward, degenerate batch)."""


class SchemaError(StylespaceError):
    """Data does not validate against the task schema."""


class ParseError(StylespaceError):
    """A record or file could not be parsed."""


class SplitError(StylespaceError):
    """A subject-independent split cannot be constructed."""


class CaptionError(StylespaceError):
    """A style caption is empty, unparseable, or names conflicting classes."""


class CheckpointError(StylespaceError):
    """A checkpoint or bank file is missing, corrupt, or incompatible."""


class InferenceError(StylespaceError):
    """Inference was requested against uninitialized or unknown prototypes."""


class NumericError(StylespaceError):
    """A non-finite value appeared during training."""
