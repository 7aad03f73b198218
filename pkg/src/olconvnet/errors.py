"""Exception types shared across the pipeline."""


class OlConvNetError(Exception):
    """Base class for all package errors."""


class DimensionError(OlConvNetError, ValueError):
    def __init__(self, message, axes=None):
        super().__init__(message)
        self.axes = axes


class ArgumentError(OlConvNetError, ValueError):
    pass


class NoForeground(OlConvNetError):
    """Segmentation found no nucleus-like foreground."""


class NoTexture(OlConvNetError):
    """No valid GLCM pixel pair inside the mask."""


class TrainingError(OlConvNetError, RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class SplitError(OlConvNetError, ValueError):
    pass


class StateError(OlConvNetError, RuntimeError):
    pass


class IngestError(OlConvNetError, IOError):
    pass


class ParseError(OlConvNetError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class FormatError(OlConvNetError, ValueError):
    """Binary file with bad magic, version or size."""
