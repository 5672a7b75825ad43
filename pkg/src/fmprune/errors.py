"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ModelFormatError(ToolkitError):
    """Raised when a model directory or manifest cannot be loaded."""


class DataFormatError(ToolkitError):
    """Raised when dataset bytes or probe files are malformed."""


class PruneError(ToolkitError):
    """Raised when a channel deletion cannot be rewired safely."""


class ScheduleError(ToolkitError):
    """Raised when a pruning schedule is inconsistent with the model."""
