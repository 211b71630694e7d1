"""
Exception hierarchy for the event transformer
Every error carries the CLI exit code it maps to
"""


class EventTransformerError(Exception):
    """Base class for all library errors"""

    exit_code = 1


class DimensionError(EventTransformerError, ValueError):
    """Tensor shapes do not line up"""


class NonFiniteError(EventTransformerError, ArithmeticError):
    """NaN or Inf appeared where finite values are required"""


class LabelError(EventTransformerError, ValueError):
    """Class label outside [0, num_classes)"""


class EventFormatError(EventTransformerError, ValueError):
    """Malformed event file"""

    exit_code = 2


class EmptyStreamError(EventTransformerError, ValueError):
    """Operation needs at least one event"""

    exit_code = 2


class SplitError(EventTransformerError, ValueError):
    """Manifest cannot be split as requested"""

    exit_code = 2


class GeometryError(EventTransformerError, ValueError):
    """Invalid sampling or grid request"""


class ConfigError(EventTransformerError, ValueError):
    """Invalid or unknown configuration"""

    exit_code = 2


class DatasetError(EventTransformerError, OSError):
    """Dataset path missing or unreadable"""

    exit_code = 2


class CheckpointError(EventTransformerError, ValueError):
    """Checkpoint has wrong magic, version or contents"""

    exit_code = 4


class TrainingDiverged(EventTransformerError, ArithmeticError):
    """Loss became non-finite during training"""

    exit_code = 3

    def __init__(self, message: str, checkpoint_path: str = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class VerificationFailed(EventTransformerError, AssertionError):
    """One or more gradient or oracle checks failed"""

    exit_code = 1

    def __init__(self, failed):
        self.failed = list(failed)
        super().__init__("failed checks: " + ", ".join(self.failed))
