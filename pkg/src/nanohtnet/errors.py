"""Exception types shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`CorruptFileError`
(and its subclasses) to exit code 3.
"""


class NanoHTNetError(Exception):
    pass


class ContractError(NanoHTNetError, ValueError):
    """A documented precondition was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(NanoHTNetError, ValueError):
    pass


class CorruptFileError(NanoHTNetError):
    pass


class CorruptCheckpointError(CorruptFileError):
    pass


class CorruptDatasetError(CorruptFileError):
    pass


class GenerationError(NanoHTNetError):
    """Synthetic data could not be generated (e.g. a joint behind a camera)."""


class TrainingError(NanoHTNetError):
    """Optimization diverged (non-finite loss or parameters)."""
