"""Exception types shared across the package.

Everything user-facing derives from BlockLMError so the CLI can map
expected failures to exit code 1 and keep code 2 for genuine bugs.
"""


class BlockLMError(Exception):
    """Base class for all expected package errors."""


class ShapeError(BlockLMError):
    """Kernel operands do not conform; message names operands and extents."""


class GradientError(BlockLMError):
    """Misuse of the backward pass (non-scalar loss, double backward, ...)."""


class TensorFileError(BlockLMError):
    """Named-tensor container could not be read or written."""


class TruncatedFileError(TensorFileError):
    """Payload ends before the manifest says it should."""


class UnknownDtypeError(TensorFileError):
    """Manifest carries a dtype tag this build does not know."""


class DuplicateNameError(TensorFileError):
    """Two tensors share a name in one container."""


class ConfigError(BlockLMError):
    """Invalid configuration; carries every violated constraint."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(BlockLMError):
    """Bad tokens, empty corpus, or a batch with no loss positions."""


class CacheError(BlockLMError):
    """KV cache overflow or use after exhaustion."""


class VariantError(BlockLMError):
    """Operation asked of a model variant that does not support it."""


class UptrainError(BlockLMError):
    """Vanilla checkpoint cannot initialize the requested block model."""


class TrainingError(BlockLMError):
    """Non-finite loss or other unrecoverable training-step failure."""


class GenerationError(BlockLMError):
    """Prompt does not fit, or generation state was misused."""


class BenchError(BlockLMError):
    """Benchmark scenario invalid or aborted (e.g. allocation failure)."""
