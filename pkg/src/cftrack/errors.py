"""Exception hierarchy shared across the package.

Every error the CLI can surface maps to a stable machine-parseable code.
"""

from __future__ import annotations


class CFTrackError(Exception):
    """Base class; ``code`` is the machine-parseable identifier."""

    code = "error"


class ShapeError(CFTrackError, ValueError):
    code = "shape"


class ConfigError(CFTrackError, ValueError):
    code = "config"


class NonFiniteGradientError(CFTrackError, RuntimeError):
    code = "nonfinite-gradient"


class NonFiniteLossError(CFTrackError, RuntimeError):
    code = "nonfinite-loss"


class DegenerateEmbeddingError(CFTrackError, ValueError):
    code = "degenerate-embedding"


class SamplingError(CFTrackError, ValueError):
    code = "sampling"


class AnnotationParseError(CFTrackError, ValueError):
    code = "annotation-parse"


class DegenerateBoxError(CFTrackError, ValueError):
    code = "degenerate-box"


class EvalProtocolError(CFTrackError, ValueError):
    code = "eval-protocol"


class CheckpointError(CFTrackError, RuntimeError):
    code = "checkpoint"


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unsupported version."""

    code = "checkpoint-format"


class CheckpointTruncatedError(CheckpointError):
    code = "checkpoint-truncated"


class CheckpointManifestError(CheckpointError):
    """Manifest disagrees with the payload or the target architecture."""

    code = "checkpoint-manifest"


class CheckpointChecksumError(CheckpointError):
    code = "checkpoint-checksum"
