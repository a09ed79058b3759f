"""Exception types shared across the toolkit.

Data errors (bad files, bad manifests, bad checkpoints) derive from
:class:`DataError`; the CLI maps them to exit code 2.  Everything else
derived from :class:`SpkidError` maps to exit code 3.
"""


class SpkidError(Exception):
    pass


class DataError(SpkidError):
    pass


# audio_io
class NotWav(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class Truncated(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicatePath(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class EmptySplit(DataError):
    pass


# synthgen
class IndexOutOfRange(SpkidError, IndexError):
    pass


# numcore / encoder / objectives
class ShapeMismatch(SpkidError, ValueError):
    pass


class InputTooShort(SpkidError, ValueError):
    pass


class ClipTooShort(InputTooShort):
    pass


class BadTarget(SpkidError, ValueError):
    pass


class BadLabel(BadTarget):
    pass


class NonPositiveWeight(SpkidError, ValueError):
    pass


class AllFramesInvalid(SpkidError, ValueError):
    pass


class NotScalar(SpkidError, ValueError):
    pass


class GraphCycle(SpkidError, RuntimeError):
    pass


class EmptyLabels(SpkidError, ValueError):
    pass


class TooFewMasked(SpkidError, ValueError):
    pass


class EmptyMask(TooFewMasked):
    pass


class TooFewPoints(SpkidError, ValueError):
    pass


# classify / metrics
class MissingClass(DataError):
    pass


class LengthMismatch(SpkidError, ValueError):
    pass


class BadId(SpkidError, ValueError):
    pass


class EmptyMatrix(SpkidError, ValueError):
    pass


# trainer
class CorruptCheckpoint(DataError):
    pass


class VersionMismatch(CorruptCheckpoint):
    pass


class ConfigError(DataError):
    pass


class DivergedLoss(SpkidError, RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
