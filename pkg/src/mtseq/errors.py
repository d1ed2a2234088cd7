"""Exception types shared across the package."""


class MtseqError(Exception):
    """Base class for all package errors."""


class NonTextToken(MtseqError):
    """A token outside the text byte range was passed to a text decoder."""


class NonLocationToken(MtseqError):
    """A token outside the location range was passed to a coordinate decoder."""


class OutOfRange(MtseqError):
    """A coordinate outside [0, 1] was passed to the quantizer."""


class UnknownTask(MtseqError):
    """Task name or id not in the supported set."""


class MissingInstanceText(MtseqError):
    """The task consumes instance text but none was provided."""


class UnexpectedInstanceText(MtseqError):
    """Instance text was provided for a task that does not consume it."""


class SequenceTooLong(MtseqError):
    """An assembled sequence exceeds the configured maximum length."""


class InvalidHyper(MtseqError):
    """Model hyperparameters are inconsistent."""


class ShapeMismatch(MtseqError):
    """Tensor shapes do not conform to the operation's contract."""


class EmptyTarget(MtseqError):
    """Loss requested over a target with no non-PAD positions."""


class StaleTape(MtseqError):
    """backward() called with a tape that did not record the given loss."""


class EmptyDataset(MtseqError):
    """A task dataset required for sampling is empty."""


class NonFiniteLoss(MtseqError):
    """Training produced a non-finite loss; the run is aborted."""


class EmptyLabelSet(MtseqError):
    """A trie was requested over an empty label set."""


class InvalidPrefix(MtseqError):
    """A prefix is not a valid path in the constraint trie."""


class DegenerateBox(MtseqError):
    """Box coordinates violate x0 < x1, y0 < y1."""


class EmptyCorpus(MtseqError):
    """IDF statistics requested over an empty corpus."""


class ZeroVector(MtseqError):
    """Cosine similarity requested against a zero embedding."""


class ConfigError(MtseqError):
    """Config file failed schema validation; message names the field."""


class ManifestMismatch(MtseqError):
    """Checkpoint manifest is incompatible with the current vocabulary layout."""
