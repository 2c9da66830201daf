"""Exception types raised across the package."""


class DspnError(Exception):
    """Base class for all package errors."""


class InvalidGrid(DspnError):
    """Grid is empty, malformed, or contains non-finite values."""


class InvalidPosition(DspnError):
    """Sampling position has non-finite coordinates."""


class ShapeMismatch(DspnError):
    """Operands do not agree in width/height/channels/kernel layout."""


class InvalidAffinity(DspnError):
    """Raw affinity stencil contains non-finite entries or has a bad layout."""


class InvalidMask(DspnError):
    """Validity mask contains values other than 0 and 1."""


class InvalidFeature(DspnError):
    """Feature grid contains non-finite values."""


class InvalidConfig(DspnError):
    """A configuration value violates its documented range."""


class InvalidConfidence(DspnError):
    """Confidence values fall outside [0, 1]."""


class EmptyGroundTruth(DspnError):
    """No valid ground-truth pixels to evaluate against."""


class NonFiniteLoss(DspnError):
    """Loss function returned NaN or Inf during a gradient probe."""


class InvalidState(DspnError):
    """Backward pass called without (or with a stale) forward state."""


class Diverged(DspnError):
    """Gradient descent produced a non-finite loss."""


class InvalidSpec(DspnError):
    """Scene or sparsity specification violates its invariants."""


class EmptySparse(DspnError):
    """Sparse input has no valid measurements."""


class CorruptFile(DspnError):
    """File header and payload disagree, or the file is truncated."""


class UnsupportedFormat(DspnError):
    """File is syntactically valid but uses an unsupported variant."""
