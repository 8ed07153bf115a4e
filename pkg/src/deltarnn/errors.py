"""Exception taxonomy shared by every module.

The CLI maps these onto distinct process exit codes, so keep the split:
configuration problems, bad data, shape disagreements, and numerical
blow-ups are different failures with different remedies.
"""


class DeltaRnnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DeltaRnnError):
    """Invalid configuration: bad option value, missing path, unknown name."""


class DataError(DeltaRnnError):
    """Corpus or vocabulary problem: empty input, id out of range, bad file."""


class ShapeError(DeltaRnnError):
    """Tensor dimensions do not agree with the declared contract."""


class NumericError(DeltaRnnError):
    """A non-finite value appeared where the contract requires finite math."""
