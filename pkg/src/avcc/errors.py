"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes: usage problems exit 2 (argparse
handles those), data/format/corruption problems exit 3, capability problems
exit 4 and numeric failures exit 5.
"""


class AvccError(Exception):
    """Base class for all errors raised by this package."""


class InputError(AvccError, ValueError):
    """Caller passed a value that violates a documented precondition."""


class ShapeError(InputError):
    """Array arguments have incompatible or unsupported shapes."""


class DataError(AvccError):
    """External data (files, payloads) is structurally unusable."""


class FormatError(DataError):
    """A serialized artifact has a bad magic, version or layout."""


class CorruptionError(DataError):
    """A serialized artifact fails an integrity check (CRC, truncation)."""


class StateError(AvccError):
    """Operation invoked on an object in the wrong lifecycle state."""


class ConfigError(AvccError):
    """A configuration file or parameter set is inconsistent."""


class CapabilityError(AvccError):
    """The requested operation needs something this build/model lacks."""


class NumericError(AvccError):
    """A computation produced or received non-finite values."""
