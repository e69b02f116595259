"""Exception types shared across the package.

Every failure mode raised on purpose uses one of these classes so that
callers (and the command line front end) can map problems to exit codes
without string matching.
"""


class SpikeVAEError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpikeVAEError):
    """Array dimensions do not line up; the message names both shapes."""


class ValidationError(SpikeVAEError):
    """An argument value is outside its documented domain."""


class ContractError(SpikeVAEError):
    """An API was used out of order or with mismatched halves.

    Examples: calling backward on a non-scalar, or replaying a sampler
    backward with noise drawn under a different seed than the forward.
    """


class ConfigError(SpikeVAEError):
    """A run configuration is malformed or internally inconsistent."""


class DataError(SpikeVAEError):
    """A dataset file is missing, truncated, or fails its header check."""


class CheckpointError(SpikeVAEError):
    """A checkpoint file cannot be read back: bad magic, bad version,
    or truncated payload."""


class NumericError(SpikeVAEError):
    """A non-finite value appeared where the math promises finiteness."""
