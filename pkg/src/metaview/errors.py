"""Exception hierarchy shared by all metaview modules."""


class MetaViewError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(MetaViewError, ValueError):
    pass


class ContractError(MetaViewError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(MetaViewError, ValueError):
    pass


class FormatError(MetaViewError, ValueError):
    """A file could not be parsed (truncated, corrupt, wrong layout)."""


class VersionError(FormatError):
    """File magic or format version does not match what this build writes."""


class SamplingError(MetaViewError, ValueError):
    """Not enough labels or instances to build the requested task."""


class NumericError(MetaViewError, ArithmeticError):
    pass


class SizeError(MetaViewError, ValueError):
    """An enumeration would exceed its combinatorial budget."""
