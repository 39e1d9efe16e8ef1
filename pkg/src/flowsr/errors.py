"""Exception types shared across the package.

Each carries a short machine-readable ``code`` that the CLI prints on failure.
"""


class FlowSRError(Exception):
    code = "error"


class ShapeError(FlowSRError, ValueError):
    code = "shape"


class ConfigError(FlowSRError, ValueError):
    code = "config"


class DatasetError(FlowSRError):
    code = "dataset"


class CheckpointError(FlowSRError):
    code = "checkpoint"


class DivergenceError(FlowSRError, FloatingPointError):
    code = "divergence"


class FLDError(FlowSRError):
    code = "fld"


class BadMagicError(FLDError):
    code = "fld-bad-magic"


class TruncatedPayloadError(FLDError):
    code = "fld-truncated-payload"


class UnknownDtypeError(FLDError):
    code = "fld-unknown-dtype"


class RangeError(FlowSRError, ValueError):
    code = "range"
