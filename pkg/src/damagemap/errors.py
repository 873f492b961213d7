"""Exception taxonomy shared across the pipeline.

Each class maps to one CLI exit code so shell callers can distinguish
"fix your config" from "fix your data" from "the numbers blew up".
"""


class PipelineError(Exception):
    """Base class for all pipeline failures."""

    exit_code = 1


class ConfigError(PipelineError):
    """Invalid configuration: unknown keys, bad values, missing required paths."""

    exit_code = 2


class DataError(PipelineError):
    """Missing or malformed input data (files, catalogs, bundles, labels)."""

    exit_code = 3


class DegenerateChannelError(DataError):
    """Normalization statistics collapsed (p99 <= p1) on one or more channels."""

    def __init__(self, channels):
        self.channels = list(channels)
        super().__init__(
            "degenerate normalization channels (p99 <= p1): "
            + ", ".join(str(c) for c in self.channels)
        )


class PairingError(DataError):
    """No admissible S1 scene pair under the active orbit constraint."""


class NumericError(PipelineError):
    """Non-finite loss or gradients, or a singular system during fitting."""

    exit_code = 4
