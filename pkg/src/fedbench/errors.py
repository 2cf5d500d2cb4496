"""Exception hierarchy for the federated learning benchmark.

Every error subclasses the builtin that plain callers would expect
(mostly ``ValueError``), so ``except ValueError`` keeps working.
"""


class FedBenchError(Exception):
    """Base class for all benchmark errors."""


class ConfigError(FedBenchError, ValueError):
    """Invalid experiment or CLI configuration."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("Invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class DataError(FedBenchError, ValueError):
    """Missing or corrupt dataset files."""


class IdxFormatError(DataError):
    """Malformed IDX container."""


class ShapeMismatchError(FedBenchError, ValueError):
    """Models or gradients whose layer shapes do not agree."""


class CodecError(FedBenchError, ValueError):
    """Wire model could not be decoded."""


class BadMagicError(CodecError):
    """Payload does not start with the wire model magic."""


class UnsupportedVersionError(CodecError):
    """Payload carries a wire format version we cannot read."""


class TruncatedPayloadError(CodecError):
    """Payload is shorter (or longer) than its header announces."""


class DimensionOverflowError(CodecError):
    """Header announces layer dimensions that cannot be valid."""


class BusError(FedBenchError, RuntimeError):
    """Misuse of the simulated message bus."""


class DoubleCollectionError(BusError):
    """A node collected its inbox twice in the same round."""
