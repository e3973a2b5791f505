"""Exception hierarchy shared by every module.

Each exception class carries the process exit code the CLI uses for it, so
``main`` can translate failures without a lookup table.
"""

from __future__ import annotations


class SliceError(Exception):
    exit_code = 1


class ConfigError(SliceError):
    exit_code = 2


class InputError(SliceError):
    exit_code = 3


class DimensionError(InputError):
    pass


class FormatError(InputError):
    """Malformed or truncated on-disk artifact (checkpoint, dataset, pad file)."""


class ContractError(SliceError):
    """A caller violated a documented precondition."""


class IntegrityError(SliceError):
    """The untrusted worker returned a result that failed verification."""

    exit_code = 4


class TransportError(SliceError):
    exit_code = 5


class ProtocolError(TransportError):
    pass


class HandshakeError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SecurityError(SliceError):
    """One-time-pad misuse: reuse, exhaustion, or a pad built for other weights."""

    exit_code = 6


class PadExhaustedError(SecurityError):
    pass


class StalePadError(SecurityError):
    pass
