"""Shared exception types.

Every error raised across module boundaries derives from LatentVoxError so the
CLI can map failures to a single-line machine-parsable message with a stable
kind tag (the class's KIND attribute).
"""


class LatentVoxError(Exception):
    KIND = "error"


class ConfigError(LatentVoxError):
    KIND = "config"


class ShapeMismatchError(LatentVoxError):
    """Layer input does not match the declared spec."""

    KIND = "shape"

    def __init__(self, layer_index, expected, got):
        self.layer_index = layer_index
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(
            f"layer {layer_index}: expected input shape {self.expected}, got {self.got}"
        )


class FormatError(LatentVoxError):
    """Malformed serialized artifact (model file, bitstream, PLY, manifest)."""

    KIND = "format"


class CrcMismatchError(FormatError):
    KIND = "crc"

    def __init__(self, what, stored, computed):
        super().__init__(
            f"crc mismatch in {what}: stored 0x{stored:08x}, computed 0x{computed:08x}"
        )


class TruncatedStreamError(FormatError):
    KIND = "truncated"


class UnsupportedVersionError(FormatError):
    KIND = "version"


class NonFiniteGradientError(LatentVoxError):
    KIND = "nonfinite-grad"

    def __init__(self, where):
        super().__init__(f"non-finite gradient in {where}; aborting optimizer step")
