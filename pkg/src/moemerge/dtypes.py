"""Element types supported in checkpoint headers.

The set is deliberately closed: exactly the types below, each with a fixed
byte width. Unknown dtype strings are a parse error, never silently mapped.
FP8 variants are recognized but rejected (their auxiliary scale tensors are
out of scope for v1).
"""

from __future__ import annotations

import enum

from .errors import UnsupportedDTypeError

# FP8 strings used by public DeepSeek releases; recognized so the error
# message can say "unsupported" instead of "unknown".
_FP8_CODES = frozenset({"F8_E4M3", "F8_E5M2", "F8_E8M0", "F8_E4M3FN"})


class DType(enum.Enum):
    """A safetensors element type and its fixed per-element byte width."""

    F64 = ("F64", 8)
    F32 = ("F32", 4)
    F16 = ("F16", 2)
    BF16 = ("BF16", 2)
    I64 = ("I64", 8)
    I32 = ("I32", 4)
    I8 = ("I8", 1)
    U8 = ("U8", 1)
    BOOL = ("BOOL", 1)

    def __init__(self, code: str, byte_width: int):
        self.code = code
        self.byte_width = byte_width

    @classmethod
    def from_code(cls, code: str) -> "DType":
        """Resolve a header dtype string, raising on anything unknown."""
        try:
            return _BY_CODE[code]
        except KeyError:
            if code in _FP8_CODES:
                raise UnsupportedDTypeError(
                    f"unsupported dtype {code!r}: FP8 checkpoints are not supported"
                ) from None
            raise UnsupportedDTypeError(f"unknown dtype {code!r}") from None

    def __repr__(self) -> str:  # noqa: D105
        return f"DType.{self.name}"


_BY_CODE = {d.code: d for d in DType}

FLOAT_DTYPES = frozenset({DType.F64, DType.F32, DType.F16, DType.BF16})
