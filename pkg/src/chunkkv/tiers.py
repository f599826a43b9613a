"""Bitwidth tiers assigned to context chunks."""

from enum import Enum


class Tier(str, Enum):
    """Precision class of one cached chunk."""

    INT2 = "int2"
    INT4 = "int4"
    FP16 = "fp16"

    @property
    def bits(self) -> int:
        return {Tier.INT2: 2, Tier.INT4: 4, Tier.FP16: 16}[self]


QUANTIZED_TIERS = (Tier.INT2, Tier.INT4)
