"""Host-side reference engine for low-bit KV-cache decode attention."""

from .attention import (PartialOutput, attend_tile, combine, decode_step, packed_attend,
                        partitioned_rowmax, residual_attend)
from .core import (AttentionConfig, BitKVError, CapacityError, ConfigError, EmptyInput,
                   FormatError, ShapeError, StateError, gqa_inverse, gqa_transform,
                   validate_config)
from .engine import DecodeEngine
from .kvcache import CacheLayout, KVCache, append_token, flush_residual, prefill
from .layout import interleave_order, iteration_count, residual_block_size, swizzle_col
from .quant import QuantSpec

__version__ = "0.1.0"
