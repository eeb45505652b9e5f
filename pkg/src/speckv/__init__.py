"""speckv: two-tier KV cache decoding with speculative top-k prefetch."""

from .engine import (FullCacheDecoder, GenerateResult, SpeculativeDecoder,
                     StepMetrics, generate, select_topk)
from .kvcache import CacheBudget, TwoTierCache, memory_ratio
from .model import DecoderConfig, Weights, init_decoder, load_weights, save_weights
from .quant import (PackedGroup, QuantParams, dequantize_group, pack_codes,
                    quant_params, quantize_group, unpack_codes)
from .transfer import (ChannelModel, PrefetchTicket, ProtocolError,
                       SimulatedChannel, ThreadedChannel, step_latency,
                       transfer_time)

__version__ = "0.1.0"

__all__ = [
    "CacheBudget", "ChannelModel", "DecoderConfig", "FullCacheDecoder",
    "GenerateResult", "PackedGroup", "PrefetchTicket", "ProtocolError",
    "QuantParams", "SimulatedChannel", "SpeculativeDecoder", "StepMetrics",
    "ThreadedChannel", "TwoTierCache", "Weights", "dequantize_group",
    "generate", "init_decoder", "load_weights", "memory_ratio", "pack_codes",
    "quant_params", "quantize_group", "save_weights", "select_topk",
    "step_latency", "transfer_time", "unpack_codes",
]
