"""Toy decoder configuration, seeded weights, and the weight file format.

Weight file layout (little-endian, normative):
  magic "SPKC" | u32 version | u32 layers, q_heads, kv_heads, head_dim,
  vocab, hidden, ffn, seed | float32 arrays in fixed order:
  embedding; per layer: wq, wk, wv, wo, attn_norm, ffn_norm, w1, w2;
  final_norm; output head.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["DecoderConfig", "LayerWeights", "Weights", "init_decoder",
           "save_weights", "load_weights", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"SPKC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    q_heads: int = 4
    kv_heads: int = 2
    head_dim: int = 8
    vocab: int = 64
    hidden: int = 32
    ffn: int = 64
    rope_base: float = 10000.0
    seed: int = 0
    max_len: int = 1024

    def __post_init__(self) -> None:
        for name in ("layers", "q_heads", "kv_heads", "head_dim", "vocab",
                     "hidden", "ffn", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.q_heads % self.kv_heads != 0:
            raise ValueError("q_heads must be divisible by kv_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs)")

    @property
    def group(self) -> int:
        """Query heads sharing one kv head."""
        return self.q_heads // self.kv_heads


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class Weights:
    embedding: np.ndarray
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm: np.ndarray = None
    head: np.ndarray = None


def _normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init_decoder(config: DecoderConfig) -> Weights:
    """Seeded pseudo-random parameters; bitwise identical for equal seeds."""
    rng = np.random.default_rng(config.seed)
    h, d = config.hidden, config.head_dim
    qd = config.q_heads * d
    kd = config.kv_heads * d
    w = Weights(embedding=_normal(rng, (config.vocab, h), 1.0))
    for _ in range(config.layers):
        w.layers.append(LayerWeights(
            wq=_normal(rng, (h, qd), h ** -0.5),
            wk=_normal(rng, (h, kd), h ** -0.5),
            wv=_normal(rng, (h, kd), h ** -0.5),
            wo=_normal(rng, (qd, h), qd ** -0.5),
            attn_norm=np.ones(h, dtype=np.float32),
            ffn_norm=np.ones(h, dtype=np.float32),
            w1=_normal(rng, (h, config.ffn), h ** -0.5),
            w2=_normal(rng, (config.ffn, h), config.ffn ** -0.5),
        ))
    w.final_norm = np.ones(h, dtype=np.float32)
    w.head = _normal(rng, (h, config.vocab), h ** -0.5)
    return w


def _iter_arrays(config: DecoderConfig, weights: Weights):
    yield weights.embedding
    for lw in weights.layers:
        yield lw.wq
        yield lw.wk
        yield lw.wv
        yield lw.wo
        yield lw.attn_norm
        yield lw.ffn_norm
        yield lw.w1
        yield lw.w2
    yield weights.final_norm
    yield weights.head


def save_weights(path: str, config: DecoderConfig, weights: Weights) -> int:
    """Write the weight file; returns the byte count."""
    header = MAGIC + struct.pack(
        "<9I", FORMAT_VERSION, config.layers, config.q_heads, config.kv_heads,
        config.head_dim, config.vocab, config.hidden, config.ffn, config.seed,
    )
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                       for a in _iter_arrays(config, weights))
    blob = header + payload
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_weights(path: str) -> tuple[DecoderConfig, Weights]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError("not a weight file: bad magic")
    fields = struct.unpack_from("<9I", blob, 4)
    version = fields[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported weight format version {version}")
    layers, q_heads, kv_heads, head_dim, vocab, hidden, ffn, seed = fields[1:]
    config = DecoderConfig(layers=layers, q_heads=q_heads, kv_heads=kv_heads,
                           head_dim=head_dim, vocab=vocab, hidden=hidden,
                           ffn=ffn, seed=seed)
    offset = 4 + struct.calcsize("<9I")

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        offset += n * 4
        return arr.reshape(shape).astype(np.float32)

    h, d = hidden, head_dim
    qd, kd = q_heads * d, kv_heads * d
    weights = Weights(embedding=take((vocab, h)))
    for _ in range(layers):
        weights.layers.append(LayerWeights(
            wq=take((h, qd)), wk=take((h, kd)), wv=take((h, kd)), wo=take((qd, h)),
            attn_norm=take((h,)), ffn_norm=take((h,)),
            w1=take((h, ffn)), w2=take((ffn, h)),
        ))
    weights.final_norm = take((h,))
    weights.head = take((h, vocab))
    if offset != len(blob):
        raise ValueError("weight file has trailing or missing bytes")
    return config, weights


def with_runtime(config: DecoderConfig, **overrides) -> DecoderConfig:
    """Apply runtime-only settings (max_len, rope_base) on a loaded config."""
    return replace(config, **overrides)
