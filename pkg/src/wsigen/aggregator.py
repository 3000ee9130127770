"""Fixed-size slide representations from variable-length patch features.

A stack of pre-layer-norm cross-attention blocks lets m learnable query
tokens attend over the n patch embeddings, then a row-wise affine projector
maps the contextualized tokens into the space the generator consumes.
Patches are treated as an unordered bag: there is no positional encoding,
so permuting input rows leaves the output unchanged (up to float
reassociation).

Inference only. Weights are stored as float32 in a self-describing binary
file (magic ``WSIW``); the forward pass runs in float64. Tensor order in
the file: query tokens; then per layer ln_q scale/bias, ln_kv scale/bias,
w_q, w_k, w_v, w_o, ln_ff scale/bias, w_1, w_2; then projector p_w, p_b.
All matrices row-major little-endian float32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .corpus import PatchFeatures
from .errors import (
    BadWeightFile,
    DimensionMismatch,
    MissingFile,
    NonFiniteIntermediate,
    ShapeMismatch,
    ZeroVector,
)

WEIGHT_MAGIC = b"WSIW"
WEIGHT_VERSION = 1
_WEIGHT_HEADER = struct.Struct("<4sIIIIII")  # magic, version, L, h, d, d_ff, m

LN_EPS = 1e-5
INIT_SCALE = 0.05

DEFAULT_LAYERS = 2
DEFAULT_HEADS = 8
DEFAULT_QUERY_TOKENS = 32

POOL_SOURCES = ("projected", "contextual")


@dataclass(eq=False)
class LayerWeights:
    ln_q_scale: np.ndarray
    ln_q_bias: np.ndarray
    ln_kv_scale: np.ndarray
    ln_kv_bias: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln_ff_scale: np.ndarray
    ln_ff_bias: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [
            self.ln_q_scale, self.ln_q_bias,
            self.ln_kv_scale, self.ln_kv_bias,
            self.w_q, self.w_k, self.w_v, self.w_o,
            self.ln_ff_scale, self.ln_ff_bias,
            self.w_1, self.w_2,
        ]


@dataclass(eq=False)
class AggregatorWeights:
    m: int
    d: int
    layer_count: int
    heads: int
    d_ff: int
    q: np.ndarray
    layers: list[LayerWeights]
    p_w: np.ndarray
    p_b: np.ndarray

    def __post_init__(self):
        if self.m < 1:
            raise ShapeMismatch(f"need at least one query token, got m={self.m}")
        if self.d % self.heads != 0:
            raise ShapeMismatch(f"d={self.d} not divisible by heads={self.heads}")
        if len(self.layers) != self.layer_count:
            raise ShapeMismatch(
                f"declared {self.layer_count} layers, found {len(self.layers)}"
            )
        expected = self._expected_shapes()
        for name, arr in self._named_tensors():
            if tuple(arr.shape) != expected[name]:
                raise ShapeMismatch(
                    f"tensor {name}: expected shape {expected[name]}, got {tuple(arr.shape)}"
                )
            if not np.all(np.isfinite(arr)):
                raise BadWeightFile(f"tensor {name} contains non-finite values")

    def _expected_shapes(self) -> dict[str, tuple[int, ...]]:
        d, d_ff = self.d, self.d_ff
        shapes: dict[str, tuple[int, ...]] = {"q": (self.m, d), "p_w": (d, d), "p_b": (d,)}
        for i in range(self.layer_count):
            shapes.update({
                f"layers[{i}].ln_q_scale": (d,), f"layers[{i}].ln_q_bias": (d,),
                f"layers[{i}].ln_kv_scale": (d,), f"layers[{i}].ln_kv_bias": (d,),
                f"layers[{i}].w_q": (d, d), f"layers[{i}].w_k": (d, d),
                f"layers[{i}].w_v": (d, d), f"layers[{i}].w_o": (d, d),
                f"layers[{i}].ln_ff_scale": (d,), f"layers[{i}].ln_ff_bias": (d,),
                f"layers[{i}].w_1": (d, d_ff), f"layers[{i}].w_2": (d_ff, d),
            })
        return shapes

    def _named_tensors(self) -> list[tuple[str, np.ndarray]]:
        named: list[tuple[str, np.ndarray]] = [("q", self.q)]
        fields = (
            "ln_q_scale", "ln_q_bias", "ln_kv_scale", "ln_kv_bias",
            "w_q", "w_k", "w_v", "w_o", "ln_ff_scale", "ln_ff_bias", "w_1", "w_2",
        )
        for i, layer in enumerate(self.layers):
            for name in fields:
                named.append((f"layers[{i}].{name}", getattr(layer, name)))
        named.extend([("p_w", self.p_w), ("p_b", self.p_b)])
        return named

    def tensors(self) -> list[np.ndarray]:
        out = [self.q]
        for layer in self.layers:
            out.extend(layer.tensors())
        out.extend([self.p_w, self.p_b])
        return out


@dataclass(eq=False)
class TokenSet:
    """Fixed m x d token matrix plus its pooled unit-norm retrieval vector."""

    m: int
    d: int
    tokens: np.ndarray
    pooled: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenSet)
            and self.m == other.m
            and self.d == other.d
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.pooled, other.pooled)
        )


def _layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * scale + bias


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def mean_normalize(rows: np.ndarray) -> np.ndarray:
    """Mean over rows, then L2-normalize. Raises ZeroVector on a zero mean."""
    pooled = np.asarray(rows, dtype=np.float64).mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        raise ZeroVector("token rows pool to the zero vector")
    return pooled / norm


def pool(tokens: TokenSet) -> np.ndarray:
    """Unit-norm pooled vector of a token set (mean of rows, L2-normalized)."""
    return mean_normalize(tokens.tokens)


def _forward(features: PatchFeatures, weights: AggregatorWeights):
    """Run the block stack; returns (contextual, projected, per-layer attention).

    Attention entries have shape (heads, m, n); every row is a softmax
    distribution over the n patches.
    """
    if features.d != weights.d:
        raise DimensionMismatch(
            f"features have d={features.d}, weights expect d={weights.d}"
        )
    m, d, h = weights.m, weights.d, weights.heads
    d_h = d // h
    scale = 1.0 / np.sqrt(d_h)

    f_patch = np.asarray(features.data, dtype=np.float64)
    x = np.asarray(weights.q, dtype=np.float64).copy()
    attentions: list[np.ndarray] = []

    for idx, layer in enumerate(weights.layers):
        q_in = _layer_norm(x, layer.ln_q_scale.astype(np.float64), layer.ln_q_bias.astype(np.float64))
        kv_in = _layer_norm(f_patch, layer.ln_kv_scale.astype(np.float64), layer.ln_kv_bias.astype(np.float64))

        q = q_in @ layer.w_q.astype(np.float64)
        k = kv_in @ layer.w_k.astype(np.float64)
        v = kv_in @ layer.w_v.astype(np.float64)

        # (h, m|n, d_h): split the model dimension across heads
        q_h = q.reshape(m, h, d_h).transpose(1, 0, 2)
        k_h = k.reshape(features.n, h, d_h).transpose(1, 0, 2)
        v_h = v.reshape(features.n, h, d_h).transpose(1, 0, 2)

        attn = _softmax(np.einsum("hmd,hnd->hmn", q_h, k_h) * scale)
        attentions.append(attn)

        ctx = np.einsum("hmn,hnd->hmd", attn, v_h)
        attn_out = ctx.transpose(1, 0, 2).reshape(m, d) @ layer.w_o.astype(np.float64)
        x = x + attn_out

        ff_in = _layer_norm(x, layer.ln_ff_scale.astype(np.float64), layer.ln_ff_bias.astype(np.float64))
        x = x + _gelu(ff_in @ layer.w_1.astype(np.float64)) @ layer.w_2.astype(np.float64)

        if not np.all(np.isfinite(x)):
            raise NonFiniteIntermediate(f"non-finite values after layer {idx}")

    projected = x @ weights.p_w.astype(np.float64) + weights.p_b.astype(np.float64)
    if not np.all(np.isfinite(projected)):
        raise NonFiniteIntermediate("non-finite values after projector")
    return x, projected, attentions


def aggregate(
    features: PatchFeatures,
    weights: AggregatorWeights,
    pool_source: str = "projected",
) -> TokenSet:
    """Aggregate patch features into m projected tokens plus a pooled vector.

    ``pool_source`` selects whether the retrieval vector pools the projected
    tokens (default; they are what the generator consumes) or the
    pre-projector contextual tokens.
    """
    if pool_source not in POOL_SOURCES:
        raise ValueError(f"pool_source must be one of {POOL_SOURCES}, got {pool_source!r}")
    contextual, projected, _ = _forward(features, weights)
    source = projected if pool_source == "projected" else contextual
    return TokenSet(
        m=weights.m, d=weights.d, tokens=projected, pooled=mean_normalize(source)
    )


def aggregate_with_attention(
    features: PatchFeatures,
    weights: AggregatorWeights,
    pool_source: str = "projected",
) -> tuple[TokenSet, list[np.ndarray]]:
    """Like aggregate(), but also returns the per-layer attention maps."""
    if pool_source not in POOL_SOURCES:
        raise ValueError(f"pool_source must be one of {POOL_SOURCES}, got {pool_source!r}")
    contextual, projected, attentions = _forward(features, weights)
    source = projected if pool_source == "projected" else contextual
    token_set = TokenSet(
        m=weights.m, d=weights.d, tokens=projected, pooled=mean_normalize(source)
    )
    return token_set, attentions


def seeded_weights(
    seed: int,
    m: int = DEFAULT_QUERY_TOKENS,
    d: int = 64,
    layer_count: int = DEFAULT_LAYERS,
    heads: int = DEFAULT_HEADS,
    d_ff: int | None = None,
) -> AggregatorWeights:
    """Deterministic random weights: uniform [-0.05, 0.05], identity layer norms."""
    if d_ff is None:
        d_ff = 4 * d
    rng = np.random.default_rng(seed)

    def uni(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(np.float32)

    layers = []
    for _ in range(layer_count):
        layers.append(LayerWeights(
            ln_q_scale=np.ones(d, dtype=np.float32),
            ln_q_bias=np.zeros(d, dtype=np.float32),
            ln_kv_scale=np.ones(d, dtype=np.float32),
            ln_kv_bias=np.zeros(d, dtype=np.float32),
            w_q=uni(d, d), w_k=uni(d, d), w_v=uni(d, d), w_o=uni(d, d),
            ln_ff_scale=np.ones(d, dtype=np.float32),
            ln_ff_bias=np.zeros(d, dtype=np.float32),
            w_1=uni(d, d_ff), w_2=uni(d_ff, d),
        ))
    return AggregatorWeights(
        m=m, d=d, layer_count=layer_count, heads=heads, d_ff=d_ff,
        q=uni(m, d), layers=layers, p_w=uni(d, d), p_b=uni(d),
    )


def save_weights(path, weights: AggregatorWeights) -> None:
    with open(path, "wb") as fh:
        fh.write(_WEIGHT_HEADER.pack(
            WEIGHT_MAGIC, WEIGHT_VERSION,
            weights.layer_count, weights.heads, weights.d, weights.d_ff, weights.m,
        ))
        for tensor in weights.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_weights(path) -> AggregatorWeights:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"weight file not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _WEIGHT_HEADER.size:
        raise BadWeightFile(f"{path}: shorter than the header")
    magic, version, layer_count, heads, d, d_ff, m = _WEIGHT_HEADER.unpack_from(blob)
    if magic != WEIGHT_MAGIC:
        raise BadWeightFile(f"{path}: bad magic {magic!r}")
    if version != WEIGHT_VERSION:
        raise BadWeightFile(f"{path}: unsupported version {version}")

    offset = _WEIGHT_HEADER.size

    def take(*shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise BadWeightFile(f"{path}: truncated tensor data")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
        return arr

    q = take(m, d)
    layers = []
    for _ in range(layer_count):
        layers.append(LayerWeights(
            ln_q_scale=take(d), ln_q_bias=take(d),
            ln_kv_scale=take(d), ln_kv_bias=take(d),
            w_q=take(d, d), w_k=take(d, d), w_v=take(d, d), w_o=take(d, d),
            ln_ff_scale=take(d), ln_ff_bias=take(d),
            w_1=take(d, d_ff), w_2=take(d_ff, d),
        ))
    p_w = take(d, d)
    p_b = take(d)
    if offset != len(blob):
        raise BadWeightFile(f"{path}: {len(blob) - offset} trailing bytes")
    return AggregatorWeights(
        m=m, d=d, layer_count=layer_count, heads=heads, d_ff=d_ff,
        q=q, layers=layers, p_w=p_w, p_b=p_b,
    )
