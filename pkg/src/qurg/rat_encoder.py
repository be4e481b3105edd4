"""Relation-aware transformer layers and the two-stream matrix encoder.

A from-scratch, deterministic implementation at toy scale.  One layer maps
input rows ``x_i`` to output rows ``y_i`` through multi-head scaled
dot-product attention, a residual + layer norm, a feed-forward block, and a
second residual + layer norm.  The relation-aware variant adds learnable
per-relation-type embeddings inside the attention scores (key side) and the
value sum, one shared table per layer across heads.

The two-stream encoder runs one relation-aware stack over
``[question; context; schema]`` positions with the schema-linking relations
and a second stack over ``[question; context]`` with the rewrite-edit
relations, then sums the two streams position-wise for utterance rows and
keeps the linking stream's schema rows.

Numerical policy: reductions across sequence positions (softmax
denominators, attention value sums) use exactly rounded ``math.fsum`` and
matrix products use broadcast-multiply reductions, so forward passes are
bitwise deterministic, independent of thread count, and exactly
equivariant under position permutations.  Backward passes carry analytic
gradients for the inputs, every weight, and both relation tables.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .rewrite_diff import (
    DEFAULT_POLICY,
    Interaction,
    MatchPolicy,
    RewriteEditMatrix,
    RewriteRelation,
    TokenSeq,
)
from .schema_link import (
    LinkRelation,
    Schema,
    SchemaLinkMatrix,
    build_schema_link_matrix,
)

__all__ = [
    "LAYER_NORM_EPS",
    "RW_RELATION_IDS",
    "LINK_RELATION_IDS",
    "EncoderConfig",
    "RatLayerParams",
    "EncoderParams",
    "AttentionTrace",
    "EncodedStates",
    "init_params",
    "embed_inputs",
    "vanilla_layer_forward",
    "rat_layer_forward",
    "two_stream_encode",
    "layer_backward",
    "encode_interaction",
    "encoder_context_tokens",
    "context_reversal_permutation",
    "rewrite_relation_ids",
    "link_relation_ids",
    "gradient_check",
    "random_layer_params",
    "save_params",
    "load_params",
]

LAYER_NORM_EPS = 1e-6

# Relation-type id 0 is reserved for "no relation" in both streams; its
# embedding rows are initialized to zero.
RW_RELATION_IDS: dict[str, int] = {
    "None": 0,
    **{rel.value: idx + 1 for idx, rel in enumerate(RewriteRelation)},
}
LINK_RELATION_IDS: dict[str, int] = {
    "None": 0,
    **{rel.value: idx + 1 for idx, rel in enumerate(LinkRelation)},
}

_PRECISIONS = {"double": np.float64, "single": np.float32}


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions, depths, and seeding for both encoder streams.

    ``d_z`` (total attention width) must equal ``d_x`` because the residual
    adds the concatenated heads back onto the input, and must be divisible
    by ``heads``.  ``d_ff`` defaults to ``4 * d_x``.  ``single_fc_ff``
    switches the feed-forward block from the standard two-projection form
    to a literal single fully-connected layer applied after the ReLU.
    """

    d_x: int = 16
    d_z: int = 16
    heads: int = 4
    layers_link: int = 8
    layers_rw: int = 4
    d_ff: int | None = None
    link_relation_count: int = len(LINK_RELATION_IDS)
    rw_relation_count: int = len(RW_RELATION_IDS)
    seed: int = 0
    precision: str = "double"
    single_fc_ff: bool = False

    def __post_init__(self) -> None:
        if self.heads < 1 or self.d_z % self.heads != 0:
            raise ValueError("d_z must be a positive multiple of heads")
        if self.d_z != self.d_x:
            raise ValueError(
                "d_z must equal d_x: the attention output is added to the "
                "input by the residual connection"
            )
        if self.layers_link < 1 or self.layers_rw < 1:
            raise ValueError("both streams need at least one layer")
        if self.precision not in _PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}")
        if self.link_relation_count < 1 or self.rw_relation_count < 1:
            raise ValueError("relation vocabularies must be non-empty")

    @property
    def head_width(self) -> int:
        return self.d_z // self.heads

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_x

    @property
    def np_dtype(self) -> type:
        return _PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return {
            "d_x": self.d_x,
            "d_z": self.d_z,
            "heads": self.heads,
            "layers_link": self.layers_link,
            "layers_rw": self.layers_rw,
            "d_ff": self.d_ff,
            "link_relation_count": self.link_relation_count,
            "rw_relation_count": self.rw_relation_count,
            "seed": self.seed,
            "precision": self.precision,
            "single_fc_ff": self.single_fc_ff,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> EncoderConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls(**payload)


@dataclass(eq=False)
class RatLayerParams:
    """All learnable tensors of one layer.

    ``w_q``/``w_k``/``w_v`` have shape (heads, d_x, head_width); the
    relation tables have one row per relation-type id.  In single-FC mode
    ``ff_w2``/``ff_b2`` are None and ``ff_w1`` maps d_x to d_x.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    ff_w1: np.ndarray
    ff_b1: np.ndarray
    ff_w2: np.ndarray | None
    ff_b2: np.ndarray | None
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    rel_key: np.ndarray
    rel_value: np.ndarray
    single_fc: bool = False

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_x(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_width(self) -> int:
        return self.w_q.shape[2]

    @property
    def relation_count(self) -> int:
        return self.rel_key.shape[0]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in (
            "w_q", "w_k", "w_v", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
            "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias", "rel_key", "rel_value",
        ):
            arr = getattr(self, name)
            if arr is not None:
                yield name, arr

    def freeze(self) -> RatLayerParams:
        for _, arr in self.named_arrays():
            arr.setflags(write=False)
        return self


@dataclass(eq=False)
class EncoderParams:
    config: EncoderConfig
    link_layers: tuple[RatLayerParams, ...]
    rw_layers: tuple[RatLayerParams, ...]


@dataclass(eq=False)
class AttentionTrace:
    """Per-layer activations: the published score/weight/z/y tensors plus
    the intermediates the backward pass needs."""

    scores: np.ndarray   # (H, n, n) scaled attention scores
    weights: np.ndarray  # (H, n, n) softmax rows
    z: np.ndarray        # (n, d_x) concatenated head outputs
    y: np.ndarray        # (n, d_x) layer output
    q: np.ndarray        # (H, n, head_width)
    k: np.ndarray
    v: np.ndarray
    ln1_xhat: np.ndarray
    ln1_inv: np.ndarray
    y_mid: np.ndarray    # post-first-norm rows feeding the feed-forward
    ff_hidden: np.ndarray | None  # pre-ReLU hidden rows (two-projection mode)
    ff_out: np.ndarray
    ln2_xhat: np.ndarray
    ln2_inv: np.ndarray


@dataclass(eq=False)
class EncodedStates:
    """Stream outputs and their aggregation.

    Utterance rows of ``h_final`` are the element-wise sums of the two
    stream outputs; schema rows equal the linking stream's rows.
    """

    h_link: np.ndarray
    h_rw: np.ndarray
    h_final: np.ndarray
    n_question: int
    n_context: int
    n_schema: int
    link_traces: tuple[AttentionTrace, ...] | None = None
    rw_traces: tuple[AttentionTrace, ...] | None = None


def _matmul_stable(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (p,q) @ (q,r) without BLAS: per-element reduction trees are identical
    # for every output row, so row results do not depend on row position.
    return (a[:, :, None] * b[None, :, :]).sum(axis=1)


def _fsum_rows(terms: np.ndarray) -> np.ndarray:
    # (n, m, d) -> (n, d): exactly rounded, order-independent sums over m.
    n, _, d = terms.shape
    out = np.empty((n, d), dtype=terms.dtype)
    for i in range(n):
        block = terms[i]
        for c in range(d):
            out[i, c] = math.fsum(block[:, c])
    return out


def _row_softmax(e: np.ndarray) -> np.ndarray:
    shifted = e - e.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    denom = np.empty((ex.shape[0], 1), dtype=ex.dtype)
    for i in range(ex.shape[0]):
        denom[i, 0] = math.fsum(ex[i])
    return ex / denom


def _layer_norm(v: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (v - mu) * inv
    return xhat * gain + bias, xhat, inv


def _layer_norm_backward(
    d_out: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray
) -> np.ndarray:
    d_xhat = d_out * gain
    return inv * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
    )


def _check_input(x: np.ndarray, layer: RatLayerParams) -> None:
    if x.ndim != 2 or x.shape[1] != layer.d_x:
        raise ValueError(f"input must be (n, {layer.d_x}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")


def _check_relations(relations: np.ndarray, n: int, vocab: int) -> np.ndarray:
    relations = np.asarray(relations)
    if relations.shape != (n, n):
        raise ValueError(f"relation matrix must be ({n}, {n}), got {relations.shape}")
    if not np.issubdtype(relations.dtype, np.integer):
        raise ValueError("relation matrix must hold integer type ids")
    if relations.min(initial=0) < 0 or relations.max(initial=0) >= vocab:
        raise ValueError(f"relation ids must lie in [0, {vocab})")
    return relations


def _layer_forward(
    x: np.ndarray, layer: RatLayerParams, relations: np.ndarray | None
) -> tuple[np.ndarray, AttentionTrace]:
    _check_input(x, layer)
    n = x.shape[0]
    heads, width = layer.heads, layer.head_width
    if relations is not None:
        relations = _check_relations(relations, n, layer.relation_count)
    scale = math.sqrt(width)  # the per-head attention width d_z / H

    q = np.stack([_matmul_stable(x, layer.w_q[h]) for h in range(heads)])
    k = np.stack([_matmul_stable(x, layer.w_k[h]) for h in range(heads)])
    v = np.stack([_matmul_stable(x, layer.w_v[h]) for h in range(heads)])

    scores = np.empty((heads, n, n), dtype=x.dtype)
    weights = np.empty((heads, n, n), dtype=x.dtype)
    z_parts = []
    for h in range(heads):
        if relations is None:
            keyed = k[h][None, :, :]
            valued = v[h][None, :, :]
        else:
            keyed = k[h][None, :, :] + layer.rel_key[relations]
            valued = v[h][None, :, :] + layer.rel_value[relations]
        e = (q[h][:, None, :] * keyed).sum(axis=-1) / scale
        alpha = _row_softmax(e)
        scores[h] = e
        weights[h] = alpha
        z_parts.append(_fsum_rows(alpha[:, :, None] * valued))
    z = np.concatenate(z_parts, axis=1)

    y_mid, ln1_xhat, ln1_inv = _layer_norm(x + z, layer.ln1_gain, layer.ln1_bias)
    if layer.single_fc:
        ff_hidden = None
        ff_out = _matmul_stable(np.maximum(y_mid, 0.0), layer.ff_w1) + layer.ff_b1
    else:
        ff_hidden = _matmul_stable(y_mid, layer.ff_w1) + layer.ff_b1
        ff_out = _matmul_stable(np.maximum(ff_hidden, 0.0), layer.ff_w2) + layer.ff_b2
    y, ln2_xhat, ln2_inv = _layer_norm(y_mid + ff_out, layer.ln2_gain, layer.ln2_bias)

    trace = AttentionTrace(
        scores=scores,
        weights=weights,
        z=z,
        y=y,
        q=q,
        k=k,
        v=v,
        ln1_xhat=ln1_xhat,
        ln1_inv=ln1_inv,
        y_mid=y_mid,
        ff_hidden=ff_hidden,
        ff_out=ff_out,
        ln2_xhat=ln2_xhat,
        ln2_inv=ln2_inv,
    )
    return y, trace


def vanilla_layer_forward(
    x: np.ndarray, layer: RatLayerParams
) -> tuple[np.ndarray, AttentionTrace]:
    """One plain transformer layer: scaled dot-product attention with
    1/sqrt(head_width) scaling, row softmax, head concatenation, residual +
    layer norm, feed-forward, residual + layer norm."""
    return _layer_forward(x, layer, None)


def rat_layer_forward(
    x: np.ndarray, relations: np.ndarray, layer: RatLayerParams
) -> tuple[np.ndarray, AttentionTrace]:
    """One relation-aware layer: the relation-type embedding of cell (i, j)
    is added to the key inside the score dot product and to the value
    inside the weighted sum.  With all-zero relation tables this reduces
    exactly to the vanilla layer."""
    if relations is None:
        raise ValueError("rat_layer_forward requires a relation matrix")
    return _layer_forward(x, layer, relations)


def layer_backward(
    grad_y: np.ndarray,
    trace: AttentionTrace,
    x: np.ndarray,
    relations: np.ndarray | None,
    layer: RatLayerParams,
) -> dict[str, np.ndarray]:
    """Analytic gradients of one layer for the input, all weights, and both
    relation tables, given the upstream gradient of the layer output.

    Relation-table gradients accumulate over every cell sharing a relation
    id; ids absent from ``relations`` get zero rows.
    """
    _check_input(x, layer)
    n = x.shape[0]
    heads, width = layer.heads, layer.head_width
    if grad_y.shape != trace.y.shape or trace.y.shape != x.shape:
        raise ValueError("upstream gradient / trace / input shapes disagree")
    if relations is not None:
        relations = _check_relations(relations, n, layer.relation_count)
    scale = math.sqrt(width)

    grads: dict[str, np.ndarray] = {
        "rel_key": np.zeros_like(layer.rel_key),
        "rel_value": np.zeros_like(layer.rel_value),
    }

    # Second layer norm.
    grads["ln2_gain"] = (grad_y * trace.ln2_xhat).sum(axis=0)
    grads["ln2_bias"] = grad_y.sum(axis=0)
    d_u = _layer_norm_backward(grad_y, trace.ln2_xhat, trace.ln2_inv, layer.ln2_gain)
    d_y_mid = d_u.copy()
    d_ff_out = d_u

    # Feed-forward block.
    if layer.single_fc:
        relu_in = trace.y_mid
        relu_out = np.maximum(relu_in, 0.0)
        grads["ff_w1"] = _matmul_stable(relu_out.T, d_ff_out)
        grads["ff_b1"] = d_ff_out.sum(axis=0)
        d_y_mid += _matmul_stable(d_ff_out, layer.ff_w1.T) * (relu_in > 0)
    else:
        hidden = trace.ff_hidden
        relu_out = np.maximum(hidden, 0.0)
        grads["ff_w2"] = _matmul_stable(relu_out.T, d_ff_out)
        grads["ff_b2"] = d_ff_out.sum(axis=0)
        d_hidden = _matmul_stable(d_ff_out, layer.ff_w2.T) * (hidden > 0)
        grads["ff_w1"] = _matmul_stable(trace.y_mid.T, d_hidden)
        grads["ff_b1"] = d_hidden.sum(axis=0)
        d_y_mid += _matmul_stable(d_hidden, layer.ff_w1.T)

    # First layer norm; its input is x + z.
    grads["ln1_gain"] = (d_y_mid * trace.ln1_xhat).sum(axis=0)
    grads["ln1_bias"] = d_y_mid.sum(axis=0)
    d_p = _layer_norm_backward(d_y_mid, trace.ln1_xhat, trace.ln1_inv, layer.ln1_gain)
    d_x = d_p.copy()

    grads["w_q"] = np.zeros_like(layer.w_q)
    grads["w_k"] = np.zeros_like(layer.w_k)
    grads["w_v"] = np.zeros_like(layer.w_v)
    for h in range(heads):
        d_z = d_p[:, h * width : (h + 1) * width]
        alpha = trace.weights[h]
        if relations is None:
            keyed = trace.k[h][None, :, :]
            valued = trace.v[h][None, :, :]
        else:
            keyed = trace.k[h][None, :, :] + layer.rel_key[relations]
            valued = trace.v[h][None, :, :] + layer.rel_value[relations]

        d_alpha = (d_z[:, None, :] * valued).sum(axis=-1)
        d_v = _matmul_stable(alpha.T, d_z)
        if relations is not None:
            value_terms = alpha[:, :, None] * d_z[:, None, :]
            for rel_id in np.unique(relations):
                grads["rel_value"][rel_id] += value_terms[relations == rel_id].sum(axis=0)

        d_e = alpha * (d_alpha - (alpha * d_alpha).sum(axis=-1, keepdims=True))
        d_s = d_e / scale
        d_q = (d_s[:, :, None] * keyed).sum(axis=1)
        d_k = (d_s[:, :, None] * trace.q[h][:, None, :]).sum(axis=0)
        if relations is not None:
            key_terms = d_s[:, :, None] * trace.q[h][:, None, :]
            for rel_id in np.unique(relations):
                grads["rel_key"][rel_id] += key_terms[relations == rel_id].sum(axis=0)

        grads["w_q"][h] = _matmul_stable(x.T, d_q)
        grads["w_k"][h] = _matmul_stable(x.T, d_k)
        grads["w_v"][h] = _matmul_stable(x.T, d_v)
        d_x += _matmul_stable(d_q, layer.w_q[h].T)
        d_x += _matmul_stable(d_k, layer.w_k[h].T)
        d_x += _matmul_stable(d_v, layer.w_v[h].T)

    grads["x"] = d_x
    return grads


def _init_layer(
    rng: np.random.Generator, config: EncoderConfig, relation_count: int
) -> RatLayerParams:
    dtype = config.np_dtype
    d_x, width = config.d_x, config.head_width
    bound_x = 1.0 / math.sqrt(d_x)
    bound_r = 1.0 / math.sqrt(width)

    def uniform(shape: tuple[int, ...], bound: float) -> np.ndarray:
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    w_q = uniform((config.heads, d_x, width), bound_x)
    w_k = uniform((config.heads, d_x, width), bound_x)
    w_v = uniform((config.heads, d_x, width), bound_x)
    if config.single_fc_ff:
        ff_w1 = uniform((d_x, d_x), bound_x)
        ff_b1 = np.zeros(d_x, dtype=dtype)
        ff_w2 = ff_b2 = None
    else:
        ff_w1 = uniform((d_x, config.ff_width), bound_x)
        ff_b1 = np.zeros(config.ff_width, dtype=dtype)
        ff_w2 = uniform((config.ff_width, d_x), 1.0 / math.sqrt(config.ff_width))
        ff_b2 = np.zeros(d_x, dtype=dtype)
    rel_key = uniform((relation_count, width), bound_r)
    rel_value = uniform((relation_count, width), bound_r)
    rel_key[0] = 0.0
    rel_value[0] = 0.0
    return RatLayerParams(
        w_q=w_q,
        w_k=w_k,
        w_v=w_v,
        ff_w1=ff_w1,
        ff_b1=ff_b1,
        ff_w2=ff_w2,
        ff_b2=ff_b2,
        ln1_gain=np.ones(d_x, dtype=dtype),
        ln1_bias=np.zeros(d_x, dtype=dtype),
        ln2_gain=np.ones(d_x, dtype=dtype),
        ln2_bias=np.zeros(d_x, dtype=dtype),
        rel_key=rel_key,
        rel_value=rel_value,
        single_fc=config.single_fc_ff,
    ).freeze()


def init_params(config: EncoderConfig) -> EncoderParams:
    """Seeded parameter initialization for both streams.

    Weights are symmetric-uniform scaled by 1/sqrt(fan-in); layer-norm
    gains start at one, all biases at zero; the no-relation embedding row
    is the zero vector.  Identical seeds give bitwise-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    link_layers = tuple(
        _init_layer(rng, config, config.link_relation_count)
        for _ in range(config.layers_link)
    )
    rw_layers = tuple(
        _init_layer(rng, config, config.rw_relation_count)
        for _ in range(config.layers_rw)
    )
    return EncoderParams(config, link_layers, rw_layers)


def _word_vector(word: str, d_x: int, seed: int, dtype: type) -> np.ndarray:
    digest = hashlib.blake2b(
        f"{seed}\x1f{word}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return (rng.uniform(-1.0, 1.0, size=d_x) / math.sqrt(d_x)).astype(dtype)


def encoder_context_tokens(interaction: Interaction) -> TokenSeq:
    """Context tokens in encoder order: most recent turn first, token order
    preserved inside each turn."""
    return tuple(
        tok for turn in reversed(interaction.context_turns) for tok in turn
    )


def context_reversal_permutation(turn_lengths: Sequence[int]) -> tuple[int, ...]:
    """Map encoder context positions (recent-first) to chronological
    flat-context positions."""
    offsets = []
    total = 0
    for length in turn_lengths:
        offsets.append(total)
        total += length
    perm: list[int] = []
    for offset, length in zip(reversed(offsets), reversed(list(turn_lengths))):
        perm.extend(range(offset, offset + length))
    return tuple(perm)


def embed_inputs(
    interaction: Interaction, schema: Schema, params: EncoderParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded hash-based word embeddings for question, context, and schema.

    Context rows follow encoder order (most recent turn first).  Each
    schema element contributes one row: the arithmetic mean of its name
    words' embedding rows.  The same word always maps to the same row.
    """
    config = params.config
    cache: dict[str, np.ndarray] = {}

    def vec(word: str) -> np.ndarray:
        if word not in cache:
            cache[word] = _word_vector(word, config.d_x, config.seed, config.np_dtype)
        return cache[word]

    def rows(tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, config.d_x), dtype=config.np_dtype)
        return np.stack([vec(tok) for tok in tokens])

    x_question = rows(interaction.question)
    x_context = rows(encoder_context_tokens(interaction))
    element_names = [*schema.tables, *(col.name for col in schema.columns)]
    if element_names:
        x_schema = np.stack([rows(name).mean(axis=0) for name in element_names])
    else:
        x_schema = np.zeros((0, config.d_x), dtype=config.np_dtype)
    return x_question, x_context, x_schema


def link_relation_ids(matrix: SchemaLinkMatrix) -> np.ndarray:
    """Dense relation-id matrix over the linking layout (already
    ``[question; context; tables; columns]``)."""
    ids = np.zeros((matrix.size, matrix.size), dtype=np.int64)
    for (i, j), rel in matrix.cells.items():
        ids[i, j] = LINK_RELATION_IDS[rel.value]
    return ids


def rewrite_relation_ids(
    matrix: RewriteEditMatrix,
    context_permutation: Sequence[int] | None = None,
) -> np.ndarray:
    """Dense relation-id matrix re-indexed from the stored
    ``[context; question]`` layout to the encoder's ``[question; context]``.

    ``context_permutation`` maps encoder context positions to stored
    (chronological) context positions; identity when omitted.
    """
    n_ctx, n_q = matrix.context_size, matrix.question_size
    if context_permutation is None:
        context_permutation = tuple(range(n_ctx))
    if sorted(context_permutation) != list(range(n_ctx)):
        raise ValueError("context_permutation must permute the context positions")
    stored_to_encoder = [0] * n_ctx
    for enc_pos, stored_pos in enumerate(context_permutation):
        stored_to_encoder[stored_pos] = n_q + enc_pos

    def enc(pos: int) -> int:
        return pos - n_ctx if pos >= n_ctx else stored_to_encoder[pos]

    ids = np.zeros((n_q + n_ctx, n_q + n_ctx), dtype=np.int64)
    for (i, j), rel in matrix.cells.items():
        ids[enc(i), enc(j)] = RW_RELATION_IDS[rel.value]
    return ids


def two_stream_encode(
    x_question: np.ndarray,
    x_context: np.ndarray,
    x_schema: np.ndarray,
    link_matrix: SchemaLinkMatrix,
    rewrite_matrix: RewriteEditMatrix,
    params: EncoderParams,
    *,
    context_permutation: Sequence[int] | None = None,
    keep_traces: bool = False,
) -> EncodedStates:
    """Run both relation-matrix streams and aggregate.

    The linking stream stacks ``layers_link`` relation-aware layers over
    ``[question; context; schema]``; the rewriting stream stacks
    ``layers_rw`` layers over ``[question; context]``.  Question and
    context rows of the result are the element-wise sums of the two stream
    outputs; schema rows come from the linking stream alone.
    """
    n_q, n_c, n_s = len(x_question), len(x_context), len(x_schema)
    if link_matrix.n_question != n_q or link_matrix.n_context != n_c:
        raise ValueError("linking matrix layout does not match the embeddings")
    if link_matrix.n_tables + link_matrix.n_columns != n_s:
        raise ValueError("linking matrix schema size does not match the embeddings")
    if rewrite_matrix.question_size != n_q or rewrite_matrix.context_size != n_c:
        raise ValueError("rewrite matrix layout does not match the embeddings")

    link_ids = link_relation_ids(link_matrix)
    rw_ids = rewrite_relation_ids(rewrite_matrix, context_permutation)

    link_traces: list[AttentionTrace] = []
    rw_traces: list[AttentionTrace] = []
    h_link = np.concatenate([x_question, x_context, x_schema], axis=0)
    for layer in params.link_layers:
        h_link, trace = rat_layer_forward(h_link, link_ids, layer)
        if keep_traces:
            link_traces.append(trace)
    h_rw = np.concatenate([x_question, x_context], axis=0)
    for layer in params.rw_layers:
        h_rw, trace = rat_layer_forward(h_rw, rw_ids, layer)
        if keep_traces:
            rw_traces.append(trace)

    h_final = np.concatenate([h_link[: n_q + n_c] + h_rw, h_link[n_q + n_c :]], axis=0)
    return EncodedStates(
        h_link,
        h_rw,
        h_final,
        n_q,
        n_c,
        n_s,
        link_traces=tuple(link_traces) if keep_traces else None,
        rw_traces=tuple(rw_traces) if keep_traces else None,
    )


def encode_interaction(
    interaction: Interaction,
    schema: Schema,
    rewrite_matrix: RewriteEditMatrix,
    params: EncoderParams,
    policy: MatchPolicy = DEFAULT_POLICY,
    *,
    keep_traces: bool = False,
) -> tuple[EncodedStates, SchemaLinkMatrix]:
    """Embed one interaction, build its schema-linking matrix in encoder
    order, reconcile the rewrite matrix's index order, and encode."""
    if rewrite_matrix.question_tokens != interaction.question:
        raise ValueError("rewrite matrix question does not match the interaction")
    if rewrite_matrix.context_tokens != interaction.flat_context():
        raise ValueError("rewrite matrix context does not match the interaction")
    x_question, x_context, x_schema = embed_inputs(interaction, schema, params)
    link_matrix = build_schema_link_matrix(
        interaction.question, encoder_context_tokens(interaction), schema, policy
    )
    states = two_stream_encode(
        x_question,
        x_context,
        x_schema,
        link_matrix,
        rewrite_matrix,
        params,
        context_permutation=context_reversal_permutation(interaction.turn_lengths()),
        keep_traces=keep_traces,
    )
    return states, link_matrix


def random_layer_params(
    rng: np.random.Generator,
    d_x: int,
    heads: int,
    d_ff: int,
    relation_count: int,
    single_fc: bool = False,
) -> RatLayerParams:
    """A generic random parameter point for gradient checking.

    Unlike :func:`init_params` this also randomizes layer-norm gains/biases
    and relation rows (including the no-relation row): at the init point
    (gain 1, bias 0) the sum-of-squares loss of a norm-final layer is almost
    invariant to upstream parameters and finite differences lose signal.
    """
    if d_x % heads != 0:
        raise ValueError("d_x must be divisible by heads")
    width = d_x // heads

    def u(shape, bound=1.0):
        return rng.uniform(-bound, bound, size=shape)

    return RatLayerParams(
        w_q=u((heads, d_x, width), 1.0 / math.sqrt(d_x)),
        w_k=u((heads, d_x, width), 1.0 / math.sqrt(d_x)),
        w_v=u((heads, d_x, width), 1.0 / math.sqrt(d_x)),
        ff_w1=u((d_x, d_x if single_fc else d_ff), 1.0 / math.sqrt(d_x)),
        ff_b1=u(d_x if single_fc else d_ff, 0.3),
        ff_w2=None if single_fc else u((d_ff, d_x), 1.0 / math.sqrt(d_ff)),
        ff_b2=None if single_fc else u(d_x, 0.3),
        ln1_gain=rng.uniform(0.5, 1.5, d_x),
        ln1_bias=u(d_x, 0.5),
        ln2_gain=rng.uniform(0.5, 1.5, d_x),
        ln2_bias=u(d_x, 0.5),
        rel_key=u((relation_count, width), 1.0 / math.sqrt(width)),
        rel_value=u((relation_count, width), 1.0 / math.sqrt(width)),
        single_fc=single_fc,
    )


def _perturbed(layer: RatLayerParams, name: str, flat_index: int, delta: float) -> RatLayerParams:
    arr = getattr(layer, name).copy()
    arr.flat[flat_index] += delta
    return replace(layer, **{name: arr})


def gradient_check(
    layer: RatLayerParams,
    x: np.ndarray,
    relations: np.ndarray | None,
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients with central finite differences of the
    scalar loss sum(y**2); returns the largest per-block relative error
    (infinity norms)."""

    def loss_of(layer_variant: RatLayerParams, x_variant: np.ndarray) -> float:
        y, _ = _layer_forward(x_variant, layer_variant, relations)
        return float((y ** 2).sum())

    y, trace = _layer_forward(x, layer, relations)
    grads = layer_backward(2.0 * y, trace, x, relations, layer)

    worst = 0.0
    for name, analytic in grads.items():
        numeric = np.zeros_like(analytic)
        for flat in range(analytic.size):
            if name == "x":
                x_plus, x_minus = x.copy(), x.copy()
                x_plus.flat[flat] += step
                x_minus.flat[flat] -= step
                hi, lo = loss_of(layer, x_plus), loss_of(layer, x_minus)
            else:
                hi = loss_of(_perturbed(layer, name, flat, step), x)
                lo = loss_of(_perturbed(layer, name, flat, -step), x)
            numeric.flat[flat] = (hi - lo) / (2.0 * step)
        denom = max(
            float(np.abs(numeric).max(initial=0.0)),
            float(np.abs(analytic).max(initial=0.0)),
            1e-8,
        )
        worst = max(worst, float(np.abs(numeric - analytic).max(initial=0.0)) / denom)
    return worst


def _layer_payload(layer: RatLayerParams) -> dict:
    payload: dict = {name: arr.tolist() for name, arr in layer.named_arrays()}
    payload["single_fc"] = layer.single_fc
    return payload


def _layer_from_payload(payload: dict, dtype: type) -> RatLayerParams:
    def arr(name: str) -> np.ndarray | None:
        if name not in payload:
            return None
        return np.asarray(payload[name], dtype=dtype)

    return RatLayerParams(
        w_q=arr("w_q"),
        w_k=arr("w_k"),
        w_v=arr("w_v"),
        ff_w1=arr("ff_w1"),
        ff_b1=arr("ff_b1"),
        ff_w2=arr("ff_w2"),
        ff_b2=arr("ff_b2"),
        ln1_gain=arr("ln1_gain"),
        ln1_bias=arr("ln1_bias"),
        ln2_gain=arr("ln2_gain"),
        ln2_bias=arr("ln2_bias"),
        rel_key=arr("rel_key"),
        rel_value=arr("rel_value"),
        single_fc=payload.get("single_fc", False),
    ).freeze()


def save_params(path, params: EncoderParams) -> None:
    """Serialize a parameter set (versioned JSON, exact float round-trip)."""
    import json

    payload = {
        "qurg_fmt": 1,
        "kind": "qurg-encoder-params",
        "config": params.config.to_dict(),
        "link_layers": [_layer_payload(layer) for layer in params.link_layers],
        "rw_layers": [_layer_payload(layer) for layer in params.rw_layers],
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, ensure_ascii=False, separators=(",", ":"))
        handle.write("\n")


def load_params(path) -> EncoderParams:
    import json

    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("qurg_fmt") != 1 or payload.get("kind") != "qurg-encoder-params":
        raise ValueError(f"{path}: not a version-1 encoder parameter file")
    config = EncoderConfig.from_dict(payload["config"])
    dtype = config.np_dtype
    return EncoderParams(
        config,
        tuple(_layer_from_payload(p, dtype) for p in payload["link_layers"]),
        tuple(_layer_from_payload(p, dtype) for p in payload["rw_layers"]),
    )
