"""Attention kernels over feature maps: flat baseline and spatial knitting.

Spatial knitting runs attention along one spatial axis at a time: first every
row of the map attends (each row is an independent token sequence), then every
column.  Two variants are provided:

* ``sk_cross_attention``: rows, then columns, cross-attend to an external
  token sequence (expression tokens and the like).
* ``sk_reference_attention``: each row of the map is concatenated with the
  matching row of a same-shaped reference map (map tokens first), the doubled
  row self-attends, and only the first half (the map positions) is retained;
  the column stage repeats this along columns.

Each stage is pre-norm residual: ``x + MHA(LN(x), kv)``.  With a stage's
output projection at zero the stage is an exact identity, which is what the
adapter stack relies on for transparent initialization.

Every scaled-dot product reports its multiply-accumulate counts to any active
``count_macs`` context, so closed-form cost formulas can be checked against
what actually executed.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from math import prod, sqrt

import numpy as np

from skattn.autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    concat,
    constant,
    layer_norm,
    matmul,
    param,
    permute,
    reshape,
    slice_axis,
    softmax,
)

__all__ = [
    "StageParams",
    "AttentionParams",
    "attention_params",
    "sinusoidal_encoding",
    "MacCounter",
    "count_macs",
    "scaled_dot_attention",
    "multi_head_attention",
    "sk_cross_attention",
    "sk_reference_attention",
    "flat_attention_baseline",
    "attention_op_count",
]


@dataclass
class StageParams:
    """Projections and norm for one attention stage (one spatial axis)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    use_positional_encoding: bool = False

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o
        yield f"{prefix}.ln_gamma", self.ln_gamma
        yield f"{prefix}.ln_beta", self.ln_beta


@dataclass
class AttentionParams:
    """Row-stage and column-stage parameters for a knitted attention block."""

    d_model: int
    n_heads: int
    row: StageParams
    col: StageParams

    def named_tensors(self, prefix: str):
        yield from self.row.named_tensors(f"{prefix}.row")
        yield from self.col.named_tensors(f"{prefix}.col")


def _stage_params(
    d_model: int,
    kv_width: int,
    rng: np.random.Generator,
    zero_output: bool,
    positional: bool,
    trainable: bool,
) -> StageParams:
    make = param if trainable else constant

    def mat(rows, cols):
        return make(rng.standard_normal((rows, cols)) / sqrt(rows))
    w_o = make(np.zeros((d_model, d_model))) if zero_output else mat(d_model, d_model)
    return StageParams(
        w_q=mat(d_model, d_model),
        w_k=mat(kv_width, d_model),
        w_v=mat(kv_width, d_model),
        w_o=w_o,
        ln_gamma=make(np.ones(d_model)),
        ln_beta=make(np.zeros(d_model)),
        use_positional_encoding=positional,
    )


def attention_params(
    d_model: int,
    n_heads: int,
    rng: np.random.Generator,
    kv_width: int | None = None,
    zero_output: bool = False,
    positional: bool = False,
    trainable: bool = True,
) -> AttentionParams:
    """Fresh parameters for both stages.

    ``kv_width`` is the width of the external key/value tokens (defaults to
    d_model, the self/reference case).  ``zero_output`` starts both output
    projections at zero, making each stage an exact identity: the flag for
    stages that feed a residual injection path.
    """
    if d_model % n_heads:
        raise ShapeMismatch(f"d_model {d_model} not divisible by n_heads {n_heads}")
    kv_width = d_model if kv_width is None else kv_width
    return AttentionParams(
        d_model=d_model,
        n_heads=n_heads,
        row=_stage_params(d_model, kv_width, rng, zero_output, positional, trainable),
        col=_stage_params(d_model, kv_width, rng, zero_output, positional, trainable),
    )


def sinusoidal_encoding(n_positions: int, d_model: int) -> np.ndarray:
    """Standard sin/cos position table, shape [n_positions, d_model]."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d_model)
    pe = np.empty((n_positions, d_model))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


# ---------------------------------------------------------------------------
# MAC instrumentation


@dataclass
class MacCounter:
    """Multiply-accumulate tallies for score and value computations."""

    score_macs: int = 0
    value_macs: int = 0

    @property
    def total(self) -> int:
        return self.score_macs + self.value_macs


_active_counters: list[MacCounter] = []


@contextmanager
def count_macs():
    """Collect MAC counts from every scaled-dot product run inside the block."""
    counter = MacCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _tally(batch: int, n: int, m: int, d: int) -> None:
    if _active_counters:
        macs = batch * n * m * d
        for c in _active_counters:
            c.score_macs += macs
            c.value_macs += macs


# ---------------------------------------------------------------------------
# kernels


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(t, axes)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v.

    q is [..., n, d]; k and v are [m, d]/[m, d_v] shared across the batch, or
    batched with the same leading dims as q.  NaN scores yield NaN outputs.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"query width {q.shape} vs key width {k.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"key/value token mismatch {k.shape} vs {v.shape}")
    d = q.shape[-1]
    scores = matmul(q, _swap_last(k) if k.ndim > 2 else permute(k, (1, 0)))
    attn = softmax(scores * (1.0 / sqrt(d)), axis=-1)
    out = matmul(attn, v)
    _tally(prod(q.shape[:-2], start=1), q.shape[-2], k.shape[-2], d)
    return out


def multi_head_attention(
    queries: Tensor, keys_values: Tensor, params: AttentionParams, stage: str = "row"
) -> Tensor:
    """Project, attend per head, concatenate, project back.

    ``queries`` is [..., n, d_model]; ``keys_values`` is [m, kv_width] (shared)
    or batched like the queries.  With n_heads=1 this is exactly the projected
    single-head scaled dot product.  Output matches the query shape.
    """
    sp = params.row if stage == "row" else params.col
    if queries.shape[-1] != sp.w_q.shape[0]:
        raise ShapeMismatch(f"queries width {queries.shape[-1]} vs w_q {sp.w_q.shape}")
    if keys_values.shape[-1] != sp.w_k.shape[0]:
        raise ShapeMismatch(f"kv width {keys_values.shape[-1]} vs w_k {sp.w_k.shape}")
    if params.d_model % params.n_heads:
        raise ShapeMismatch(f"d_model {params.d_model} not divisible by {params.n_heads} heads")
    dh = params.d_model // params.n_heads
    q = matmul(queries, sp.w_q)
    k = matmul(keys_values, sp.w_k)
    v = matmul(keys_values, sp.w_v)
    heads = []
    for h in range(params.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        heads.append(
            scaled_dot_attention(
                slice_axis(q, -1, lo, hi), slice_axis(k, -1, lo, hi), slice_axis(v, -1, lo, hi)
            )
        )
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=-1)
    return matmul(merged, sp.w_o)


def _positional(x: Tensor, table: np.ndarray) -> Tensor:
    """Add a position table (broadcast over leading dims) to token tensor x."""
    pe = np.broadcast_to(table, x.shape).copy()
    return add(x, constant(pe))


def _knit_stage(
    x: Tensor, kv: Tensor | None, params: AttentionParams, stage: str, pe_table: np.ndarray | None
) -> Tensor:
    """One pre-norm residual stage: x + MHA(LN(x) [+ pe], kv or self)."""
    sp = params.row if stage == "row" else params.col
    tokens = layer_norm(x, sp.ln_gamma, sp.ln_beta)
    if sp.use_positional_encoding and pe_table is not None:
        tokens = _positional(tokens, pe_table)
    out = multi_head_attention(tokens, tokens if kv is None else kv, params, stage)
    return add(x, out)


def _check_map(t: Tensor, d_model: int, name: str) -> None:
    if t.ndim != 3:
        raise ShapeMismatch(f"{name} must be [channels, height, width], got {t.shape}")
    if t.shape[0] != d_model:
        raise ShapeMismatch(f"{name} channels {t.shape[0]} != d_model {d_model}")


def sk_cross_attention(map_t: Tensor, seq: Tensor, params: AttentionParams) -> Tensor:
    """Knitted cross-attention of a [c,h,w] map against token sequence [L,D].

    Row stage: every row of the map (w tokens wide) cross-attends to ``seq``;
    column stage: every column (h tokens) does the same.  With positional
    encoding enabled the query tokens receive a sin/cos table indexed along
    the attended axis; the external tokens get none.
    """
    _check_map(map_t, params.d_model, "map")
    if seq.ndim != 2:
        raise ShapeMismatch(f"token sequence must be [L, width], got {seq.shape}")
    c, h, w = map_t.shape
    x = permute(map_t, (1, 2, 0))  # [h, w, c]: h independent rows
    x = _knit_stage(x, seq, params, "row", sinusoidal_encoding(w, c))
    x = permute(x, (1, 0, 2))  # [w, h, c]: w independent columns
    x = _knit_stage(x, seq, params, "col", sinusoidal_encoding(h, c))
    return permute(x, (2, 1, 0))  # back to [c, h, w]


def sk_reference_attention(map_t: Tensor, ref_t: Tensor, params: AttentionParams) -> Tensor:
    """Knitted self-attention of a map against a same-shaped reference map.

    Each row of the map is concatenated with the matching reference row (map
    tokens first, doubling the row to 2w tokens), the doubled row
    self-attends, and the first w outputs (the map positions) feed the
    residual.  The column stage repeats this with doubled columns (2h).  With
    positional encoding enabled, a reference token shares the index of the
    map position it mirrors, so attention can see spatial alignment.
    """
    _check_map(map_t, params.d_model, "map")
    _check_map(ref_t, params.d_model, "reference")
    if map_t.shape != ref_t.shape:
        raise ShapeMismatch(f"map {map_t.shape} vs reference {ref_t.shape}")
    c, h, w = map_t.shape
    ref_rows = permute(ref_t, (1, 2, 0))  # [h, w, c]
    ref_cols = permute(ref_t, (2, 1, 0))  # [w, h, c]

    def half_pe(n: int) -> np.ndarray:
        table = sinusoidal_encoding(n, c)
        return np.concatenate([table, table], axis=0)

    def stage(x: Tensor, ref: Tensor, which: str, n: int) -> Tensor:
        sp = params.row if which == "row" else params.col
        tokens = concat([x, ref], axis=1)  # map tokens first, then reference
        normed = layer_norm(tokens, sp.ln_gamma, sp.ln_beta)
        if sp.use_positional_encoding:
            normed = _positional(normed, half_pe(n))
        out = multi_head_attention(normed, normed, params, which)
        return add(x, slice_axis(out, 1, 0, n))  # retain the map half

    x = permute(map_t, (1, 2, 0))
    x = stage(x, ref_rows, "row", w)
    x = permute(x, (1, 0, 2))
    x = stage(x, ref_cols, "col", h)
    return permute(x, (2, 1, 0))


def flat_attention_baseline(map_t: Tensor, seq: Tensor, params: AttentionParams) -> Tensor:
    """Single-stage baseline: flatten the map and cross-attend to ``seq``.

    Uses only the row-stage parameters.  Positional encoding, when enabled,
    indexes the flattened position (row-major).
    """
    _check_map(map_t, params.d_model, "map")
    if seq.ndim != 2:
        raise ShapeMismatch(f"token sequence must be [L, width], got {seq.shape}")
    c, h, w = map_t.shape
    x = reshape(permute(map_t, (1, 2, 0)), (h * w, c))
    x = _knit_stage(x, seq, params, "row", sinusoidal_encoding(h * w, c))
    return permute(reshape(x, (h, w, c)), (2, 0, 1))


# ---------------------------------------------------------------------------
# closed-form cost model


_VARIANTS = ("flat-self", "flat-cross", "sk-cross", "sk-reference")


def attention_op_count(
    variant: str, height: int, width: int, d_model: int, seq_len: int | None = None
) -> MacCounter:
    """Closed-form MACs of the score and value computations for one call.

    flat-self:     self-attention over the h*w flattened map;
    flat-cross:    the flat baseline against seq_len external tokens;
    sk-cross:      row stage h*w*L*d plus column stage w*h*L*d;
    sk-reference:  row stage h*(2w)^2*d plus column stage w*(2h)^2*d
                   (all 2w doubled-row positions act as queries; retention
                   happens after attention).
    Value MACs mirror score MACs for every variant.  These formulas are what
    the instrumented counters in ``count_macs`` must reproduce exactly.
    """
    h, w, d = int(height), int(width), int(d_model)
    if variant in ("flat-cross", "sk-cross"):
        if seq_len is None:
            raise ShapeMismatch(f"{variant} needs seq_len")
        length = int(seq_len)
    if variant == "flat-self":
        score = (h * w) ** 2 * d
    elif variant == "flat-cross":
        score = h * w * length * d
    elif variant == "sk-cross":
        score = h * w * length * d + w * h * length * d
    elif variant == "sk-reference":
        score = h * (2 * w) ** 2 * d + w * (2 * h) ** 2 * d
    else:
        raise ShapeMismatch(f"unknown variant {variant!r}; expected one of {_VARIANTS}")
    return MacCounter(score_macs=score, value_macs=score)
