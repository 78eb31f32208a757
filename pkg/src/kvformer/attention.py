"""Multi-head self-attention in three flavours.

``qkv``    scores = alpha * Q K^T                      (standard)
``kv``     scores = alpha * K K^T                      (no query projection; symmetric)
``kvpos``  kv scores broadcast against a learned [N, N, m] table and mapped
           back to one value per pair by an m-input linear map

alpha is ``1 / sqrt(head_dim)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import CapacityError, ConfigError, ShapeError
from .tensor import Tensor

VARIANTS = ("qkv", "kv", "kvpos")


@dataclass(frozen=True)
class AttentionKind:
    variant: str
    pos_dim: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "kvpos":
            if self.pos_dim is None or int(self.pos_dim) < 1:
                raise ConfigError("kvpos attention needs pos_dim >= 1")
        elif self.pos_dim is not None:
            raise ConfigError(f"pos_dim only applies to kvpos attention, not {self.variant}")

    @classmethod
    def qkv(cls):
        return cls("qkv")

    @classmethod
    def kv(cls):
        return cls("kv")

    @classmethod
    def kvpos(cls, m: int):
        return cls("kvpos", int(m))

    @classmethod
    def from_name(cls, name: str, pos_dim: int = 10) -> "AttentionKind":
        name = name.strip().lower().replace("+", "").replace("_", "")
        if name == "kvpos":
            return cls.kvpos(pos_dim)
        return cls(name)

    @property
    def m(self) -> int:
        return self.pos_dim or 0

    def __str__(self):
        return self.variant


class AttentionLayer:
    """Parameters and forward pass of one multi-head self-attention layer.

    Projections are stored as ``[d, d]`` matrices whose column blocks are the
    per-head projections. ``pos_table``, ``pos_w`` and ``pos_b`` are shared
    across heads and batch entries.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        kind: AttentionKind,
        max_len: int,
        causal: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.alpha = 1.0 / math.sqrt(self.head_dim)
        self.kind = kind
        self.max_len = max_len
        self.causal = causal
        self.dropout = dropout
        self.last_scores = None
        self.last_weights = None

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        if kind.variant == "qkv":
            self.params["w_q"] = normal(d_model, d_model)
        self.params["w_k"] = normal(d_model, d_model)
        self.params["w_v"] = normal(d_model, d_model)
        self.params["w_o"] = normal(d_model, d_model)
        if kind.variant == "kvpos":
            m = kind.pos_dim
            bound = 1.0 / math.sqrt(m)
            self.params["pos_table"] = normal(max_len, max_len, m)
            self.params["pos_w"] = Tensor(rng.uniform(-bound, bound, size=(m,)).astype(dtype), requires_grad=True)
            self.params["pos_b"] = Tensor(rng.uniform(-bound, bound, size=(1,)).astype(dtype), requires_grad=True)

    def __getattr__(self, name):
        params = self.__dict__.get("params")
        if params is not None and name in params:
            return params[name]
        raise AttributeError(name)

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return multi_head_attention(x, self, training=training, rng=rng)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def attention_scores(x: Tensor, layer: AttentionLayer) -> Tensor:
    """Pre-softmax scores ``[B, H, T, T]``; symmetric per head for kv/kvpos."""
    if x.ndim != 3 or x.shape[-1] != layer.d_model:
        raise ShapeError(f"expected input [B, T, {layer.d_model}], got {x.shape}")
    if x.shape[1] > layer.max_len:
        raise CapacityError(f"sequence length {x.shape[1]} exceeds max_len {layer.max_len}")
    k = _split_heads(x @ layer.w_k, layer.n_heads)
    if layer.kind.variant == "qkv":
        q = _split_heads(x @ layer.w_q, layer.n_heads)
    else:
        q = k
    return T.scale(q @ T.swap_last(k), layer.alpha)


def add_positional_bias(scores: Tensor, layer: AttentionLayer) -> Tensor:
    """``out[b,h,i,j] = sum_k w_k (scores[b,h,i,j] + P[i,j,k]) + bias``.

    Computed in the collapsed form ``(sum w) * scores + (P[i,j] . w + bias)``
    so the ``[B, H, T, T, m]`` broadcast is never materialized. See
    :func:`add_positional_bias_broadcast` for the literal construction.
    """
    if layer.kind.variant != "kvpos":
        raise ConfigError(f"positional bias requires a kvpos layer, got {layer.kind.variant}")
    n = scores.shape[-1]
    if n > layer.max_len:
        raise CapacityError(f"sequence length {n} exceeds max_len {layer.max_len}")
    P, w, b = layer.pos_table, layer.pos_w, layer.pos_b
    Pn = P.data[:n, :n]
    wsum = w.data.sum()
    bias = Pn @ w.data + b.data[0]
    out = scores.data * wsum + bias

    def backward(g):
        g_pair = g.reshape(-1, n, n).sum(axis=0)
        gs = gP = gw = gb = None
        if scores.requires_grad:
            gs = g * wsum
        if P.requires_grad:
            gP = np.zeros_like(P.data)
            gP[:n, :n] = g_pair[:, :, None] * w.data
        if w.requires_grad:
            gw = (g * scores.data).sum() + np.tensordot(g_pair, Pn, axes=([0, 1], [0, 1]))
            gw = gw.astype(w.dtype)
        if b.requires_grad:
            gb = np.array([g.sum()], dtype=b.dtype)
        return gs, gP, gw, gb

    return Tensor._from_op(out.astype(scores.dtype), (scores, P, w, b), backward, "pos_bias")


def add_positional_bias_broadcast(scores: Tensor, layer: AttentionLayer) -> Tensor:
    """Literal form: broadcast-add the table, then apply the m->1 linear map."""
    n = scores.shape[-1]
    P = layer.pos_table
    m = P.shape[-1]
    table = _slice_table(P, n)
    expanded = T.reshape(scores, scores.shape + (1,)) + T.reshape(table, (1, 1, n, n, m))
    mapped = expanded @ T.reshape(layer.pos_w, (m, 1))
    return T.reshape(mapped, scores.shape) + layer.pos_b


def _slice_table(P: Tensor, n: int) -> Tensor:
    if n == P.shape[0]:
        return P

    def backward(g):
        full = np.zeros_like(P.data)
        full[:n, :n] = g
        return (full,)

    return Tensor._from_op(P.data[:n, :n], (P,), backward, "slice")


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``[n, n]`` mask, true where ``j > i`` (future positions)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def apply_causal_mask(scores: Tensor) -> Tensor:
    return T.masked_fill(scores, causal_mask(scores.shape[-1]), -np.inf)


def multi_head_attention(x: Tensor, layer: AttentionLayer, training: bool = False, rng=None) -> Tensor:
    """scores -> positional bias -> causal mask -> softmax -> weighted values -> W_o."""
    B, n, d = x.shape
    scores = attention_scores(x, layer)
    if layer.kind.variant == "kvpos":
        scores = add_positional_bias(scores, layer)
    layer.last_scores = scores.data
    if layer.causal:
        scores = apply_causal_mask(scores)
    weights = T.softmax_lastdim(scores)
    layer.last_weights = weights.data
    weights = T.dropout(weights, layer.dropout, rng, training)
    v = _split_heads(x @ layer.w_v, layer.n_heads)
    heads = (weights @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    return heads @ layer.w_o


# ---------------------------------------------------------------------------
# cost model

COST_CSV_HEADER = "kind,n,d,H,m,table1_flops,table1_params,full_layer_params,full_forward_flops"


@dataclass(frozen=True)
class CostReport:
    """Multiply-accumulate and parameter counts for one attention layer.

    ``table1_*`` count only the score-forming projections (Q and K, or K
    alone) plus the positional map. ``full_*`` add the value and output
    projections, the two ``n x n`` products, and the whole positional table.
    """

    kind: str
    n: int
    d: int
    H: int
    m: int
    table1_flops: int
    table1_params: int
    full_layer_params: int
    full_forward_flops: int

    def csv_row(self) -> str:
        return ",".join(
            str(v)
            for v in (
                self.kind, self.n, self.d, self.H, self.m, self.table1_flops,
                self.table1_params, self.full_layer_params, self.full_forward_flops,
            )
        )


def count_cost(kind: AttentionKind, n: int, d: int, H: int, m: int | None = None) -> CostReport:
    """Cost of one layer. ``m`` overrides ``kind.pos_dim`` (``m=0`` is allowed here)."""
    if min(n, d, H) < 1:
        raise ConfigError("n, d and H must all be >= 1")
    if d % H:
        raise ConfigError(f"d={d} is not divisible by H={H}")
    m = kind.m if m is None else int(m)
    if m < 0:
        raise ConfigError("m must be >= 0")
    proj = n * d * d
    if kind.variant == "qkv":
        t_flops, t_params = 2 * proj, 2 * d * d
    elif kind.variant == "kv":
        t_flops, t_params = proj, d * d
    else:
        t_flops, t_params = proj + n * n * m, d * d + m

    # scores and weighted sum: H heads x n^2 x (d/H) each
    pair_flops = 2 * n * n * d
    if kind.variant == "qkv":
        full_params = 4 * d * d
        full_flops = 4 * proj + pair_flops
    elif kind.variant == "kv":
        full_params = 3 * d * d
        full_flops = 3 * proj + pair_flops
    else:
        full_params = 3 * d * d + n * n * m + m + 1
        full_flops = 3 * proj + pair_flops + H * n * n * m
    return CostReport(kind.variant, n, d, H, m, t_flops, t_params, full_params, full_flops)

