"""Token mixers: vanilla self-attention, vanilla cross-attention, and strip
cross-attention, plus brute-force oracles for equivalence testing.

Strip attention compresses the query and key channels to one scalar per head
per token, so the per-head score matrix costs N_q*N_kv multiplies instead of
N_q*N_kv*dim_head, while values keep full width.

Head layout convention (fixed so tests are deterministic): projection output
channel h is head h's strip logit; value channels [h*dim_head, (h+1)*dim_head)
belong to head h. Attention maps are retained on the output for inspection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .synth import RandomStream, normal_array
from .tensor import (
    LinearParams,
    ShapeError,
    Tensor,
    linear,
    mac_region,
    matmul,
    reshape,
    scalar_mul,
    softmax_lastdim,
    transpose,
)


@dataclass
class VanillaAttnParams:
    """Full-width multi-head attention projections.

    wq maps C_q -> heads*dim_head, wk and wv map C_kv -> heads*dim_head,
    wo maps heads*dim_head -> C_q. scale defaults to 1/sqrt(dim_head).
    """

    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    heads: int
    dim_head: int
    scale: float


@dataclass
class SCAParams:
    """Strip cross-attention projections.

    wq maps C_q -> heads (one strip logit per head per token), wk maps
    C_kv -> heads, wv maps C_kv -> heads*dim_head, wo maps heads*dim_head
    back to C_q. scale defaults to 1.0: the compressed key embedding is
    one-dimensional, so sqrt(d_k) = 1.
    """

    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    heads: int
    dim_head: int
    scale: float


@dataclass
class AttnOutput:
    out: Tensor
    attn: Tensor


def _init_linear(stream: RandomStream, out_dim: int, in_dim: int, std: float) -> LinearParams:
    return LinearParams(
        weight=normal_array(stream, (out_dim, in_dim)) * std,
        bias=np.zeros(out_dim),
    )


def init_vanilla_params(
    c_q: int,
    c_kv: int,
    heads: int,
    dim_head: int,
    stream: RandomStream,
    std: float = 0.02,
    scale: Optional[float] = None,
) -> VanillaAttnParams:
    inner = heads * dim_head
    return VanillaAttnParams(
        wq=_init_linear(stream, inner, c_q, std),
        wk=_init_linear(stream, inner, c_kv, std),
        wv=_init_linear(stream, inner, c_kv, std),
        wo=_init_linear(stream, c_q, inner, std),
        heads=heads,
        dim_head=dim_head,
        scale=1.0 / math.sqrt(dim_head) if scale is None else scale,
    )


def init_sca_params(
    c_q: int,
    c_kv: int,
    heads: int,
    dim_head: int,
    stream: RandomStream,
    std: float = 0.02,
    scale: Optional[float] = None,
) -> SCAParams:
    return SCAParams(
        wq=_init_linear(stream, heads, c_q, std),
        wk=_init_linear(stream, heads, c_kv, std),
        wv=_init_linear(stream, heads * dim_head, c_kv, std),
        wo=_init_linear(stream, c_q, heads * dim_head, std),
        heads=heads,
        dim_head=dim_head,
        scale=1.0 if scale is None else scale,
    )


def _split_heads(x: Tensor, heads: int, dim: int) -> Tensor:
    b, n, _ = x.shape
    return transpose(reshape(x, (b, n, heads, dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def _attend(q: Tensor, k: Tensor, v: Tensor, wo: LinearParams, scale: float) -> AttnOutput:
    """Shared score/softmax/mix/project path; q, k, v are [B, heads, N, d]."""
    with mac_region("attn_scores"):
        scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    attn = softmax_lastdim(scalar_mul(scores, scale))
    with mac_region("attn_mix"):
        mixed = matmul(attn, v)
    with mac_region("out_proj"):
        out = linear(_merge_heads(mixed), wo)
    return AttnOutput(out=out, attn=attn)


def self_attention(x: Tensor, p: VanillaAttnParams) -> AttnOutput:
    """Multi-head scaled dot-product attention with shared q/k/v source."""
    return cross_attention(x, x, p)


def cross_attention(xq: Tensor, xkv: Tensor, p: VanillaAttnParams) -> AttnOutput:
    """As self-attention, but queries come from xq and keys/values from xkv."""
    if xq.data.ndim != 3 or xkv.data.ndim != 3:
        raise ShapeError(f"attention inputs must be [B,N,C], got {xq.shape} and {xkv.shape}")
    with mac_region("qk_proj"):
        q = _split_heads(linear(xq, p.wq), p.heads, p.dim_head)
        k = _split_heads(linear(xkv, p.wk), p.heads, p.dim_head)
    with mac_region("v_proj"):
        v = _split_heads(linear(xkv, p.wv), p.heads, p.dim_head)
    return _attend(q, k, v, p.wo, p.scale)


def strip_cross_attention(xq: Tensor, xkv: Tensor, p: SCAParams) -> AttnOutput:
    """Cross-attention with per-head scalar strips for queries and keys."""
    if xq.data.ndim != 3 or xkv.data.ndim != 3:
        raise ShapeError(f"attention inputs must be [B,N,C], got {xq.shape} and {xkv.shape}")
    with mac_region("qk_proj"):
        q = _split_heads(linear(xq, p.wq), p.heads, 1)
        k = _split_heads(linear(xkv, p.wk), p.heads, 1)
    with mac_region("v_proj"):
        v = _split_heads(linear(xkv, p.wv), p.heads, p.dim_head)
    return _attend(q, k, v, p.wo, p.scale)


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------
# Explicit scalar loops sharing no code with the kernels above; used as the
# independent reference in equivalence tests. Parameters are the storage-side
# bundles (plain numpy arrays).


def _oracle_linear(x_row, weight, bias):
    out = np.empty(weight.shape[0])
    for o in range(weight.shape[0]):
        acc = 0.0
        for i in range(weight.shape[1]):
            acc += x_row[i] * weight[o, i]
        out[o] = acc + (bias[o] if bias is not None else 0.0)
    return out


def _oracle_softmax(logits):
    hi = max(logits)
    exps = [math.exp(v - hi) for v in logits]
    denom = sum(exps)
    return [e / denom for e in exps]


def _oracle_mix(xq, xkv, heads, dim_head, qk_dim, pq, pk, pv, po, scale):
    b_sz, n_q, _ = xq.shape
    n_kv = xkv.shape[1]
    c_q = po.weight.shape[0]
    out = np.zeros((b_sz, n_q, c_q))
    for b in range(b_sz):
        q_rows = [_oracle_linear(xq[b, n], pq.weight, pq.bias) for n in range(n_q)]
        k_rows = [_oracle_linear(xkv[b, m], pk.weight, pk.bias) for m in range(n_kv)]
        v_rows = [_oracle_linear(xkv[b, m], pv.weight, pv.bias) for m in range(n_kv)]
        for n in range(n_q):
            mixed = np.zeros(heads * dim_head)
            for h in range(heads):
                logits = []
                for m in range(n_kv):
                    acc = 0.0
                    for d in range(qk_dim):
                        acc += q_rows[n][h * qk_dim + d] * k_rows[m][h * qk_dim + d]
                    logits.append(scale * acc)
                weights = _oracle_softmax(logits)
                for d in range(dim_head):
                    acc = 0.0
                    for m in range(n_kv):
                        acc += weights[m] * v_rows[m][h * dim_head + d]
                    mixed[h * dim_head + d] = acc
            out[b, n] = _oracle_linear(mixed, po.weight, po.bias)
    return out


def oracle_attention(xq: np.ndarray, xkv: np.ndarray, p: VanillaAttnParams) -> np.ndarray:
    """Loop-based reference for vanilla self/cross attention."""
    return _oracle_mix(
        np.asarray(xq, dtype=np.float64),
        np.asarray(xkv, dtype=np.float64),
        p.heads,
        p.dim_head,
        p.dim_head,
        p.wq,
        p.wk,
        p.wv,
        p.wo,
        p.scale,
    )


def oracle_strip_attention(xq: np.ndarray, xkv: np.ndarray, p: SCAParams) -> np.ndarray:
    """Loop-based reference for strip cross-attention (qk width 1 per head)."""
    return _oracle_mix(
        np.asarray(xq, dtype=np.float64),
        np.asarray(xkv, dtype=np.float64),
        p.heads,
        p.dim_head,
        1,
        p.wq,
        p.wk,
        p.wv,
        p.wo,
        p.scale,
    )
