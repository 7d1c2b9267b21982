"""Shared-attention transformer with static, token-type expert routing.

Every layer runs one multi-head self-attention over the whole sequence, then
sends each token through one of two gated FFNs: expert 0 for vision-language
tokens, expert 1 for target-point, ego-state and action tokens. Outputs are
scattered back to their original positions with the residual added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import MASK_VALUE, Tensor
from .tokenizer import ACTION_TYPES, InterleavedSequence, TokenType


@dataclass
class ExpertParams:
    gate: Tensor  # (d, d_ff)
    up: Tensor  # (d, d_ff)
    down: Tensor  # (d_ff, d)


@dataclass
class RoutedLayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_attn: Tensor
    ln_ffn: Tensor
    experts: tuple[ExpertParams, ExpertParams]


def build_mask(tags: Sequence[TokenType], decoupled: bool = False) -> np.ndarray:
    """Causal mask, except noisy action tokens see each other in both directions.

    With ``decoupled`` the action tokens see only the action block, so they
    take no part in attention over the rest of the sequence.
    """
    n = len(tags)
    if n == 0:
        raise ConfigError("cannot build a mask for an empty sequence")
    is_act = np.array([t in ACTION_TYPES for t in tags])
    allowed = np.tril(np.ones((n, n), dtype=bool))
    allowed |= is_act[:, None] & is_act[None, :]
    if decoupled:
        allowed &= ~(is_act[:, None] & ~is_act[None, :])
    return np.where(allowed, 0.0, MASK_VALUE)


def shared_attention(h: Tensor, layer: RoutedLayerParams, mask: np.ndarray, heads: int) -> Tensor:
    """Pre-norm residual multi-head attention: h + Attn(LN(h))."""
    d = h.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    n = h.shape[-2]
    lead = h.shape[:-2]
    x = nx.layer_norm(h, layer.ln_attn)

    def split(t: Tensor) -> Tensor:
        t = nx.reshape(t, (*lead, n, heads, dh))
        return nx.transpose(t, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))

    q = split(nx.matmul(x, layer.wq))
    k = split(nx.matmul(x, layer.wk))
    v = split(nx.matmul(x, layer.wv))
    kt = nx.transpose(k, (*range(len(lead) + 1), len(lead) + 2, len(lead) + 1))
    scores = nx.scale(nx.matmul(q, kt), 1.0 / math.sqrt(dh))
    attn = nx.masked_softmax(scores, mask)
    ctx = nx.matmul(attn, v)  # (..., heads, n, dh)
    ctx = nx.transpose(ctx, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))
    ctx = nx.reshape(ctx, (*lead, n, d))
    return nx.add(h, nx.matmul(ctx, layer.wo))


def route_gather(h: Tensor, index) -> Tensor:
    """Rows of ``h`` (token axis -2) at ascending positions ``index``."""
    return nx.take(h, index, axis=-2)


def expert_ffn(x: Tensor, expert: ExpertParams) -> Tensor:
    """[silu(x Wg) * (x Wu)] Wd."""
    gated = nx.mul(nx.silu(nx.matmul(x, expert.gate)), nx.matmul(x, expert.up))
    return nx.matmul(gated, expert.down)


def merge_back(h_tilde: Tensor, vl_out: Tensor, act_out: Tensor, vl_idx, act_idx) -> Tensor:
    """Scatter both expert outputs to their positions and add the residual."""
    n = h_tilde.shape[-2]
    routed = nx.scatter(n, [(vl_out, np.asarray(vl_idx)), (act_out, np.asarray(act_idx))], axis=-2)
    return nx.add(h_tilde, routed)


def layer_forward(
    h: Tensor,
    layer: RoutedLayerParams,
    mask: np.ndarray,
    vl_idx,
    act_idx,
    heads: int,
) -> Tensor:
    """Attention over all tokens, then per-group LN + expert FFN, then merge."""
    h_tilde = shared_attention(h, layer, mask, heads)
    vl_in = nx.layer_norm(route_gather(h_tilde, vl_idx), layer.ln_ffn)
    act_in = nx.layer_norm(route_gather(h_tilde, act_idx), layer.ln_ffn)
    vl_out = expert_ffn(vl_in, layer.experts[0])
    act_out = expert_ffn(act_in, layer.experts[1])
    return merge_back(h_tilde, vl_out, act_out, vl_idx, act_idx)


def model_forward(
    seq: InterleavedSequence | Tensor,
    layers: Sequence[RoutedLayerParams],
    mask: np.ndarray,
    vl_idx,
    act_idx,
    heads: int,
) -> Tensor:
    """Run the layer stack from H^(0) = the sequence embeddings; returns H^(L)."""
    h = seq.embeddings if isinstance(seq, InterleavedSequence) else seq
    widths = {h.shape[-1]} | {layer.wq.shape[0] for layer in layers}
    if len(widths) != 1:
        raise ConfigError(f"inconsistent model widths across layers: {sorted(widths)}")
    for layer in layers:
        h = layer_forward(h, layer, mask, vl_idx, act_idx, heads)
    return h
