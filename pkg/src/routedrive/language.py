"""Instruction decoding from the vision-language hidden states."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from . import tokenizer as tk
from .errors import ContractError
from .numerics import Tensor


def lm_logits(h_vl: Tensor, w_out: Tensor) -> Tensor:
    if h_vl.shape[-2] < 1:
        raise ContractError("lm_logits needs at least one vision-language position")
    return nx.matmul(h_vl, w_out)


def lm_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-symbol negative log-likelihood over the masked positions."""
    return nx.cross_entropy(logits, targets, np.asarray(loss_mask, dtype=np.float64))


def text_positions(seq: tk.InterleavedSequence, n_text: int) -> np.ndarray:
    """Sequence positions whose logits predict the instruction symbols.

    These are the last ``n_text`` command-span positions (BOS and every
    teacher-forced symbol except the final one).
    """
    lo, hi = seq.spans["command"]
    if hi - lo < n_text:
        raise ContractError(f"command span of {hi - lo} tokens cannot host {n_text} predictions")
    return np.arange(hi - n_text, hi)


def language_loss(model, batch, h: Tensor | None = None, seq=None) -> Tensor:
    """Instruction loss for a teacher-forced batch; reuses ``h`` when given."""
    if batch.text_targets is None:
        raise ContractError("batch carries no instruction targets")
    if h is None or seq is None:
        seq = model.sequence(batch)
        h = model.forward(seq)
    vl, _, _ = model.routing(seq.tags)
    n_text = batch.text_targets.shape[1]
    pos = text_positions(seq, n_text)
    rank = {int(p): r for r, p in enumerate(vl)}
    if any(int(p) not in rank for p in pos):
        # language positions are not routed through the VL expert (single-expert
        # ablation); read them straight from the full hidden sequence instead
        cols, gathered = pos, h
    else:
        cols, gathered = np.array([rank[int(p)] for p in pos]), nx.take(h, vl, axis=-2)
    logits = lm_logits(gathered, model.p("lm_head.w"))
    targets = np.zeros(logits.shape[:-1], dtype=np.int64)
    weights = np.zeros(logits.shape[:-1])
    targets[:, cols] = batch.text_targets
    weights[:, cols] = 1.0
    return lm_loss(logits, targets, weights)


def greedy_decode(model, batch, max_len: int = 16) -> list[list[int]]:
    """Argmax decoding appended to the command span; stops at EOS or ``max_len``.

    Only the language prefix is forwarded: the causal layout makes every
    later token irrelevant to these logits. Ties go to the lowest id.
    """
    if max_len < 1 or max_len > 16:
        raise ContractError(f"max_len must be in [1, 16], got {max_len}")
    b = len(batch)
    text = np.zeros((b, 0), dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    w_out = model.p("lm_head.w")
    for _ in range(max_len):
        step = batch.with_text(text)
        seq = model.sequence(step)
        h = model.forward(seq)
        last = nx.take(h, [len(seq) - 1], axis=-2)
        nxt = np.argmax(lm_logits(last, w_out).data[:, 0, :], axis=-1)
        nxt = np.where(done, tk.EOS, nxt)
        text = np.concatenate([text, nxt[:, None]], axis=1)
        done |= nxt == tk.EOS
        if done.all():
            break
    out = []
    for row in text:
        ids = [int(t) for t in row]
        if tk.EOS in ids:
            ids = ids[: ids.index(tk.EOS) + 1]
        out.append(ids)
    return out
