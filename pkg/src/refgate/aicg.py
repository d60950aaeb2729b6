"""Implicit correlation gating through a handful of summary tokens.

The M summary tokens are mapped into key space with the attention's own W_K,
attend over the reference keys to form M summarized keys, and every source
query is scored against those M keys. The mean score (over summary tokens and
heads) goes through a sigmoid to give one gate per source token.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import (PAIR_CHARGE, Aggregation, AttnConfig, AttnTrace, GateMap,
                        GatingMode, RAWeights, _require_mode, explicit_gate_forward,
                        gated_forward, global_gate_forward, ra_forward)
from .tensor import (DimensionError, MacCounter, matmul, merge_heads, row_softmax,
                     sigmoid, split_heads)

__all__ = ["GateMap", "summarize_reference", "compute_gate", "aggregate_gate",
           "aicg_forward", "forward"]


def summarize_reference(T_S, K, W_K, cfg: AttnConfig, counter: MacCounter | None = None):
    """Compress L_ref keys into M summarized keys.

    Returns ``(S, K_sum, weights)`` where ``S = T_S W_K`` and per head
    ``K_sum_h = softmax(S_h K_h^T / sqrt(d_h)) K_h``.
    """
    if T_S.shape[1] != W_K.shape[0] or K.shape[1] != W_K.shape[1]:
        raise DimensionError(f"T_S {T_S.shape}, K {K.shape} and W_K {W_K.shape} do not line up")
    S = matmul(T_S, W_K, counter)
    scale = 1.0 / math.sqrt(cfg.d_head)
    parts, weights = [], []
    for s, k in zip(split_heads(S, cfg.heads), split_heads(K, cfg.heads)):
        b = row_softmax(matmul(s, k.T, counter) * scale)
        parts.append(matmul(b, k, counter))
        weights.append(b)
    return S, merge_heads(parts), weights


def aggregate_gate(maps: list[np.ndarray]) -> np.ndarray:
    """sigmoid of the joint mean over heads and columns -> L_src x 1."""
    stacked = np.stack(maps)            # heads x L_src x M
    return sigmoid(stacked.mean(axis=(0, 2))[:, None])


def compute_gate(Q, K_sum, cfg: AttnConfig, counter: MacCounter | None = None) -> GateMap:
    """Score source queries against the summarized keys and reduce to a gate.

    In ``Aggregation.LOGITS`` mode the scores themselves are averaged. In
    ``Aggregation.SOFTMAX_OUTPUT`` mode the row-softmaxed scores are averaged,
    which always yields 1/M, so every gate equals sigmoid(1/M).
    """
    if Q.shape[1] != K_sum.shape[1]:
        raise DimensionError(f"Q {Q.shape} and K_sum {K_sum.shape} widths differ")
    scale = 1.0 / math.sqrt(cfg.d_head)
    logits = [matmul(q, k.T, counter, PAIR_CHARGE) * scale
              for q, k in zip(split_heads(Q, cfg.heads), split_heads(K_sum, cfg.heads))]
    smaps = [row_softmax(x) for x in logits]
    if cfg.aggregation is Aggregation.LOGITS:
        G = aggregate_gate(logits)
    else:
        G = aggregate_gate(smaps)
    return GateMap(G=G, aggregation=cfg.aggregation, K_sum=K_sum, logit_map=logits, S_map=smaps)


def aicg_forward(H_src, H_ref, w: RAWeights, cfg: AttnConfig,
                 counter: MacCounter | None = None, cache: bool = False,
                 gate_override: np.ndarray | None = None) -> tuple[AttnTrace, GateMap]:
    """Reference attention modulated by the implicit correlation gate.

    ``gate_override`` replaces the computed gate in the fusion step (the gate
    map is still computed and returned); useful for ablations.
    """
    _require_mode(cfg, GatingMode.AICG)

    def gate_fn(Q, K, counter):
        S, K_sum, weights = summarize_reference(w.T_S, K, w.W_K, cfg, counter)
        gm = compute_gate(Q, K_sum, cfg, counter)
        gm.S = S
        gm.summary_weights = weights
        g = gm.G if gate_override is None else np.asarray(gate_override, dtype=np.float64)
        return g, gm

    return gated_forward(H_src, H_ref, w, cfg, gate_fn, counter, cache)


def forward(H_src, H_ref, w: RAWeights, cfg: AttnConfig,
            counter: MacCounter | None = None, cache: bool = False):
    """Dispatch on ``cfg.gating_mode``. Always returns ``(trace, gate_map)``.

    The gate map is None for the vanilla and global modes.
    """
    mode = cfg.gating_mode
    if mode is GatingMode.VANILLA:
        return ra_forward(H_src, H_ref, w, cfg, counter, cache), None
    if mode is GatingMode.GLOBAL:
        return global_gate_forward(H_src, H_ref, w, cfg, counter, cache), None
    if mode is GatingMode.EXPLICIT:
        return explicit_gate_forward(H_src, H_ref, w, cfg, counter, cache)
    return aicg_forward(H_src, H_ref, w, cfg, counter, cache)
