"""Reference attention (source queries, reference keys/values) and baseline gates.

Pipeline for every gating mode::

    Q, K, V = H_src W_Q, H_ref W_K, H_ref W_V
    raw     = concat_h softmax(Q_h K_h^T / sqrt(d_h)) V_h
    out     = zero_linear(gate * to_out(raw)) + H_src      # before-zero-linear
    out     = zero_linear(to_out(gate * raw)) + H_src      # before-to-out

``gate`` is 1 for vanilla attention, one learned scalar for global gating, and
a per-source-token column for the explicit (cosine) and implicit (summary
token) gates.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (DimensionError, MacCounter, make_rng, matmul, merge_heads,
                     rand_matrix, row_softmax, sigmoid, split_heads)

# Token-to-token products (scores, weighted sums, similarity maps) are charged
# two units per multiply-add; weight projections one unit. See refgate.cost.
PAIR_CHARGE = 2


class GatingMode(str, enum.Enum):
    VANILLA = "vanilla"
    GLOBAL = "global"
    EXPLICIT = "explicit"
    AICG = "aicg"


class GatePlacement(str, enum.Enum):
    BEFORE_ZERO_LINEAR = "before-zero-linear"
    BEFORE_TO_OUT = "before-to-out"


class Aggregation(str, enum.Enum):
    LOGITS = "logits"
    SOFTMAX_OUTPUT = "softmax-output"


@dataclass(frozen=True)
class AttnConfig:
    L_src: int
    L_ref: int
    d: int
    heads: int = 1
    M: int = 16
    gating_mode: GatingMode = GatingMode.VANILLA
    gate_placement: GatePlacement = GatePlacement.BEFORE_ZERO_LINEAR
    aggregation: Aggregation = Aggregation.LOGITS

    def __post_init__(self):
        for name in ("L_src", "L_ref", "d", "heads", "M"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        # accept plain strings for the enum fields
        object.__setattr__(self, "gating_mode", GatingMode(self.gating_mode))
        object.__setattr__(self, "gate_placement", GatePlacement(self.gate_placement))
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def with_mode(self, mode: GatingMode | str) -> "AttnConfig":
        return dataclasses.replace(self, gating_mode=GatingMode(mode))


@dataclass
class RAWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    to_out: np.ndarray
    zero_linear: np.ndarray
    T_S: np.ndarray
    global_gate_logit: float = 0.0
    explicit_weight: float = 0.5

    MATRIX_FIELDS = ("W_Q", "W_K", "W_V", "to_out", "zero_linear", "T_S")

    @classmethod
    def init(cls, cfg: AttnConfig, seed: int = 0, *, zero_linear_scale: float = 0.0,
             global_gate_logit: float = 0.0) -> "RAWeights":
        """Seeded uniform init in [-1/sqrt(d), 1/sqrt(d)].

        ``zero_linear`` is all-zero unless ``zero_linear_scale`` is set, in
        which case it is drawn like the other projections times that scale.
        """
        rng = make_rng(seed)
        s = 1.0 / math.sqrt(cfg.d)
        d = cfg.d
        W_Q, W_K, W_V, to_out = (rand_matrix(d, d, rng, s) for _ in range(4))
        T_S = rand_matrix(cfg.M, d, rng, s)
        zl = rand_matrix(d, d, rng, s * zero_linear_scale) if zero_linear_scale else np.zeros((d, d))
        return cls(W_Q, W_K, W_V, to_out, zl, T_S, global_gate_logit=global_gate_logit)

    def check(self, cfg: AttnConfig) -> None:
        d = cfg.d
        for name in ("W_Q", "W_K", "W_V", "to_out", "zero_linear"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.T_S.shape != (cfg.M, d):
            raise DimensionError(f"T_S must be {cfg.M}x{d}, got {self.T_S.shape}")

    def replace(self, **changes) -> "RAWeights":
        return dataclasses.replace(self, **changes)


@dataclass
class AttnTrace:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    attn_weights: list[np.ndarray]   # one L_src x L_ref map per head
    raw_out: np.ndarray
    projected_out: np.ndarray        # to_out output
    pre_zero_linear: np.ndarray      # tensor multiplied by zero_linear
    final_out: np.ndarray
    gate: np.ndarray                 # L_src x 1, ones for vanilla
    mac_count: int = 0
    cache: dict | None = None


@dataclass
class GateMap:
    """Per-source-token gate plus the intermediates that produced it."""

    G: np.ndarray                              # L_src x 1
    aggregation: Aggregation | None = None
    S: np.ndarray | None = None                # M x d summary keys
    K_sum: np.ndarray | None = None            # M x d summarized reference keys
    summary_weights: list[np.ndarray] = field(default_factory=list)  # per head M x L_ref
    logit_map: list[np.ndarray] = field(default_factory=list)        # per head L_src x M
    S_map: list[np.ndarray] = field(default_factory=list)            # per head L_src x M
    similarity: np.ndarray | None = None       # explicit mode, L_src x L_ref


def _check_inputs(H_src: np.ndarray, H_ref: np.ndarray, cfg: AttnConfig) -> None:
    if H_src.shape != (cfg.L_src, cfg.d):
        raise DimensionError(f"H_src must be {cfg.L_src}x{cfg.d}, got {H_src.shape}")
    if H_ref.shape != (cfg.L_ref, cfg.d):
        raise DimensionError(f"H_ref must be {cfg.L_ref}x{cfg.d}, got {H_ref.shape}")


def _require_mode(cfg: AttnConfig, mode: GatingMode) -> None:
    if cfg.gating_mode is not mode:
        raise ValueError(f"config gating_mode is {cfg.gating_mode.value!r}, expected {mode.value!r}")


def project_qkv(H_src, H_ref, w: RAWeights, counter: MacCounter | None = None):
    """Q = H_src W_Q, K = H_ref W_K, V = H_ref W_V."""
    if H_src.shape[1] != w.W_Q.shape[0] or H_ref.shape[1] != w.W_K.shape[0]:
        raise DimensionError(
            f"feature width mismatch: H_src {H_src.shape}, H_ref {H_ref.shape}, W {w.W_Q.shape}")
    Q = matmul(H_src, w.W_Q, counter)
    K = matmul(H_ref, w.W_K, counter)
    V = matmul(H_ref, w.W_V, counter)
    return Q, K, V


def attend(Q, K, V, heads: int, counter: MacCounter | None = None):
    """Multi-head softmax attention. Returns (raw_out, per-head weights)."""
    dh = Q.shape[1] // heads
    scale = 1.0 / math.sqrt(dh)
    outs, weights = [], []
    for q, k, v in zip(split_heads(Q, heads), split_heads(K, heads), split_heads(V, heads)):
        a = row_softmax(matmul(q, k.T, counter, PAIR_CHARGE) * scale)
        outs.append(matmul(a, v, counter, PAIR_CHARGE))
        weights.append(a)
    return merge_heads(outs), weights


def fuse(raw, gate, H_src, w: RAWeights, placement: GatePlacement,
         counter: MacCounter | None = None):
    """Apply to_out, the gate, zero_linear and the residual.

    ``gate`` broadcasts against rows (L_src x 1 column or scalar).
    Returns (projected_out, pre_zero_linear, final_out).
    """
    if placement is GatePlacement.BEFORE_ZERO_LINEAR:
        projected = matmul(raw, w.to_out, counter)
        pre = gate * projected
    else:
        projected = matmul(gate * raw, w.to_out, counter)
        pre = projected
    final = matmul(pre, w.zero_linear, counter) + H_src
    return projected, pre, final


def gated_forward(H_src, H_ref, w: RAWeights, cfg: AttnConfig, gate_fn,
                  counter: MacCounter | None = None, cache: bool = False):
    """Shared forward: projections, attention, then the gate from ``gate_fn``.

    ``gate_fn(Q, K, counter)`` returns ``(gate_column, extra)``; ``extra`` is
    passed back to the caller untouched.
    """
    H_src = np.asarray(H_src, dtype=np.float64)
    H_ref = np.asarray(H_ref, dtype=np.float64)
    _check_inputs(H_src, H_ref, cfg)
    w.check(cfg)
    counter = counter if counter is not None else MacCounter()
    start = counter.mac_count

    Q, K, V = project_qkv(H_src, H_ref, w, counter)
    raw, weights = attend(Q, K, V, cfg.heads, counter)
    gate, extra = gate_fn(Q, K, counter)
    projected, pre, final = fuse(raw, gate, H_src, w, cfg.gate_placement, counter)

    trace = AttnTrace(
        Q=Q, K=K, V=V, attn_weights=weights, raw_out=raw, projected_out=projected,
        pre_zero_linear=pre, final_out=final,
        gate=np.broadcast_to(gate, (cfg.L_src, 1)).copy(),
        mac_count=counter.mac_count - start,
        cache={"H_src": H_src, "H_ref": H_ref} if cache else None,
    )
    return trace, extra


def _ones_gate(Q, K, counter):
    return np.ones((Q.shape[0], 1)), None


def ra_forward(H_src, H_ref, w: RAWeights, cfg: AttnConfig,
               counter: MacCounter | None = None, cache: bool = False) -> AttnTrace:
    """Vanilla reference attention: every token fully trusts the reference."""
    _require_mode(cfg, GatingMode.VANILLA)
    trace, _ = gated_forward(H_src, H_ref, w, cfg, _ones_gate, counter, cache)
    return trace


def global_gate_forward(H_src, H_ref, w: RAWeights, cfg: AttnConfig,
                        counter: MacCounter | None = None, cache: bool = False) -> AttnTrace:
    """One learned scalar sigmoid(global_gate_logit) scales the whole branch."""
    _require_mode(cfg, GatingMode.GLOBAL)
    g = float(sigmoid(np.array(w.global_gate_logit)))

    def gate_fn(Q, K, counter):
        return np.full((Q.shape[0], 1), g), None

    trace, _ = gated_forward(H_src, H_ref, w, cfg, gate_fn, counter, cache)
    return trace


def cosine_similarity(A, B, counter: MacCounter | None = None) -> np.ndarray:
    """Row-wise cosine similarity matrix; zero-norm rows give similarity 0."""
    def normalize(X):
        n = np.linalg.norm(X, axis=1, keepdims=True)
        return np.divide(X, n, out=np.zeros_like(X), where=n > 0)

    return matmul(normalize(A), normalize(B).T, counter, PAIR_CHARGE)


def explicit_gate(H_src, H_ref, weight: float, counter: MacCounter | None = None):
    """Per-source gate ``clip(weight * max_j cos(src_i, ref_j), 0, 1)``."""
    C = cosine_similarity(H_src, H_ref, counter)
    g = np.clip(weight * C.max(axis=1, keepdims=True), 0.0, 1.0)
    return g, C


def explicit_gate_forward(H_src, H_ref, w: RAWeights, cfg: AttnConfig,
                          counter: MacCounter | None = None, cache: bool = False):
    """Baseline gate from the full source-by-reference cosine matrix."""
    _require_mode(cfg, GatingMode.EXPLICIT)
    H_src = np.asarray(H_src, dtype=np.float64)
    H_ref = np.asarray(H_ref, dtype=np.float64)

    def gate_fn(Q, K, counter):
        g, C = explicit_gate(H_src, H_ref, w.explicit_weight, counter)
        return g, GateMap(G=g, similarity=C)

    return gated_forward(H_src, H_ref, w, cfg, gate_fn, counter, cache)
