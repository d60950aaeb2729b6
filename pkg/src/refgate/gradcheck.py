"""Hand-written reverse pass for the gated reference-attention block.

The graph is fixed: projections, per-head softmax attention, to_out, the
gate (global scalar, explicit cosine, or summary-token gate), zero_linear and
the residual. ``backward_scalar_loss`` walks it backwards using the values a
forward recorded with ``cache=True``; ``finite_difference`` is the independent
central-difference oracle used to check it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .aicg import forward
from .attention import (Aggregation, AttnConfig, AttnTrace, GatePlacement, GateMap,
                        GatingMode, RAWeights)
from .tensor import make_rng, merge_heads, rand_matrix, sigmoid, split_heads

PARAMS = ("W_Q", "W_K", "W_V", "to_out", "zero_linear", "T_S", "global_gate_logit")
REL_FLOOR = 1e-8


class UsageError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


# --- per-op backward rules ---------------------------------------------------

def matmul_backward(a, b, dout):
    return dout @ b.T, a.T @ dout


def softmax_backward(s, ds):
    """Row softmax: dx = s * (ds - rowsum(ds * s))."""
    return s * (ds - (ds * s).sum(axis=1, keepdims=True))


def sigmoid_backward(y, dy):
    return dy * y * (1.0 - y)


def scale_rows_backward(g, x, dout):
    """out = g * x with g an L x 1 column. Returns (dg, dx)."""
    return (dout * x).sum(axis=1, keepdims=True), g * dout


# --- composed graph ----------------------------------------------------------

def loss_value(final_out, target=None) -> float:
    r = final_out if target is None else final_out - target
    return float(np.sum(r * r))


def backward_scalar_loss(trace: AttnTrace, gate_map: GateMap | None, w: RAWeights,
                         cfg: AttnConfig, target=None) -> dict:
    """Gradients of ``sum((final_out - target)**2)`` w.r.t. every parameter.

    Returns a dict keyed by ``PARAMS``; ``global_gate_logit`` is a float.
    """
    if trace.cache is None:
        raise UsageError("trace was recorded without cache=True; cannot run backward")
    H_src, H_ref = trace.cache["H_src"], trace.cache["H_ref"]
    heads, scale = cfg.heads, 1.0 / math.sqrt(cfg.d_head)
    grads = {p: np.zeros_like(getattr(w, p)) for p in RAWeights.MATRIX_FIELDS}
    grads["global_gate_logit"] = 0.0

    d_final = 2.0 * (trace.final_out if target is None else trace.final_out - target)
    # final = pre @ zero_linear + H_src
    d_pre, grads["zero_linear"] = matmul_backward(trace.pre_zero_linear, w.zero_linear, d_final)
    g = trace.gate
    if cfg.gate_placement is GatePlacement.BEFORE_ZERO_LINEAR:
        # pre = g * (raw @ to_out)
        dg, d_proj = scale_rows_backward(g, trace.projected_out, d_pre)
        d_raw, grads["to_out"] = matmul_backward(trace.raw_out, w.to_out, d_proj)
    else:
        # pre = (g * raw) @ to_out
        d_graw, grads["to_out"] = matmul_backward(g * trace.raw_out, w.to_out, d_pre)
        dg, d_raw = scale_rows_backward(g, trace.raw_out, d_graw)

    Qh, Kh, Vh = (split_heads(x, heads) for x in (trace.Q, trace.K, trace.V))
    dQ_parts, dK_parts, dV_parts = [], [], []
    for h, d_out in enumerate(split_heads(d_raw, heads)):
        a = trace.attn_weights[h]
        dA, dV = matmul_backward(a, Vh[h], d_out)
        dS = softmax_backward(a, dA) * scale
        dQ, dKt = matmul_backward(Qh[h], Kh[h].T, dS)
        dQ_parts.append(dQ)
        dK_parts.append(dKt.T)
        dV_parts.append(dV)
    dQ, dK, dV = merge_heads(dQ_parts), merge_heads(dK_parts), merge_heads(dV_parts)

    if cfg.gating_mode is GatingMode.GLOBAL:
        s = float(sigmoid(np.array(w.global_gate_logit)))
        grads["global_gate_logit"] = float(dg.sum()) * s * (1.0 - s)
    elif cfg.gating_mode is GatingMode.AICG:
        dQ_gate, dK_gate, grads["T_S"], dWK_S = _gate_backward(dg, gate_map, trace, w, cfg)
        dQ = dQ + dQ_gate
        dK = dK + dK_gate
        grads["W_K"] += dWK_S
    # vanilla: no gate parameters; explicit: gate depends only on the inputs

    grads["W_Q"] = H_src.T @ dQ
    grads["W_K"] += H_ref.T @ dK
    grads["W_V"] = H_ref.T @ dV
    return grads


def _gate_backward(dg, gm: GateMap, trace: AttnTrace, w: RAWeights, cfg: AttnConfig):
    """Back through G = sigmoid(mean_{h,j} map_h[:, j]) and the summary pass."""
    heads, M = cfg.heads, cfg.M
    scale = 1.0 / math.sqrt(cfg.d_head)
    dm = sigmoid_backward(gm.G, dg) / (heads * M)        # L_src x 1
    Qh = split_heads(trace.Q, heads)
    Kh = split_heads(trace.K, heads)
    Ksh = split_heads(gm.K_sum, heads)
    Sh = split_heads(gm.S, heads)
    dQ_parts, dK_parts, dS_parts = [], [], []
    for h in range(heads):
        d_map = np.broadcast_to(dm, (cfg.L_src, M))
        if gm.aggregation is Aggregation.SOFTMAX_OUTPUT:
            d_logit = softmax_backward(gm.S_map[h], d_map)
        else:
            d_logit = d_map
        d_logit = d_logit * scale
        dQ, dKsT = matmul_backward(Qh[h], Ksh[h].T, d_logit)
        dKs = dKsT.T
        # K_sum = B @ K with B = softmax(S K^T * scale)
        b = gm.summary_weights[h]
        dB, dK_val = matmul_backward(b, Kh[h], dKs)
        dL = softmax_backward(b, dB) * scale
        dS, dKt = matmul_backward(Sh[h], Kh[h].T, dL)
        dQ_parts.append(dQ)
        dK_parts.append(dK_val + dKt.T)
        dS_parts.append(dS)
    dS = merge_heads(dS_parts)
    # S = T_S @ W_K
    dT_S, dWK = matmul_backward(w.T_S, w.W_K, dS)
    return merge_heads(dQ_parts), merge_heads(dK_parts), dT_S, dWK


# --- finite differences ------------------------------------------------------

def finite_difference(loss_fn, param, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn(p)`` for every entry of ``param``.

    ``param`` is not modified; ``loss_fn`` receives a perturbed copy.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    p = np.array(param, dtype=np.float64)
    scalar = p.ndim == 0
    p = np.atleast_2d(p).copy()
    grad = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + h
        up = loss_fn(p.reshape(()) if scalar else p.copy())
        p[idx] = orig - h
        down = loss_fn(p.reshape(()) if scalar else p.copy())
        p[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericalError(f"non-finite loss at entry {idx}: f(+h)={up}, f(-h)={down}")
        grad[idx] = (up - down) / (2.0 * h)
    return grad.reshape(()) if scalar else grad


@dataclass
class GradReport:
    param: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    max_abs_err: float
    fd_step: float

    def summary(self) -> dict:
        return {"param": self.param, "max_rel_err": self.max_rel_err,
                "max_abs_err": self.max_abs_err, "fd_step": self.fd_step,
                "analytic_norm": float(np.linalg.norm(self.analytic)),
                "numeric_norm": float(np.linalg.norm(self.numeric))}


def compare(param: str, analytic, numeric, h: float) -> GradReport:
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    f = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    diff = np.abs(a - f)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(f)), REL_FLOOR)
    return GradReport(param, a, f, float(rel.max()), float(diff.max()), h)


@dataclass
class GradCheckResult:
    seed: int
    config: dict
    reports: list[GradReport] = field(default_factory=list)
    loss: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.reports)

    def report(self, name: str) -> GradReport:
        return next(r for r in self.reports if r.param == name)


def make_problem(cfg: AttnConfig, seed: int, zero_linear_scale: float = 1.0):
    """Seeded O(1) inputs, weights and a regression target for gradient checks."""
    rng = make_rng(seed)
    H_src = rand_matrix(cfg.L_src, cfg.d, rng)
    H_ref = rand_matrix(cfg.L_ref, cfg.d, rng)
    target = rand_matrix(cfg.L_src, cfg.d, rng)
    w = RAWeights.init(cfg, seed + 1, zero_linear_scale=zero_linear_scale,
                       global_gate_logit=float(rng.uniform(-1, 1)))
    # unit-scale weights keep the attention maps away from one-hot saturation
    w = w.replace(**{p: getattr(w, p) * math.sqrt(cfg.d) for p in RAWeights.MATRIX_FIELDS})
    return H_src, H_ref, w, target


def _loss_with(H_src, H_ref, w, cfg, target, name, value) -> float:
    if name == "global_gate_logit":
        value = float(value)
    trace, _ = forward(H_src, H_ref, w.replace(**{name: value}), cfg)
    return loss_value(trace.final_out, target)


def check_gradients(cfg: AttnConfig, seed: int = 0, h: float = 1e-5,
                    params=PARAMS, backward=None, zero_linear_scale: float = 1.0) -> GradCheckResult:
    """Compare the analytic backward with central differences for each parameter."""
    backward = backward or backward_scalar_loss
    H_src, H_ref, w, target = make_problem(cfg, seed, zero_linear_scale)
    trace, gm = forward(H_src, H_ref, w, cfg, cache=True)
    grads = backward(trace, gm, w, cfg, target)
    result = GradCheckResult(seed=seed, config=config_dict(cfg),
                             loss=loss_value(trace.final_out, target))
    for name in params:
        numeric = finite_difference(
            lambda v, name=name: _loss_with(H_src, H_ref, w, cfg, target, name, v),
            getattr(w, name), h)
        result.reports.append(compare(name, grads[name], numeric, h))
    return result


def config_dict(cfg: AttnConfig) -> dict:
    out = asdict(cfg)
    for k in ("gating_mode", "gate_placement", "aggregation"):
        out[k] = out[k].value
    return out


def random_config(rng: np.random.Generator, **overrides) -> AttnConfig:
    """Small random shape for sweeps: L <= 6, d <= 8, M <= 3, heads in {1, 2}."""
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 8 // heads + 1))
    kw = dict(L_src=int(rng.integers(1, 7)), L_ref=int(rng.integers(1, 7)), d=d, heads=heads,
              M=int(rng.integers(1, 4)), gating_mode=GatingMode.AICG,
              gate_placement=list(GatePlacement)[int(rng.integers(0, 2))],
              aggregation=Aggregation.LOGITS)
    kw.update(overrides)
    return AttnConfig(**kw)
