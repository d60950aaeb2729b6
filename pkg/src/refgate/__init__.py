"""Reference attention with implicit correlation gating.

Kernels, the gated attention block, an analytic backward with a
finite-difference checker, a closed-form MAC cost model and a wall-clock
benchmark harness.
"""

from .aicg import aicg_forward, compute_gate, forward, summarize_reference
from .attention import (Aggregation, AttnConfig, AttnTrace, GateMap, GatePlacement,
                        GatingMode, RAWeights, explicit_gate_forward, global_gate_forward,
                        project_qkv, ra_forward)
from .tensor import (DimensionError, MacCounter, make_rng, matmul, rand_matrix,
                     row_softmax, sigmoid)

__version__ = "0.1.0"
