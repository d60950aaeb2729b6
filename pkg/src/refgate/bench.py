"""Wall-clock comparison of the four gating modes.

Every (config, mode) pair gets the same seeded inputs, a residual-identity
sanity pass, ``warmup`` untimed forwards and ``repetitions`` timed ones.
Timing is single-threaded (BLAS pools are pinned to one worker) and
summarized by median and median absolute deviation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .aicg import forward
from .attention import AttnConfig, GatingMode, RAWeights
from .cost import EXPECTED_BY_MODE, Convention, CostInputs
from .tensor import MacCounter, make_rng, rand_matrix

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_SIZES = (256, 1024, 4096)
ORDERING_MIN_L = 1024
CSV_FIELDS = ("L_src", "L_ref", "d", "heads", "M", "mode", "median_ns", "mad_ns",
              "macs", "macs_per_s", "skipped")


class ClockError(RuntimeError):
    pass


@dataclass
class BenchSpec:
    configs: list[AttnConfig]
    modes: tuple[GatingMode, ...] = tuple(GatingMode)
    repetitions: int = 5
    warmup: int = 1
    seed: int = 0
    mem_cap_bytes: int = 1 << 30   # per-head L_src x L_ref float64 map
    min_time_s: float = 2.0        # per mode; short configs get extra repetitions
    max_repetitions: int = 100

    def __post_init__(self):
        if self.repetitions < 5:
            raise ValueError(f"repetitions must be >= 5, got {self.repetitions}")
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        if self.min_time_s < 0:
            raise ValueError(f"min_time_s must be >= 0, got {self.min_time_s}")
        self.max_repetitions = max(self.max_repetitions, self.repetitions)

    def repetitions_for(self, forward_ns: int) -> int:
        """At least ``repetitions``, more when one forward is short of ``min_time_s``."""
        wanted = math.ceil(self.min_time_s * 1e9 / max(forward_ns, 1))
        return min(max(self.repetitions, wanted), self.max_repetitions)

    @classmethod
    def ladder(cls, sizes=DEFAULT_SIZES, d: int = 256, M: int = 16, heads: int = 4, **kw):
        return cls([AttnConfig(L, L, d, heads, M) for L in sizes], **kw)


@dataclass
class BenchResult:
    L_src: int
    L_ref: int
    d: int
    heads: int
    M: int
    mode: str
    median_ns: int = 0
    mad_ns: int = 0
    macs: int = 0
    macs_per_s: float = 0.0
    skipped: str = ""
    times_ns: list[int] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def median_mad(samples) -> tuple[float, float]:
    x = np.asarray(samples, dtype=np.float64)
    med = float(np.median(x))
    return med, float(np.median(np.abs(x - med)))


def _timed(fn) -> int:
    for _ in range(2):
        t0 = time.perf_counter_ns()
        fn()
        t1 = time.perf_counter_ns()
        if t1 > t0:
            return t1 - t0
        log.warning("non-increasing clock reading (%d -> %d), retrying", t0, t1)
    raise ClockError("clock did not advance across a forward pass twice in a row")


def residual_identity_ok(H_src, H_ref, w: RAWeights, cfg: AttnConfig) -> bool:
    """With zero_linear = 0 the block must return H_src exactly."""
    trace, _ = forward(H_src, H_ref, w.replace(zero_linear=np.zeros_like(w.zero_linear)), cfg)
    return bool(np.array_equal(trace.final_out, H_src))


def _prepare(cfg: AttnConfig, mode: GatingMode, spec: BenchSpec):
    """Result shell plus inputs for one (config, mode) pair; inputs are None if skipped."""
    cfg = cfg.with_mode(mode)
    res = BenchResult(cfg.L_src, cfg.L_ref, cfg.d, cfg.heads, cfg.M, mode.value)
    map_bytes = cfg.L_src * cfg.L_ref * 8
    if map_bytes > spec.mem_cap_bytes:
        res.skipped = f"attention map {map_bytes} B exceeds cap {spec.mem_cap_bytes} B"
        return res, None

    rng = make_rng(spec.seed)
    H_src = rand_matrix(cfg.L_src, cfg.d, rng)
    H_ref = rand_matrix(cfg.L_ref, cfg.d, rng)
    w = RAWeights.init(cfg, spec.seed, zero_linear_scale=1.0)

    if not residual_identity_ok(H_src, H_ref, w, cfg):
        res.skipped = "residual-identity sanity check failed"
        return res, None
    res.macs = EXPECTED_BY_MODE[mode](
        CostInputs(cfg.L_src, cfg.L_ref, cfg.d, cfg.M, Convention.INSTRUMENTED))
    return res, (H_src, H_ref, w, cfg)


def _run_once(res: BenchResult, job, counter: MacCounter) -> int:
    H_src, H_ref, w, cfg = job
    counter.mac_count = 0
    ns = _timed(lambda: forward(H_src, H_ref, w, cfg, counter))
    if counter.mac_count != res.macs:
        raise AssertionError(
            f"{res.mode} L={res.L_src}: counted {counter.mac_count} MACs, expected {res.macs}")
    return ns


def _bench_config(cfg: AttnConfig, spec: BenchSpec) -> list[BenchResult]:
    """Time every mode for one shape.

    Modes are interleaved within each repetition so slow drift in machine
    load lands on all of them alike. All modes get the same repetition count,
    sized from the slowest warmup forward.
    """
    prepared = [_prepare(cfg, mode, spec) for mode in spec.modes]
    live = [(res, job) for res, job in prepared if job is not None]
    counter = MacCounter()
    slowest = 0
    for _ in range(spec.warmup):
        for res, job in live:
            slowest = max(slowest, _run_once(res, job, counter))
    for _ in range(spec.repetitions_for(slowest)):
        for res, job in live:
            res.times_ns.append(_run_once(res, job, counter))
    for res, _ in live:
        med, mad = median_mad(res.times_ns)
        res.median_ns, res.mad_ns = int(round(med)), int(round(mad))
        res.macs_per_s = res.macs / (med * 1e-9)
    return [res for res, _ in prepared]


def run_bench(spec: BenchSpec) -> list[BenchResult]:
    results = []
    with threadpool_limits(limits=1):
        for cfg in spec.configs:
            for r in _bench_config(cfg, spec):
                log.info("%s L=%d: median %.3f ms (MAD %.3f ms)%s", r.mode, r.L_src,
                         r.median_ns / 1e6, r.mad_ns / 1e6,
                         f" skipped: {r.skipped}" if r.skipped else "")
                results.append(r)
    return results


def ordering_violations(results: list[BenchResult], min_L: int = ORDERING_MIN_L) -> list[str]:
    """Rows where the implicit gate's overhead is not below the explicit one's.

    Only sizes with L_src >= ``min_L`` and all three modes timed are checked.
    """
    by_key: dict[tuple, dict[str, BenchResult]] = {}
    for r in results:
        by_key.setdefault((r.L_src, r.L_ref, r.d, r.heads, r.M), {})[r.mode] = r
    bad = []
    for key, modes in by_key.items():
        if key[0] < min_L:
            continue
        try:
            van, exp, imp = (modes[m.value] for m in
                             (GatingMode.VANILLA, GatingMode.EXPLICIT, GatingMode.AICG))
        except KeyError:
            continue
        if van.skipped or exp.skipped or imp.skipped:
            continue
        over_imp = imp.median_ns - van.median_ns
        over_exp = exp.median_ns - van.median_ns
        if not over_imp < over_exp:
            bad.append(f"L_src={key[0]} L_ref={key[1]} d={key[2]}: aicg overhead {over_imp} ns "
                       f">= explicit overhead {over_exp} ns")
    return bad


def ordering_checked(results: list[BenchResult], min_L: int = ORDERING_MIN_L) -> bool:
    return any(r.L_src >= min_L and not r.skipped for r in results)


def to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.row())
    return buf.getvalue()


def to_json(results: list[BenchResult], **extra) -> str:
    payload = {"schema_version": SCHEMA_VERSION,
               "results": [asdict(r) for r in results], **extra}
    return json.dumps(payload, indent=2)
