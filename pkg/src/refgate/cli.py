"""Command-line entry point: ``refgate <subcommand> [options]``.

Subcommands: demo, gate-export, gradcheck, flops, bench.

Settings resolve in this order (later wins): built-in defaults, the
``--config`` file, the ``REFGATE_OUT_DIR`` environment variable (output
directory only), then command-line flags.

The config file is flat ``key = value`` text; keys are the long flag names
with or without the leading dashes, ``#`` starts a comment::

    L-src = 64
    L-ref = 64
    d = 32
    M = 4
    aggregation = logits
    seed = 7

Exit codes: 0 success, 1 check failed, 2 usage or config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .aicg import forward
from .attention import Aggregation, AttnConfig, GatePlacement, GatingMode, RAWeights
from .cost import (Convention, CostInputs, cost_report, dominant_ratio, format_table,
                   implicit_added, ratio_ladder)
from .export import read_matrix_csv, square_side, write_gate_csv, write_gate_pgm
from .gradcheck import check_gradients, config_dict
from .tensor import make_rng, rand_matrix

log = logging.getLogger("refgate")

SCHEMA_VERSION = 1
OUT_DIR_ENV = "REFGATE_OUT_DIR"
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
FD_BUDGET = 10**6
GRAD_TOL = 1e-4
DEAD_GRAD_TOL = 1e-10


class UsageError(Exception):
    pass


class OutputError(Exception):
    pass


@dataclass
class RunConfig:
    L_src: int = 4096
    L_ref: int = 4096
    d: int = 1024
    heads: int = 1
    M: int = 16
    gating_mode: str = "aicg"
    gate_placement: str = "before-zero-linear"
    aggregation: str = "logits"
    seed: int = 0
    out_dir: str = "refgate-out"
    format: str = "table"
    zero_linear_scale: float = 1.0
    src_features: str | None = None
    ref_features: str | None = None
    # gate-export
    pgm: str = "auto"
    # gradcheck
    fd_step: float = 1e-5
    # flops
    paper_base: float | None = None
    asymptotic: bool = False
    # bench
    sizes: str = "256,1024,4096"
    repetitions: int = 5
    warmup: int = 1
    mem_cap: int = 1 << 30
    min_time: float = 2.0

    def attn_config(self, **overrides) -> AttnConfig:
        kw = dict(L_src=self.L_src, L_ref=self.L_ref, d=self.d, heads=self.heads, M=self.M,
                  gating_mode=self.gating_mode, gate_placement=self.gate_placement,
                  aggregation=self.aggregation)
        kw.update(overrides)
        try:
            return AttnConfig(**kw)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
CHOICES = {
    "gating_mode": [m.value for m in GatingMode],
    "gate_placement": [m.value for m in GatePlacement],
    "aggregation": [m.value for m in Aggregation],
    "format": ["json", "csv", "table"],
    "pgm": ["auto", "yes", "no"],
}


def _coerce(key: str, value):
    """Convert a string from the config file to the field's type."""
    kind = FIELD_TYPES[key]
    try:
        if "bool" in kind:
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if "int" in kind:
            return int(value)
        if "float" in kind:
            return float(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r} as {kind}") from None
    value = str(value)
    if key in CHOICES and value not in CHOICES[key]:
        raise UsageError(f"{key}: {value!r} is not one of {CHOICES[key]}")
    return value


def _norm_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"config: cannot read {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config {path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        name = _norm_key(key)
        if name == "L":
            out["L_src"] = out["L_ref"] = _coerce("L_src", value)
            continue
        if name not in FIELD_TYPES:
            raise UsageError(f"config {path}:{lineno}: unknown key {key!r}")
        out[name] = _coerce(name, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    sup = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=sup)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--L-src", dest="L_src", type=int)
    common.add_argument("--L-ref", dest="L_ref", type=int)
    common.add_argument("--L", dest="L", type=int, help="set L_src and L_ref together")
    common.add_argument("--d", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--M", dest="M", type=int)
    common.add_argument("--gating-mode", choices=CHOICES["gating_mode"])
    common.add_argument("--gate-placement", choices=CHOICES["gate_placement"])
    common.add_argument("--aggregation", choices=CHOICES["aggregation"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--format", choices=CHOICES["format"])
    common.add_argument("--zero-linear-scale", type=float)
    common.add_argument("--src-features", help="headerless CSV, one source token per row")
    common.add_argument("--ref-features", help="headerless CSV, one reference token per row")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="refgate", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    def add(name, help):
        return sub.add_parser(name, parents=[common], argument_default=sup, help=help)

    add("demo", "run all four gating modes once")
    g = add("gate-export", "write the gate map as CSV/PGM")
    g.add_argument("--pgm", choices=CHOICES["pgm"])
    gc = add("gradcheck", "analytic vs finite-difference gradients")
    gc.add_argument("--fd-step", type=float)
    f = add("flops", "closed-form MAC cost report")
    f.add_argument("--paper-base", type=float, help="baseline total to take overheads against")
    f.add_argument("--asymptotic", action="store_true", help="report the large-L cost ratio")
    b = add("bench", "wall-clock benchmark of the gating modes")
    b.add_argument("--sizes", help="comma-separated sequence lengths (L_src = L_ref)")
    b.add_argument("--repetitions", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--min-time", type=float,
                   help="seconds of timing per mode and size; adds repetitions to short sizes")
    b.add_argument("--mem-cap", type=int, help="max bytes per attention map")
    return p


def resolve(ns: argparse.Namespace, env=None) -> tuple[RunConfig, set[str]]:
    """Merge defaults, config file, environment and flags.

    Returns the config and the set of keys set explicitly (file or flags).
    """
    env = os.environ if env is None else env
    given = dict(vars(ns))
    given.pop("command", None)
    given.pop("verbose", None)
    values: dict = {}
    if "config" in given:
        values.update(load_config_file(given.pop("config")))
    if env.get(OUT_DIR_ENV):
        values["out_dir"] = env[OUT_DIR_ENV]
    if "L" in given:
        L = given.pop("L")
        values["L_src"] = values["L_ref"] = L
    values.update(given)
    explicit = set(values)
    return RunConfig(**values), explicit


# --- helpers -----------------------------------------------------------------

def _out_dir(rc: RunConfig) -> Path:
    path = Path(rc.out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _write(path: Path, text: str | bytes) -> Path:
    try:
        if isinstance(text, bytes):
            path.write_bytes(text)
        else:
            path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def _features(rc: RunConfig) -> tuple[np.ndarray, np.ndarray, RunConfig]:
    """Seeded synthetic features, or user CSVs (which then fix L_src, L_ref, d)."""
    rng = make_rng(rc.seed)
    src = ref = None
    try:
        if rc.src_features:
            src = read_matrix_csv(rc.src_features)
        if rc.ref_features:
            ref = read_matrix_csv(rc.ref_features)
    except (OSError, ValueError) as exc:
        raise UsageError(f"features: {exc}") from exc
    d = src.shape[1] if src is not None else ref.shape[1] if ref is not None else rc.d
    if src is not None and ref is not None and src.shape[1] != ref.shape[1]:
        raise UsageError(f"d: source width {src.shape[1]} != reference width {ref.shape[1]}")
    L_src = src.shape[0] if src is not None else rc.L_src
    L_ref = ref.shape[0] if ref is not None else rc.L_ref
    if src is None:
        src = rand_matrix(L_src, d, rng)
    if ref is None:
        ref = rand_matrix(L_ref, d, rng)
    rc = RunConfig(**{**vars(rc), "L_src": L_src, "L_ref": L_ref, "d": d})
    return src, ref, rc


def _emit(rc: RunConfig, payload: dict, table: str, csv_text: str | None = None) -> None:
    if rc.format == "json":
        print(json.dumps(payload, indent=2))
    elif rc.format == "csv" and csv_text is not None:
        print(csv_text, end="")
    else:
        print(table)


def _gate_stats(gate) -> dict:
    g = np.asarray(gate).ravel()
    return {"min": float(g.min()), "mean": float(g.mean()), "max": float(g.max())}


# --- subcommands -------------------------------------------------------------

def cmd_demo(rc: RunConfig) -> int:
    H_src, H_ref, rc = _features(rc)
    base_cfg = rc.attn_config()
    w = RAWeights.init(base_cfg, rc.seed, zero_linear_scale=rc.zero_linear_scale)
    inst = CostInputs(rc.L_src, rc.L_ref, rc.d, rc.M, Convention.INSTRUMENTED)
    records = []
    for mode in GatingMode:
        cfg = base_cfg.with_mode(mode)
        trace, _ = forward(H_src, H_ref, w, cfg)
        records.append({
            "mode": mode.value,
            "output_norm": float(np.linalg.norm(trace.final_out)),
            "branch_norm": float(np.linalg.norm(trace.final_out - H_src)),
            "gate_stats": _gate_stats(trace.gate),
            "gates": [float(x) for x in trace.gate.ravel()],
            "macs": trace.mac_count,
        })
    by_mode = {r["mode"]: r for r in records}
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": {**config_dict(base_cfg), "seed": rc.seed,
                   "zero_linear_scale": rc.zero_linear_scale},
        "records": records,
        "aicg_added_macs": by_mode["aicg"]["macs"] - by_mode["vanilla"]["macs"],
        "aicg_added_macs_formula": implicit_added(inst),
    }
    _write(_out_dir(rc) / "demo.json", json.dumps(payload, indent=2))
    lines = [f"{'mode':<9} {'|out|':>12} {'|branch|':>12} {'gate min':>10} {'gate mean':>10} "
             f"{'gate max':>10} {'MACs':>16}"]
    for r in records:
        s = r["gate_stats"]
        lines.append(f"{r['mode']:<9} {r['output_norm']:>12.6g} {r['branch_norm']:>12.6g} "
                     f"{s['min']:>10.6f} {s['mean']:>10.6f} {s['max']:>10.6f} {r['macs']:>16,}")
    _emit(rc, payload, "\n".join(lines))
    return EXIT_OK


def cmd_gate_export(rc: RunConfig) -> int:
    H_src, H_ref, rc = _features(rc)
    mode = GatingMode(rc.gating_mode)
    if mode not in (GatingMode.AICG, GatingMode.EXPLICIT):
        raise UsageError(f"gating_mode: gate export needs 'aicg' or 'explicit', got {mode.value!r}")
    side = square_side(rc.L_src)
    if rc.pgm == "yes" and side is None:
        raise UsageError(f"L_src: {rc.L_src} is not a perfect square, cannot write PGM")
    cfg = rc.attn_config()
    w = RAWeights.init(cfg, rc.seed, zero_linear_scale=rc.zero_linear_scale)
    _, gm = forward(H_src, H_ref, w, cfg)
    out = _out_dir(rc)
    try:
        written = [write_gate_csv(out / "gates.csv", gm.G)]
        if rc.pgm != "no" and side is not None:
            written.append(write_gate_pgm(out / "gates.pgm", gm.G))
    except OSError as exc:
        raise OutputError(f"cannot write gate map: {exc}") from exc
    payload = {"schema_version": SCHEMA_VERSION, "files": [str(p) for p in written],
               "L_src": rc.L_src, "gate_stats": _gate_stats(gm.G)}
    table = "\n".join(f"wrote {p}" for p in written)
    _emit(rc, payload, table)
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig, backward=None) -> int:
    cfg = rc.attn_config()
    budget = cfg.L_src * cfg.L_ref * cfg.d
    if budget > FD_BUDGET:
        raise UsageError(f"L_src*L_ref*d = {budget} exceeds the finite-difference budget "
                         f"{FD_BUDGET}; pass smaller --L-src/--L-ref/--d")
    res = check_gradients(cfg, seed=rc.seed, h=rc.fd_step, backward=backward,
                          zero_linear_scale=rc.zero_linear_scale)
    rows = [{**r.summary(), "seed": rc.seed, "config": res.config} for r in res.reports]
    ok = all(r.max_rel_err < GRAD_TOL for r in res.reports)
    payload = {"schema_version": SCHEMA_VERSION, "passed": ok, "tolerance": GRAD_TOL,
               "loss": res.loss, "reports": rows}
    if cfg.gating_mode is GatingMode.AICG:
        ts_norm = float(np.linalg.norm(res.report("T_S").analytic))
        payload["t_s_gate_grad_norm"] = ts_norm
        payload["t_s_gate_grad_dead"] = ts_norm < DEAD_GRAD_TOL
    _write(_out_dir(rc) / "gradcheck.json", json.dumps(payload, indent=2))
    lines = [f"{'param':<18} {'max_rel_err':>12} {'max_abs_err':>12}"]
    lines += [f"{r['param']:<18} {r['max_rel_err']:>12.3e} {r['max_abs_err']:>12.3e}" for r in rows]
    if "t_s_gate_grad_norm" in payload:
        lines.append(f"T_S gate-path gradient norm: {payload['t_s_gate_grad_norm']:.3e}"
                     + ("  (dead: constant gate)" if payload["t_s_gate_grad_dead"] else ""))
    lines.append("PASS" if ok else f"FAIL: relative error >= {GRAD_TOL}")
    _emit(rc, payload, "\n".join(lines))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_flops(rc: RunConfig) -> int:
    reports = {}
    for conv in Convention:
        c = CostInputs(rc.L_src, rc.L_ref, rc.d, rc.M, conv)
        reports[conv.value] = cost_report(c, rc.paper_base)
    payload = {"schema_version": SCHEMA_VERSION, "paper_base": rc.paper_base,
               "reports": {k: vars(r) for k, r in reports.items()}}
    tables = [format_table(r) for r in reports.values()]
    if rc.asymptotic:
        if rc.L_src != rc.L_ref:
            raise UsageError("L_src: --asymptotic needs L_src == L_ref")
        c = CostInputs(rc.L_src, rc.L_ref, rc.d, rc.M)
        ratio = dominant_ratio(c)
        ladder = ratio_ladder(rc.d, rc.M, [rc.L_src >> k for k in (6, 4, 2, 0) if rc.L_src >> k])
        payload["asymptotic"] = {"L": rc.L_src, "dominant_ratio": ratio, "limit": 2 / 3,
                                 "ladder": [{"L": L, "ratio": r} for L, r in ladder]}
        tables.append(f"C(implicit)/C(explicit) at L={rc.L_src}, d={rc.d}, M={rc.M}: "
                      f"{ratio:.6f} (limit 2/3 = {2 / 3:.6f})")
    _write(_out_dir(rc) / "flops.json", json.dumps(payload, indent=2))
    _write(_out_dir(rc) / "flops.txt", "\n\n".join(tables) + "\n")
    _emit(rc, payload, "\n\n".join(tables))
    return EXIT_OK


def _parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"sizes: cannot parse {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError(f"sizes: need positive integers, got {text!r}")
    return sizes


def cmd_bench(rc: RunConfig, explicit: set[str] = frozenset()) -> int:
    sizes = _parse_sizes(rc.sizes)
    d = rc.d if "d" in explicit else 256
    heads = rc.heads if "heads" in explicit else 4
    try:
        spec = benchmod.BenchSpec.ladder(sizes, d=d, M=rc.M, heads=heads,
                                         repetitions=rc.repetitions, warmup=rc.warmup,
                                         seed=rc.seed, mem_cap_bytes=rc.mem_cap,
                                         min_time_s=rc.min_time)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    results = benchmod.run_bench(spec)
    checked = benchmod.ordering_checked(results)
    violations = benchmod.ordering_violations(results) if checked else []
    note = (f"ordering checked at L >= {benchmod.ORDERING_MIN_L}" if checked else
            f"ordering assertion skipped: no size >= {benchmod.ORDERING_MIN_L}")
    out = _out_dir(rc)
    csv_text = benchmod.to_csv(results)
    _write(out / "bench.csv", csv_text)
    json_text = benchmod.to_json(results, ordering_checked=checked, violations=violations, note=note)
    _write(out / "bench.json", json_text)
    lines = [f"{'L':>6} {'mode':<9} {'median ms':>11} {'MAD ms':>9} {'MACs':>16} {'GMAC/s':>8}"]
    for r in results:
        if r.skipped:
            lines.append(f"{r.L_src:>6} {r.mode:<9} skipped: {r.skipped}")
        else:
            lines.append(f"{r.L_src:>6} {r.mode:<9} {r.median_ns / 1e6:>11.3f} {r.mad_ns / 1e6:>9.3f} "
                         f"{r.macs:>16,} {r.macs_per_s / 1e9:>8.2f}")
    lines.append(note)
    lines.extend(f"VIOLATION: {v}" for v in violations)
    _emit(rc, json.loads(json_text), "\n".join(lines), csv_text)
    return EXIT_CHECK if violations else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)   # argparse itself exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc, explicit = resolve(ns)
        rc.attn_config()
        if ns.command == "demo":
            return cmd_demo(rc)
        if ns.command == "gate-export":
            return cmd_gate_export(rc)
        if ns.command == "gradcheck":
            return cmd_gradcheck(rc)
        if ns.command == "flops":
            return cmd_flops(rc)
        return cmd_bench(rc, explicit)
    except UsageError as exc:
        print(f"refgate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OutputError as exc:
        print(f"refgate: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
