import numpy as np
import pytest

from refgate import AttnConfig, RAWeights, make_rng, rand_matrix


def make_case(cfg: AttnConfig, seed: int, zero_linear_scale: float = 1.0):
    """Seeded inputs and weights with a nonzero zero_linear."""
    rng = make_rng(seed)
    H_src = rand_matrix(cfg.L_src, cfg.d, rng)
    H_ref = rand_matrix(cfg.L_ref, cfg.d, rng)
    w = RAWeights.init(cfg, seed + 1000, zero_linear_scale=zero_linear_scale,
                       global_gate_logit=float(rng.uniform(-2, 2)))
    return H_src, H_ref, w


@pytest.fixture
def case():
    return make_case


def random_small_config(rng: np.random.Generator, mode="vanilla", **kw):
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 5))
    base = dict(L_src=int(rng.integers(1, 7)), L_ref=int(rng.integers(1, 8)), d=d, heads=heads,
                M=int(rng.integers(1, 4)), gating_mode=mode,
                gate_placement=["before-zero-linear", "before-to-out"][int(rng.integers(0, 2))])
    base.update(kw)
    return AttnConfig(**base)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the acceptance summary."""
    def record(label: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
