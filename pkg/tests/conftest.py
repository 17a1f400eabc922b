import numpy as np
import pytest

from etadrive.harness import collect_dataset
from etadrive.toyworld import SCENARIO_KINDS, make_scenario


@pytest.fixture(scope="session")
def small_dataset():
    """One short expert episode per scenario kind."""
    return collect_dataset([make_scenario(k, 10) for k in SCENARIO_KINDS], ticks=40)


@pytest.fixture(scope="session")
def batch(small_dataset):
    idx = np.random.default_rng(0).choice(len(small_dataset.act_t), 4, replace=False)
    return small_dataset.batch(idx)


def perturb(model, seed=0, scale=0.05):
    """Move every parameter off its init so zero-initialised heads are generic."""
    rng = np.random.default_rng(seed)
    model.load_arrays({k: p.data + scale * rng.standard_normal(p.shape)
                       for k, p in model.params().items()})
    return model


# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
