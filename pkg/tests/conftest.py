import numpy as np
import pytest
import torch

from ntl.domains import SyntheticShiftSpec, make_synthetic_domain_pair
from ntl.models import build_model, tiny_spec


@pytest.fixture(scope="session")
def small_pair():
    """A 16px synthetic pair small enough for unit tests."""
    src, tgt = make_synthetic_domain_pair(5, SyntheticShiftSpec.strong_tint(16), 300)
    return src, tgt


@pytest.fixture
def small_model():
    return build_model(tiny_spec(10, 16, (8, 8, 8, 16), 32), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def double_model(seed=0, image_size=16):
    m = build_model(tiny_spec(10, image_size, (4, 4, 4, 8), 16), seed).double()
    m.eval()
    return m


@pytest.fixture(autouse=True)
def _quiet_threads():
    torch.set_num_threads(1)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns ``ok`` so the caller can assert on it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
