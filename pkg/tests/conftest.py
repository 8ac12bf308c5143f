import os

import numpy as np
import pytest
from hypothesis import settings

from pointgraph.model import Architecture, ModelParams

settings.register_profile("default", deadline=None, max_examples=50)
settings.register_profile("thorough", deadline=None, max_examples=1000)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_arch(**kw) -> Architecture:
    base = dict(d_in=3, d_graph=3, d_classes=3, T=2, k=2, f_hidden=8, node_hidden=8, node_out=8,
                edge_hidden=8, edge_out=8, fusion_hidden=8, fusion_out=8, head_hidden=8)
    base.update(kw)
    return Architecture(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model(rng):
    return ModelParams.init(tiny_arch(), rng)


# --- acceptance report: one PASS/FAIL line per criterion -------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record a named criterion outcome; the line is printed whatever the assertion result."""
    def record(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
