"""Shared strategies and fixtures."""

import numpy as np
import pytest
from hypothesis import settings, strategies as st

from nelson_embed import TimeGrid, ornstein_uhlenbeck, simulate

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_leaf = st.one_of(
    st.sampled_from(["x1", "t", "x1", "2", "0.5", "3.25", "pi"]),
    st.integers(min_value=1, max_value=9).map(str),
)


def _extend(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda p: f"({p[0]} {p[1]} {p[2]})"),
        st.tuples(children, children).map(lambda p: f"({p[0]})/(2 + ({p[1]})^2)"),
        st.tuples(children, st.integers(min_value=0, max_value=3)).map(lambda p: f"({p[0]})^{p[1]}"),
        st.tuples(st.sampled_from(["sin", "cos"]), children).map(lambda p: f"{p[0]}({p[1]})"),
        children.map(lambda c: f"exp(({c})/(4 + ({c})^2))"),
        children.map(lambda c: f"-{c}"),
    )


expressions = st.recursive(_leaf, _extend, max_leaves=8)


@pytest.fixture(scope="session")
def ou_ensemble():
    """Stationary OU, 1e5 paths on [0, 0.4] with dt = 1e-3."""
    model = ornstein_uhlenbeck()
    return model, simulate(model.spec, TimeGrid(0.0, 0.4, 400), 100_000, seed=20240611)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record one pass/fail line per acceptance criterion and print it immediately."""

    def record(number, ok, detail, runtime):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail} ({runtime:.2f} s)"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
