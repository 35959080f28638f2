import sys
from importlib.resources import files
from pathlib import Path

import pytest

from pragtune.space import ActivationCondition, ForbiddenClause, Parameter, ParamSpace, load_space

FIXTURES = Path(str(files("pragtune") / "fixtures"))
GOLDEN = Path(__file__).parent / "golden"
PYTHON = sys.executable


@pytest.fixture
def syr2k_space():
    return load_space(FIXTURES / "syr2k_space.json")


@pytest.fixture
def mnist_space():
    return load_space(FIXTURES / "mnist_space.json")


def toy_space(seed=0, forbidden=True):
    """Small conditional space: 12 raw assignments, 8 valid configurations."""
    params = (
        Parameter("mode", "categorical", ("a", "b")),
        Parameter("opt", "categorical", ("x", "y")),
        Parameter("size", "ordinal", ("1", "2", "4")),
    )
    conds = (ActivationCondition("opt", "mode", frozenset({"a"})),)
    forb = (ForbiddenClause((("mode", "b"), ("size", "4"))),) if forbidden else ()
    return ParamSpace(params, conds, forb, seed)


def grid_space(sizes=(2, 2, 2), seed=0):
    params = tuple(
        Parameter(f"P{i}", "ordinal", tuple(str(v) for v in range(n))) for i, n in enumerate(sizes)
    )
    return ParamSpace(params, (), (), seed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
