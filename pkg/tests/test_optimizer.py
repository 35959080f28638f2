import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pragtune.evaluator import Status, TrialRecord
from pragtune.optimizer import (
    SearchSettings,
    SearchState,
    acquisition_lcb,
    lcb_of,
    run_search,
)
from pragtune.space import Configuration
from pragtune.surrogate import Prediction

from conftest import grid_space, toy_space


def synthetic(cfg):
    x = [int(v) for k, v in sorted(cfg.items())]
    return TrialRecord(Configuration(cfg), float(sum((xi - 1) ** 2 for xi in x)) + 1.0, 0.0, Status.OK)


def test_lcb_formula():
    np.testing.assert_allclose(acquisition_lcb([1.0, 2.0], [0.5, 0.0], 2.0), [0.0, 2.0])
    assert list(lcb_of([Prediction(3.0, 1.0)], 1.96)) == [pytest.approx(1.04)]
    with pytest.raises(ValueError):
        acquisition_lcb([1.0], [1.0], -1.0)


@settings(max_examples=50, deadline=None)
@given(
    means=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30),
    data=st.data(),
)
def test_lcb_extremes(means, data):
    stds = data.draw(st.lists(st.floats(0, 1e3), min_size=len(means), max_size=len(means)))
    assert int(np.argmin(acquisition_lcb(means, stds, 0.0))) == int(np.argmin(means))
    gaps = np.diff(np.sort(stds))
    # kappa * gap must dominate any difference of bounded means
    if len(stds) == 1 or gaps.min() * 1e6 > 2 * max(abs(m) for m in means) + 1e-9:
        assert int(np.argmin(acquisition_lcb(means, stds, 1e6))) == int(np.argmax(stds))


def test_settings_defaults_and_validation():
    s = SearchSettings()
    assert (s.max_evals, s.kappa, s.learner.value, s.batch_size) == (100, 1.96, "RF", 512)
    assert s.initial_count(grid_space((2, 2, 2))) == 10
    assert SearchSettings(max_evals=5).initial_count(grid_space()) == 5
    big = grid_space((2,) * 8)
    assert s.initial_count(big) == 16
    for bad in ({"max_evals": 0}, {"kappa": -1}, {"batch_size": 0}, {"n_init": 0}, {"learner": "XX"}):
        with pytest.raises(ValueError):
            SearchSettings(**bad)


def test_gp_path_skips_duplicates():
    space = grid_space((2, 2, 2))
    calls = []

    def ev(cfg):
        calls.append(cfg)
        return synthetic(cfg)

    state = run_search(space, ev, SearchSettings(max_evals=200, learner="GP", seed=1))
    assert state.budget_used == 200
    assert state.executed == len(calls) <= 8
    assert state.skipped == 200 - state.executed
    assert len(set(calls)) == len(calls)


@pytest.mark.parametrize("learner", ["RF", "ET", "GBRT"])
def test_model_path_selects_lcb_argmin(learner):
    space = grid_space((4, 4, 3), seed=2)
    picks = []
    evaluated = []

    def hook(batch, scores, i):
        assert i == int(np.argmin(scores))
        assert scores[i] == scores.min()
        picks.append(batch[i])

    def ev(cfg):
        evaluated.append(cfg)
        return synthetic(cfg)

    settings_ = SearchSettings(max_evals=16, learner=learner, seed=0, n_init=6, batch_size=64)
    state = run_search(space, ev, settings_, on_select=hook)
    assert state.executed == 16
    assert evaluated[6:] == picks
    assert len(set(evaluated)) == 16


def test_exhaustion_stops_early():
    space = toy_space()
    state = run_search(space, synthetic_toy, SearchSettings(max_evals=30, n_init=3, seed=0))
    assert state.exhausted
    assert state.executed == 8 == state.budget_used


def synthetic_toy(cfg):
    metric = {"1": 3.0, "2": 1.0, "4": 2.0}[cfg["size"]] + (0.5 if cfg["mode"] == "b" else 0.0)
    return TrialRecord(Configuration(cfg), metric, 0.0, Status.OK)


def test_best_is_earliest_minimum():
    space = toy_space()
    state = run_search(space, synthetic_toy, SearchSettings(max_evals=8, n_init=8, seed=4))
    ok = [t for t in state.evaluated]
    m = min(t.metric for t in ok)
    assert state.best is next(t for t in ok if t.metric == m)


def test_search_is_seed_deterministic():
    space = grid_space((5, 5, 5))
    s = SearchSettings(max_evals=15, seed=11, n_init=5)
    a = run_search(space, synthetic, s)
    b = run_search(space, synthetic, s)
    assert [t.configuration for t in a.evaluated] == [t.configuration for t in b.evaluated]


def test_raising_callback_records_penalty():
    space = grid_space((3, 3))
    n = {"i": 0}

    def ev(cfg):
        n["i"] += 1
        if n["i"] % 3 == 0:
            raise RuntimeError("boom")
        return synthetic(cfg)

    state = run_search(space, ev, SearchSettings(max_evals=9, n_init=9, seed=0, timeout=77.0))
    fails = [t for t in state.evaluated if t.status is Status.RUN_FAIL]
    assert len(fails) == 3
    worst_before = max(t.metric for t in state.evaluated[:2])
    assert fails[0].metric == pytest.approx(10 * worst_before)


def test_penalty_uses_timeout_without_successes():
    space = grid_space((2, 2))

    def ev(cfg):
        raise RuntimeError

    state = run_search(space, ev, SearchSettings(max_evals=3, n_init=3, seed=0, timeout=42.0))
    assert [t.metric for t in state.evaluated] == [42.0] * 3
    assert state.best is None


def test_on_trial_sees_every_execution():
    space = grid_space((3, 3, 3))
    seen = []
    state = run_search(space, synthetic, SearchSettings(max_evals=12, seed=3), on_trial=seen.append)
    assert seen == state.evaluated


def test_state_bookkeeping():
    st_ = SearchState()
    cfg = Configuration({"a": "1"})
    st_.record(TrialRecord(cfg, 2.0, 0.0, Status.OK))
    st_.record(TrialRecord(Configuration({"a": "2"}), 9.0, 0.0, Status.COMPILE_FAIL))
    st_.skip()
    assert st_.seen(cfg) and st_.budget_used == 3 and st_.executed == 2
    assert st_.worst_ok() == 2.0 and st_.best.metric == 2.0
