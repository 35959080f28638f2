"""Bayesian-optimization search loop with lower-confidence-bound ranking."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import surrogate
from .evaluator import Status, TrialRecord, penalty_metric
from .space import Configuration, ParamSpace, Sampler, encode_many
from .surrogate import Surrogate, SurrogateKind

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 1.96
DEFAULT_BATCH_SIZE = 512

EvaluateFn = Callable[[Configuration], TrialRecord]
# Receives (batch, lcb scores, chosen index) for every model-guided proposal.
SelectHook = Callable[[list[Configuration], np.ndarray, int], None]


class SpaceExhausted(Exception):
    """Every valid configuration has already been evaluated."""


@dataclass
class SearchSettings:
    max_evals: int = 100
    kappa: float = DEFAULT_KAPPA
    learner: SurrogateKind = SurrogateKind.RF
    batch_size: int = DEFAULT_BATCH_SIZE
    n_init: int | None = None
    seed: int | None = None
    # charged to trials whose callback raised before any success exists
    timeout: float = 600.0

    def __post_init__(self) -> None:
        self.learner = SurrogateKind(self.learner)
        if self.max_evals < 1:
            raise ValueError("max_evals must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.n_init is not None and not 1 <= self.n_init <= self.max_evals:
            raise ValueError("n_init must lie in [1, max_evals]")

    def initial_count(self, space: ParamSpace) -> int:
        n = self.n_init if self.n_init is not None else max(10, 2 * len(space))
        return min(n, self.max_evals)


@dataclass
class SearchState:
    evaluated: list[TrialRecord] = field(default_factory=list)
    best: TrialRecord | None = None
    budget_used: int = 0
    skipped: int = 0
    exhausted: bool = False
    _seen: set[Configuration] = field(default_factory=set, repr=False)

    def record(self, trial: TrialRecord) -> None:
        self.evaluated.append(trial)
        self._seen.add(trial.configuration)
        self.budget_used += 1
        if trial.ok and (self.best is None or trial.metric < self.best.metric):
            self.best = trial

    def skip(self) -> None:
        self.budget_used += 1
        self.skipped += 1

    def seen(self, cfg: Configuration) -> bool:
        return cfg in self._seen

    @property
    def executed(self) -> int:
        return len(self.evaluated)

    def worst_ok(self) -> float | None:
        ok = [t.metric for t in self.evaluated if t.ok]
        return max(ok) if ok else None


def acquisition_lcb(mean, std, kappa: float) -> np.ndarray:
    """``mean - kappa * std``; the lowest score is the most promising."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return np.asarray(mean, dtype=float) - kappa * np.asarray(std, dtype=float)


def select_index(mean, std, kappa: float) -> int:
    """Position of the lowest LCB score; ties keep the earliest candidate."""
    return int(np.argmin(acquisition_lcb(mean, std, kappa)))


def lcb_of(preds: Sequence[surrogate.Prediction], kappa: float) -> np.ndarray:
    return acquisition_lcb([p.mean for p in preds], [p.std for p in preds], kappa)


def fit_model(space: ParamSpace, state: SearchState, settings: SearchSettings, seed: int) -> Surrogate:
    scheme = "gp" if settings.learner is SurrogateKind.GP else "tree"
    X = encode_many(space, [t.configuration for t in state.evaluated], scheme)
    y = np.array([t.metric for t in state.evaluated])
    return surrogate.fit(settings.learner, X, y, seed=seed)


def propose(
    space: ParamSpace,
    state: SearchState,
    model: Surrogate,
    settings: SearchSettings,
    sampler: Sampler,
    on_select: SelectHook | None = None,
) -> Configuration:
    batch = sampler.sample(settings.batch_size, exclude=state._seen)
    if not batch:
        raise SpaceExhausted()
    scheme = "gp" if settings.learner is SurrogateKind.GP else "tree"
    mean, std = model.predict(encode_many(space, batch, scheme))
    scores = acquisition_lcb(mean, std, settings.kappa)
    # np.argmin keeps the first of equal scores, i.e. sampling order
    i = int(np.argmin(scores))
    if on_select is not None:
        on_select(batch, scores, i)
    return batch[i]


def _safe_evaluate(evaluate: EvaluateFn, cfg: Configuration, state: SearchState, settings: SearchSettings) -> TrialRecord:
    try:
        return evaluate(cfg)
    except Exception as exc:  # the loop must survive a broken callback
        log.warning("evaluation raised %r; recording run_fail", exc)
        return TrialRecord(cfg, penalty_metric(state.worst_ok(), settings.timeout), 0.0, Status.RUN_FAIL)


def run_search(
    space: ParamSpace,
    evaluate: EvaluateFn,
    settings: SearchSettings | None = None,
    *,
    on_select: SelectHook | None = None,
    on_trial: Callable[[TrialRecord], None] | None = None,
) -> SearchState:
    """Random initial design, then model-guided proposals until the budget is spent.

    With the GP learner every later iteration draws a single random
    configuration; drawing one already evaluated spends budget without
    running anything.
    """
    settings = settings or SearchSettings()
    seed = space.seed if settings.seed is None else settings.seed
    sampler = Sampler(space, seed)
    state = SearchState()

    def run(cfg: Configuration) -> None:
        trial = _safe_evaluate(evaluate, cfg, state, settings)
        state.record(trial)
        if on_trial is not None:
            on_trial(trial)

    for cfg in sampler.sample(settings.initial_count(space)):
        run(cfg)

    while state.budget_used < settings.max_evals:
        if settings.learner is SurrogateKind.GP:
            (cfg,) = sampler.sample(1)
            if state.seen(cfg):
                state.skip()
                continue
            run(cfg)
            continue
        model = fit_model(space, state, settings, seed + state.budget_used)
        try:
            cfg = propose(space, state, model, settings, sampler, on_select)
        except SpaceExhausted:
            state.exhausted = True
            log.info("space exhausted after %d evaluations", state.executed)
            break
        run(cfg)
    return state
