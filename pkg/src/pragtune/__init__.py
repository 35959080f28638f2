"""Autotuning of code templates by Bayesian optimization, plus loop-transformation tree search."""

from .evaluator import CodeTemplate, EvalSpec, Evaluator, Status, TrialRecord, instantiate
from .optimizer import SearchSettings, SearchState, acquisition_lcb, run_search
from .perfdb import PerfDB, convergence_series, find_min
from .space import INACTIVE, Configuration, ParamSpace, Sampler, cardinality, load_space, sample, validate
from .surrogate import SurrogateKind, fit, predict
from .treespace import LoopNode, TransformStack, derive_children, tree_search

__version__ = "0.1.0"

__all__ = [
    "INACTIVE",
    "CodeTemplate",
    "Configuration",
    "EvalSpec",
    "Evaluator",
    "LoopNode",
    "ParamSpace",
    "PerfDB",
    "Sampler",
    "SearchSettings",
    "SearchState",
    "Status",
    "SurrogateKind",
    "TransformStack",
    "TrialRecord",
    "acquisition_lcb",
    "cardinality",
    "convergence_series",
    "derive_children",
    "find_min",
    "fit",
    "instantiate",
    "load_space",
    "predict",
    "run_search",
    "sample",
    "tree_search",
    "validate",
]
