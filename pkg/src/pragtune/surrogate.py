"""Regressors that return a mean and a standard deviation per input.

Four families are available: random forest (RF), extra trees (ET), gradient
boosted regression trees (GBRT) and a Gaussian process (GP).  All fits are
deterministic given the data and the seed.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np


class SurrogateKind(str, Enum):
    RF = "RF"
    ET = "ET"
    GBRT = "GBRT"
    GP = "GP"


class FitError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class Prediction(NamedTuple):
    mean: float
    std: float


# Receives the (low, high) range of a feature inside a node, returns a threshold.
ThresholdGenerator = Callable[[float, float], float]


# -- single regression tree -------------------------------------------------


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of X."""
        node = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, n = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def splits(self) -> list[tuple[int, float]]:
        """(feature, threshold) of every internal node in build order."""
        return [(int(f), float(t)) for f, t in zip(self.feature, self.threshold) if f >= 0]


def _best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int):
    """Exhaustive variance-reduction split over ``features``.

    Ties go to the lowest feature index, then the lowest threshold.
    Returns (feature, threshold) or None.
    """
    n = len(y)
    feats = np.asarray(sorted(features), dtype=np.intp)
    Xf = X[:, feats]
    order = np.argsort(Xf, axis=0, kind="stable")
    cols = np.arange(len(feats))
    xs = Xf[order, cols]
    ys = y[order]
    csum = np.cumsum(ys, axis=0)[:-1]
    k = np.arange(1, n, dtype=float)[:, None]
    total = y.sum()
    # maximizing this is minimizing the summed squared error of both children
    gain = csum**2 / k + (total - csum) ** 2 / (n - k)
    ok = xs[1:] > xs[:-1]
    if min_leaf > 1:
        ok[: min_leaf - 1] = False
        ok[n - min_leaf :] = False
    if not ok.any():
        return None
    gain = np.where(ok, gain, -np.inf)
    flat = gain.T.ravel()
    best = int(np.argmax(flat))
    fi, pos = divmod(best, n - 1)
    thr = 0.5 * (xs[pos, fi] + xs[pos + 1, fi])
    return int(feats[fi]), float(thr)


def _random_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int,
                  threshold_gen: ThresholdGenerator):
    n = len(y)
    total = y.sum()
    best = None
    best_gain = -np.inf
    for f in sorted(features):
        col = X[:, f]
        lo, hi = float(col.min()), float(col.max())
        thr = float(threshold_gen(lo, hi))
        mask = col <= thr
        nl = int(mask.sum())
        if nl < min_leaf or n - nl < min_leaf:
            continue
        sl = y[mask].sum()
        gain = sl**2 / nl + (total - sl) ** 2 / (n - nl)
        if gain > best_gain:
            best, best_gain = (int(f), thr), gain
    return best


def build_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    *,
    max_features: int | None = None,
    min_samples_leaf: int = 1,
    max_depth: int | None = None,
    splitter: str = "best",
    threshold_gen: ThresholdGenerator | None = None,
) -> Tree:
    n_features = X.shape[1]
    max_features = n_features if max_features is None else max_features
    if splitter == "random" and threshold_gen is None:
        threshold_gen = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node(yn: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(yn.sum()) / len(yn))
        return len(feature) - 1

    root = new_node(y)
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if len(idx) < 2 * min_samples_leaf or (max_depth is not None and depth >= max_depth):
            continue
        yn = y[idx]
        if yn.max() == yn.min():
            continue
        Xn = X[idx]
        nonconstant = Xn.max(axis=0) > Xn.min(axis=0)
        if max_features >= n_features:
            chosen = np.flatnonzero(nonconstant).tolist()
        else:
            # visit features in random order; constant ones do not use up the quota
            chosen = []
            for f in rng.permutation(n_features):
                if nonconstant[f]:
                    chosen.append(int(f))
                    if len(chosen) == max_features:
                        break
        if not chosen:
            continue
        if splitter == "best":
            split = _best_split(Xn, yn, chosen, min_samples_leaf)
        else:
            split = _random_split(Xn, yn, chosen, min_samples_leaf, threshold_gen)
        if split is None:
            continue
        f, thr = split
        mask = Xn[:, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(yn[mask])
        right[node] = new_node(yn[~mask])
        # right pushed first so the left subtree is built (and numbered) first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(
        np.array(feature, dtype=np.intp),
        np.array(threshold),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        np.array(value),
    )


# -- fitted models ----------------------------------------------------------


class Surrogate:
    kind: SurrogateKind
    dim: int

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ShapeError(f"expected inputs of width {self.dim}, got shape {X.shape}")
        return X


class Forest(Surrogate):
    """RF or ET ensemble; spread across trees is the uncertainty."""

    def __init__(self, kind: SurrogateKind, trees: list[Tree], dim: int):
        self.kind = kind
        self.trees = trees
        self.dim = dim

    def per_tree_predictions(self, X) -> np.ndarray:
        X = self._check(X)
        return np.vstack([t.predict(X) for t in self.trees])

    def predict(self, X):
        per_tree = self.per_tree_predictions(X)
        return per_tree.mean(axis=0), per_tree.std(axis=0)


class QuantileBoosting:
    """Gradient boosting under pinball loss for a single quantile."""

    def __init__(self, alpha: float, n_stages: int = 100, learning_rate: float = 0.1, max_depth: int = 3):
        self.alpha = alpha
        self.n_stages = n_stages
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.init_ = 0.0
        self.trees: list[Tree] = []

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> QuantileBoosting:
        a = self.alpha
        self.init_ = float(np.quantile(y, a))
        F = np.full(len(y), self.init_)
        self.trees = []
        for _ in range(self.n_stages):
            resid = y - F
            grad = np.where(resid > 0, a, a - 1.0)
            tree = build_tree(X, grad, rng, max_depth=self.max_depth, min_samples_leaf=1)
            leaves = tree.apply(X)
            # line search per leaf: the alpha-quantile of the residuals it holds
            values = tree.value.copy()
            for leaf in np.unique(leaves):
                values[leaf] = np.quantile(resid[leaves == leaf], a)
            tree.value = values
            F = F + self.learning_rate * values[leaves]
            self.trees.append(tree)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.full(len(X), self.init_)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out


class BoostedTrees(Surrogate):
    QUANTILES = (0.16, 0.50, 0.84)

    def __init__(self, models: dict[float, QuantileBoosting], y_range: tuple[float, float], dim: int):
        self.kind = SurrogateKind.GBRT
        self.models = models
        self.y_range = y_range
        self.dim = dim

    def quantile_predictions(self, X) -> dict[float, np.ndarray]:
        X = self._check(X)
        return {q: m.predict(X) for q, m in self.models.items()}

    def predict(self, X):
        qs = self.quantile_predictions(X)
        lo, mid, hi = (qs[q] for q in self.QUANTILES)
        mean = np.clip(mid, *self.y_range)
        std = np.maximum(0.0, (hi - lo) / 2.0)
        return mean, std


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def median_pairwise_distance(X: np.ndarray) -> float:
    n = len(X)
    if n < 2:
        return 1.0
    d = np.sqrt(sq_distances(X, X)[np.triu_indices(n, k=1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


class GaussianProcess(Surrogate):
    """Squared-exponential GP with fixed heuristic hyperparameters."""

    def __init__(self, X: np.ndarray, y: np.ndarray, jitter_ratio: float = 1e-6):
        self.kind = SurrogateKind.GP
        self.dim = X.shape[1]
        self.X = X
        self.prior_mean = float(y.mean())
        var = float(y.var())
        self.signal_variance = var if var > 0 else 1.0
        self.length_scale = median_pairwise_distance(X)
        self.noise = jitter_ratio * self.signal_variance
        K = self.kernel(X, X) + self.noise * np.eye(len(X))
        self._chol = np.linalg.cholesky(K)
        self._alpha = _chol_solve(self._chol, y - self.prior_mean)

    @property
    def hyperparameters(self) -> dict[str, float]:
        return {
            "length_scale": self.length_scale,
            "signal_variance": self.signal_variance,
            "noise": self.noise,
            "prior_mean": self.prior_mean,
        }

    def kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return self.signal_variance * np.exp(-0.5 * sq_distances(A, B) / self.length_scale**2)

    def predict(self, X):
        X = self._check(X)
        Ks = self.kernel(self.X, X)
        mean = self.prior_mean + Ks.T @ self._alpha
        v = np.linalg.solve(self._chol, Ks)
        var = self.signal_variance - (v**2).sum(axis=0)
        return mean, np.sqrt(np.maximum(var, 0.0))


def _chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


# -- public entry points ----------------------------------------------------


def forest_max_features(dim: int) -> int:
    return max(1, int(math.sqrt(dim)))


def fit(
    kind: SurrogateKind | str,
    X,
    y,
    seed: int = 0,
    *,
    n_trees: int = 100,
    threshold_gen: ThresholdGenerator | None = None,
) -> Surrogate:
    kind = SurrogateKind(kind)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if len(y) == 0 or X.size == 0:
        raise FitError("cannot fit on empty data")
    if len(X) != len(y):
        raise FitError(f"{len(X)} input rows but {len(y)} targets")
    if not np.all(np.isfinite(y)):
        raise FitError("targets must be finite")
    if not np.all(np.isfinite(X)):
        raise FitError("inputs must be finite")
    if kind in (SurrogateKind.GBRT, SurrogateKind.GP) and len(y) < 2:
        raise FitError(f"{kind.value} needs at least 2 rows")

    rng = np.random.default_rng(seed)
    dim = X.shape[1]
    if kind is SurrogateKind.RF:
        trees = []
        for _ in range(n_trees):
            boot = rng.integers(0, len(y), size=len(y))
            trees.append(
                build_tree(X[boot], y[boot], rng, max_features=forest_max_features(dim), min_samples_leaf=2)
            )
        return Forest(kind, trees, dim)
    if kind is SurrogateKind.ET:
        trees = [
            build_tree(
                X, y, rng,
                max_features=forest_max_features(dim),
                min_samples_leaf=2,
                splitter="random",
                threshold_gen=threshold_gen,
            )
            for _ in range(n_trees)
        ]
        return Forest(kind, trees, dim)
    if kind is SurrogateKind.GBRT:
        models = {q: QuantileBoosting(q).fit(X, y, rng) for q in BoostedTrees.QUANTILES}
        return BoostedTrees(models, (float(y.min()), float(y.max())), dim)
    return GaussianProcess(X, y)


def predict(model: Surrogate, inputs) -> list[Prediction]:
    mean, std = model.predict(inputs)
    return [Prediction(float(m), float(s)) for m, s in zip(mean, std)]
