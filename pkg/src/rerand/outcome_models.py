"""Outcome models, cross-fitting folds, and forward covariate selection.

Two model families ship: ordinary least squares and a bagged CART regression
forest built on the kernels in :mod:`rerand._kernels`.  Forest defaults (15
trees, unlimited depth, leaves of at least 5, bootstrap resampling, sqrt-p
features per split) are pinned here so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .balance import Assignment
from .rng import ensure_rng

__all__ = [
    "FoldError",
    "OutcomeModelSpec",
    "FoldPlan",
    "OlsModel",
    "ForestModel",
    "fit",
    "make_folds",
    "stepwise_select",
]

_UNLIMITED_DEPTH = 1 << 30


class FoldError(ValueError):
    """Arms too small for the requested fold count."""


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Which model to fit and on which adjustment columns.

    ``columns=None`` means "use the caller's adjustment set";
    ``columns="stepwise"`` asks the estimator to run forward selection first.
    """

    kind: str = "ols"
    columns: tuple[int, ...] | str | None = None
    n_trees: int = 15
    max_depth: int | None = None
    min_leaf: int = 5
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("ols", "forest"):
            raise ValueError("model kind must be 'ols' or 'forest'")
        if self.n_trees < 1:
            raise ValueError("need at least one tree")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be positive")
        if isinstance(self.columns, str) and self.columns != "stepwise":
            raise ValueError("columns must be a tuple of indices, None, or 'stepwise'")


@dataclass(frozen=True)
class FoldPlan:
    """Unit-to-fold map for cross-fitting; arm-stratified."""

    fold_of_unit: np.ndarray
    k: int

    def __post_init__(self):
        f = np.asarray(self.fold_of_unit, dtype=np.int64)
        if f.min() < 0 or f.max() >= self.k:
            raise ValueError("fold labels out of range")
        f.setflags(write=False)
        object.__setattr__(self, "fold_of_unit", f)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_unit == j)


@dataclass(eq=False)
class OlsModel:
    coef: np.ndarray
    rank_deficient: bool = False

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.coef[0] + x @ self.coef[1:]


@dataclass(eq=False)
class ForestModel:
    feature: np.ndarray
    thresh: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    n_features: int = field(default=0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected a matrix with {self.n_features} columns")
        return _kernels.forest_predict(
            self.feature, self.thresh, self.left, self.right, self.value, self.offsets, x
        )


def fit_ols(x: np.ndarray, y: np.ndarray) -> OlsModel:
    """Least squares with intercept via rank-revealing SVD.

    Rank-deficient designs fall back to the minimum-norm solution and set
    the ``rank_deficient`` flag instead of raising.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    if n < p + 1:
        raise ValueError("need at least one more row than columns")
    design = np.column_stack([np.ones(n), x])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    return OlsModel(coef=coef, rank_deficient=rank < p + 1)


def fit_forest(x: np.ndarray, y: np.ndarray, spec: OutcomeModelSpec, rng) -> ForestModel:
    """Bagged CART regression forest.

    Per tree: a bootstrap resample of the rows and, at every split, a fresh
    subset of ceil(sqrt(p)) candidate features.  All randomness comes from
    ``rng``; tree construction itself runs in the compiled kernel.
    """
    rng = ensure_rng(rng if rng is not None else spec.seed)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    m, p = x.shape
    if p < 1:
        raise ValueError("forest needs at least one feature column")
    if m < 2 * spec.min_leaf:
        raise ValueError("too few rows for the minimum leaf size")
    max_depth = _UNLIMITED_DEPTH if spec.max_depth is None else int(spec.max_depth)
    mtry = max(1, math.ceil(math.sqrt(p)))
    # Internal nodes hold >= 2*min_leaf rows, so a tree never has more nodes
    # than this, and pool row nid exists for every created node.
    pool_rows = 2 * (m // spec.min_leaf) + 3

    boots = rng.integers(0, m, size=(spec.n_trees, m))
    pools = np.argsort(rng.random((spec.n_trees, pool_rows, p)), axis=2)[:, :, :mtry]
    parts = []
    for t in range(spec.n_trees):
        boot = boots[t]
        pool = np.ascontiguousarray(pools[t])
        parts.append(_kernels.tree_build(x[boot], y[boot], pool, max_depth, spec.min_leaf))

    sizes = [part[0].shape[0] for part in parts]
    offsets = np.zeros(len(parts) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)
    return ForestModel(
        feature=np.concatenate([p0 for p0, *_ in parts]),
        thresh=np.concatenate([p1 for _, p1, *_ in parts]),
        left=np.concatenate([part[2] for part in parts]),
        right=np.concatenate([part[3] for part in parts]),
        value=np.concatenate([part[4] for part in parts]),
        offsets=offsets,
        n_features=p,
    )


def fit(spec: OutcomeModelSpec, x: np.ndarray, y: np.ndarray, rng=None):
    """Fit the model named by ``spec`` and return a predictor.

    With zero feature columns every family degenerates to the training mean,
    so an intercept-only least-squares fit stands in.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "ols" or x.shape[1] == 0:
        return fit_ols(x, y)
    return fit_forest(x, y, spec, rng)


def make_folds(z: Assignment, k: int, rng) -> FoldPlan:
    """Arm-stratified folds: per-fold arm counts differ by at most one.

    Folds are dealt round-robin within each arm along one global shuffle, so
    the plan depends on the arm partition but not on which arm carries which
    label: relabeling treatment and control leaves the folds unchanged.
    """
    if k < 2:
        raise FoldError("need at least 2 folds")
    if min(z.n1, z.n0) < 2 * k:
        raise FoldError(f"each arm needs at least {2 * k} units for {k} folds")
    rng = ensure_rng(rng)
    perm = rng.permutation(z.n)
    fold = np.empty(z.n, dtype=np.int64)
    for arm in (1, 0):
        members = perm[z.z[perm] == arm]
        fold[members] = np.arange(members.shape[0]) % k
    return FoldPlan(fold_of_unit=fold, k=k)


def _cv_error(x: np.ndarray, y: np.ndarray, cols: tuple[int, ...], folds: FoldPlan) -> float:
    err = 0.0
    for j in range(folds.k):
        test = folds.members(j)
        train = np.flatnonzero(folds.fold_of_unit != j)
        model = fit_ols(x[np.ix_(train, cols)] if cols else x[train, :0], y[train])
        pred = model.predict(x[np.ix_(test, cols)] if cols else x[test, :0])
        err += float(np.sum((y[test] - pred) ** 2))
    return err / x.shape[0]


def stepwise_select(x: np.ndarray, y: np.ndarray, folds: FoldPlan) -> tuple[int, ...]:
    """Forward selection on cross-validated squared prediction error.

    Starts from the intercept-only model, greedily adds the column that most
    lowers CV error, and stops when no addition lowers it.  May return the
    empty tuple.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("need at least one candidate column")
    selected: tuple[int, ...] = ()
    remaining = list(range(x.shape[1]))
    current = _cv_error(x, y, selected, folds)
    while remaining:
        scores = [(_cv_error(x, y, selected + (c,), folds), c) for c in remaining]
        best_err, best_col = min(scores)
        if best_err >= current:
            break
        current = best_err
        selected = selected + (best_col,)
        remaining.remove(best_col)
    return selected
