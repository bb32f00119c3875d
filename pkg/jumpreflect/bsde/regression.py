# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Conditional expectation backends E[. | F_k].

`TreeExpectation` averages over the one-step outcomes of every history node of
an exact tree. `RegressionExpectation` projects onto a feature basis of the
step-k state by weighted least squares, one fit per group (particle) or pooled.
"""

import itertools
import logging
import typing as tp
import warnings
from abc import ABC, abstractmethod

import numpy as np

logger = logging.getLogger("jumpreflect.regression")

DEFAULT_RIDGE = 1e-8


class RegressionRankWarning(UserWarning):
    """a least-squares fit was rank deficient and fell back to ridge"""


class ConditionalExpectation(ABC):
    exact: bool = False

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)

    @abstractmethod
    def __call__(
        self,
        values: np.ndarray,
        step: int,
        features: tp.Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """values indexed by scenario first, any trailing shape; same shape out"""
        ...


class TreeExpectation(ConditionalExpectation):
    """
    Scenarios of an exact tree sharing their first k steps form contiguous blocks
    of branching^(steps - k) rows, so a conditional expectation is a weighted
    block mean broadcast back over the block.
    """

    exact = True

    def __init__(self, weights: np.ndarray, branching: int, steps: int):
        super().__init__(weights)
        assert branching >= 1 and steps >= 1
        assert (
            self.weights.size == branching**steps
        ), f"{self.weights.size} scenarios, not a {branching}-ary tree of depth {steps}"
        self.branching = branching
        self.steps = steps

    def block_size(self, step: int) -> int:
        assert 0 <= step <= self.steps, f"step {step} outside [0, {self.steps}]"
        return self.branching ** (self.steps - step)

    def __call__(
        self,
        values: np.ndarray,
        step: int,
        features: tp.Optional[np.ndarray] = None,
    ) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        block = self.block_size(step)
        nodes = self.weights.size // block
        w = self.weights.reshape(nodes, block)
        v = values.reshape(nodes, block, -1)
        totals = w.sum(axis=1)
        # nodes behind a zero probability label carry no weight, any average will do
        safe = np.where(totals > 0, totals, 1.0)
        node_mean = np.einsum("nb,nbr->nr", w, v) / safe[:, None]
        unweighted = v.mean(axis=1)
        node_mean = np.where((totals > 0)[:, None], node_mean, unweighted)
        return np.repeat(node_mean, block, axis=0).reshape(values.shape)

    def node_values(self, values: np.ndarray, step: int) -> np.ndarray:
        """one representative per history node, (nodes, *trailing)"""
        values = np.asarray(values)
        block = self.block_size(step)
        return values[::block]


def _informative_columns(flat: np.ndarray) -> tp.List[int]:
    """drop constant columns but one, and exact duplicates of earlier columns"""
    keep: tp.List[int] = []
    has_constant = False
    for c in range(flat.shape[1]):
        col = flat[:, c]
        if np.all(col == col[0]):
            if has_constant or col[0] == 0:
                continue
            has_constant = True
            keep.append(c)
            continue
        if any(np.array_equal(col, flat[:, k]) for k in keep):
            continue
        keep.append(c)
    return keep or [0]


class RegressionExpectation(ConditionalExpectation):
    exact = False

    def __init__(self, weights: np.ndarray, ridge: float = DEFAULT_RIDGE):
        super().__init__(weights)
        self.ridge = float(ridge)
        self.fallbacks = 0

    def __call__(
        self,
        values: np.ndarray,
        step: int,
        features: tp.Optional[np.ndarray] = None,
    ) -> np.ndarray:
        assert features is not None, "the regression backend needs step features"
        return self.project(features, values)

    def project(
        self, features: np.ndarray, values: np.ndarray, pooled: bool = False
    ) -> np.ndarray:
        """
        features (S, p) fit every trailing column of `values` on one basis;
        features (S, G, p) fit group g of `values` (S, G, ...) on its own basis,
        or on one shared basis across groups when `pooled`.
        """
        features = np.asarray(features, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        scenarios = values.shape[0]
        if features.ndim == 2:
            fitted = self._fit(
                features[:, None, :], self.weights, values.reshape(scenarios, 1, -1)
            )
            return fitted.reshape(values.shape)

        assert features.ndim == 3, f"features must be 2d or 3d, got {features.shape}"
        groups = features.shape[1]
        assert values.shape[:2] == (scenarios, groups), (
            f"values {values.shape} do not match grouped features {features.shape}"
        )
        if pooled:
            rows = scenarios * groups
            fitted = self._fit(
                features.reshape(rows, 1, -1),
                np.repeat(self.weights, groups) / groups,
                values.reshape(rows, 1, -1),
            )
        else:
            fitted = self._fit(
                features, self.weights, values.reshape(scenarios, groups, -1)
            )
        return fitted.reshape(values.shape)

    def _fit(self, X: np.ndarray, w: np.ndarray, Y: np.ndarray) -> np.ndarray:
        keep = _informative_columns(X.reshape(-1, X.shape[-1]))
        X = X[..., keep]
        p = X.shape[-1]
        gram = np.einsum("sgp,s,sgq->gpq", X, w, X)
        rhs = np.einsum("sgp,s,sgr->gpr", X, w, Y)
        ranks = np.linalg.matrix_rank(gram, hermitian=True)
        deficient = np.atleast_1d(ranks < p)
        if deficient.any():
            self.fallbacks += int(deficient.sum())
            logger.debug(
                f"{int(deficient.sum())}/{deficient.size} regressions rank deficient"
                f" on {p} features, ridge {self.ridge:g}"
            )
            warnings.warn(
                f"rank deficient regression, falling back to ridge {self.ridge:g}",
                RegressionRankWarning,
                stacklevel=3,
            )
            gram = gram + self.ridge * np.eye(p) * deficient[:, None, None]
        beta = np.linalg.solve(gram, rhs)
        return np.einsum("sgp,gpr->sgr", X, beta)


def polynomial_features(state: np.ndarray, degree: int = 2) -> np.ndarray:
    """intercept and all monomials of the last axis up to `degree`"""
    state = np.asarray(state, dtype=np.float64)
    columns = [np.ones(state.shape[:-1])]
    dims = state.shape[-1]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(dims), d):
            columns.append(np.prod(state[..., list(combo)], axis=-1))
    return np.stack(columns, axis=-1)
