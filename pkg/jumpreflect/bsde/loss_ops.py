# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Running losses l(t, y) and the reflection operators built on them.

`l_bar_operator` is the root of x -> E[l(t, x + X)] over a discrete cloud,
`l_operator` its positive part: the smallest nonnegative shift that makes the
mean constraint hold. Both are solved by an expanding bracket followed by
bisection, vectorized over many clouds at once (one per scenario when the
particle system computes its empirical reflection node by node).
"""

import dataclasses
import logging
import math
import typing as tp
from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import interpolate

logger = logging.getLogger("jumpreflect.loss")

DEFAULT_TOL_BISECT = 1e-10
DEFAULT_SEARCH_RADIUS = 1e6
_MAX_BISECTIONS = 200


class BracketNotFoundError(ValueError):
    """the constraint map keeps one sign over the whole search range"""


class LossSpec(ABC):
    family: str = "abstract"

    def __init__(
        self,
        kappa_lower: float,
        kappa_upper: float,
        time_lipschitz: float = 0.0,
    ):
        if not (kappa_lower > 0 and kappa_upper >= kappa_lower):
            raise ValueError(
                f"need kappa_upper >= kappa_lower > 0, got {kappa_lower}, {kappa_upper}"
            )
        if time_lipschitz < 0:
            raise ValueError(f"time_lipschitz must be >= 0, got {time_lipschitz}")
        self.kappa_lower = float(kappa_lower)
        self.kappa_upper = float(kappa_upper)
        self.time_lipschitz = float(time_lipschitz)

    @abstractmethod
    def evaluate(self, t: float, y: np.ndarray) -> np.ndarray:
        ...

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.evaluate(t, y)

    @abstractmethod
    def growth_bound(self, horizon: float) -> float:
        """C with |l(t, y)| <= C (1 + |y|) for t in [0, horizon]"""
        ...

    @property
    def kappa(self) -> float:
        return self.kappa_upper / self.kappa_lower

    @property
    def r_bar(self) -> float:
        return self.time_lipschitz / self.kappa_lower

    def describe(self) -> tp.Dict[str, tp.Any]:
        return {
            "family": self.family,
            "kappa_lower": self.kappa_lower,
            "kappa_upper": self.kappa_upper,
            "time_lipschitz": self.time_lipschitz,
        }


class LinearLoss(LossSpec):
    family = "linear"

    def __init__(self, slope: float = 1.0, intercept: float = 0.0):
        super().__init__(kappa_lower=slope, kappa_upper=slope)
        self.slope = float(slope)
        self.intercept = float(intercept)

    def evaluate(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.slope * np.asarray(y, dtype=np.float64) + self.intercept

    def growth_bound(self, horizon: float) -> float:
        return max(self.slope, abs(self.intercept))


class AffineThresholdLoss(LossSpec):
    """slope * (y - level - drift * t): a moving floor on the mean of Y"""

    family = "affine-threshold"

    def __init__(self, slope: float = 1.0, level: float = 0.0, drift: float = 0.0):
        super().__init__(
            kappa_lower=slope,
            kappa_upper=slope,
            time_lipschitz=abs(slope * drift),
        )
        self.slope = float(slope)
        self.level = float(level)
        self.drift = float(drift)

    def threshold(self, t: float) -> float:
        return self.level + self.drift * t

    def evaluate(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.slope * (np.asarray(y, dtype=np.float64) - self.threshold(t))

    def growth_bound(self, horizon: float) -> float:
        return self.slope * max(1.0, abs(self.level) + abs(self.drift) * horizon)


class KinkedLoss(LossSpec):
    """slope kappa_lower below the moving threshold, kappa_upper above it"""

    family = "kinked"

    def __init__(
        self,
        kappa_lower: float = 1.0,
        kappa_upper: float = 2.0,
        level: float = 0.0,
        drift: float = 0.0,
    ):
        super().__init__(
            kappa_lower=kappa_lower,
            kappa_upper=kappa_upper,
            time_lipschitz=abs(kappa_upper * drift),
        )
        self.level = float(level)
        self.drift = float(drift)

    def evaluate(self, t: float, y: np.ndarray) -> np.ndarray:
        z = np.asarray(y, dtype=np.float64) - (self.level + self.drift * t)
        return self.kappa_upper * np.maximum(z, 0.0) + self.kappa_lower * np.minimum(
            z, 0.0
        )

    def growth_bound(self, horizon: float) -> float:
        return self.kappa_upper * max(1.0, abs(self.level) + abs(self.drift) * horizon)


class CubicLoss(LossSpec):
    """linear * y + cubic * y^3 + shift; strictly increasing but not bi-Lipschitz"""

    family = "cubic"

    def __init__(self, linear: float = 2.0, cubic: float = 1.0, shift: float = 0.0):
        if cubic < 0:
            raise ValueError("cubic coefficient must be >= 0 to stay increasing")
        super().__init__(kappa_lower=linear, kappa_upper=math.inf)
        self.linear = float(linear)
        self.cubic = float(cubic)
        self.shift = float(shift)

    def evaluate(self, t: float, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return self.linear * y + self.cubic * y**3 + self.shift

    def growth_bound(self, horizon: float) -> float:
        return math.inf if self.cubic > 0 else max(self.linear, abs(self.shift))


class TableLoss(LossSpec):
    """
    Loss read from a CSV with columns (t, y, l) on a rectangular grid, bilinear
    inside the table and linearly extrapolated outside. A table with a single t
    row is time independent.
    """

    family = "custom-table"

    def __init__(
        self,
        path: tp.Union[str, Path],
        kappa_lower: float,
        kappa_upper: float,
        time_lipschitz: float = 0.0,
        growth: tp.Optional[float] = None,
    ):
        super().__init__(kappa_lower, kappa_upper, time_lipschitz)
        self.path = str(path)
        self._setup(pd.read_csv(self.path), growth)

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        kappa_lower: float,
        kappa_upper: float,
        time_lipschitz: float = 0.0,
        growth: tp.Optional[float] = None,
    ) -> "TableLoss":
        loss = cls.__new__(cls)
        LossSpec.__init__(loss, kappa_lower, kappa_upper, time_lipschitz)
        loss.path = "<frame>"
        loss._setup(frame, growth)
        return loss

    def _setup(self, frame: pd.DataFrame, growth: tp.Optional[float]) -> None:
        missing = {"t", "y", "l"} - set(frame.columns)
        if missing:
            raise ValueError(f"loss table {self.path} lacks columns {sorted(missing)}")
        if frame.duplicated(subset=["t", "y"]).any():
            raise ValueError(f"loss table {self.path} has duplicated (t, y) points")
        ts = np.sort(frame["t"].unique())
        ys = np.sort(frame["y"].unique())
        if len(frame) != len(ts) * len(ys):
            raise ValueError(
                f"loss table {self.path} is not a rectangular grid:"
                f" {len(frame)} rows for {len(ts)} times x {len(ys)} levels"
            )
        if len(ys) < 2:
            raise ValueError(f"loss table {self.path} needs at least two y levels")
        grid = (
            frame.pivot(index="t", columns="y", values="l")
            .reindex(index=ts, columns=ys)
            .to_numpy(dtype=np.float64)
        )
        self.ts = ts.astype(np.float64)
        self.ys = ys.astype(np.float64)
        self.grid = grid
        if len(ts) == 1:
            self._interp: tp.Callable[[float, np.ndarray], np.ndarray] = self._interp_y(
                interpolate.interp1d(
                    self.ys, grid[0], kind="linear", fill_value="extrapolate"
                )
            )
        else:
            self._interp = self._interp_ty(
                interpolate.RegularGridInterpolator(
                    (self.ts, self.ys),
                    grid,
                    method="linear",
                    bounds_error=False,
                    fill_value=None,
                )
            )
        if growth is None:
            edge = np.abs(grid) / (1.0 + np.abs(self.ys))
            growth = float(max(edge.max(), self.kappa_upper))
        self.growth = float(growth)

    @staticmethod
    def _interp_y(
        fn: tp.Callable[[np.ndarray], np.ndarray]
    ) -> tp.Callable[[float, np.ndarray], np.ndarray]:
        return lambda t, y: fn(y)

    @staticmethod
    def _interp_ty(
        fn: interpolate.RegularGridInterpolator,
    ) -> tp.Callable[[float, np.ndarray], np.ndarray]:
        def evaluate(t: float, y: np.ndarray) -> np.ndarray:
            points = np.column_stack([np.full(y.size, float(t)), y.ravel()])
            return fn(points).reshape(y.shape)

        return evaluate

    def evaluate(self, t: float, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.asarray(self._interp(t, y), dtype=np.float64)

    def growth_bound(self, horizon: float) -> float:
        return self.growth


@dataclasses.dataclass(frozen=True, eq=False)
class SampleCloud:
    """a discrete law: values with probabilities"""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).ravel()
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if values.size == 0:
            raise ValueError("empty sample cloud")
        if weights.shape != values.shape:
            raise ValueError(f"{values.size} values but {weights.size} weights")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("cloud weights must be nonnegative and sum to 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, values: tp.Sequence[float]) -> "SampleCloud":
        values = np.asarray(values, dtype=np.float64).ravel()
        return cls(values, np.full(values.size, 1.0 / max(values.size, 1)))

    def shifted(self, c: float) -> "SampleCloud":
        return SampleCloud(self.values + c, self.weights)

    def mean(self) -> float:
        return float(self.weights @ self.values)


def _constraint_map(
    loss: LossSpec, t: float, values: np.ndarray, weights: np.ndarray
) -> tp.Callable[[np.ndarray], np.ndarray]:
    """x (rows,) -> sum_i w_i l(t, x + v_i) row by row"""

    def g(x: np.ndarray) -> np.ndarray:
        return np.sum(weights * loss.evaluate(t, x[:, None] + values), axis=1)

    return g


def _bisect(
    g: tp.Callable[[np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float,
) -> np.ndarray:
    """g(lo) < 0 <= g(hi) row-wise; returns the upper end, so the constraint holds"""
    for _ in range(_MAX_BISECTIONS):
        open_rows = hi - lo > tol
        if not open_rows.any():
            break
        mid = 0.5 * (lo + hi)
        above = g(mid) >= 0
        hi = np.where(open_rows & above, mid, hi)
        lo = np.where(open_rows & ~above, mid, lo)
    return hi


def _expand_up(
    g: tp.Callable[[np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    radius: float,
) -> tp.Tuple[np.ndarray, np.ndarray]:
    below = g(hi) < 0
    while below.any():
        if np.any(below & (hi >= radius)):
            raise BracketNotFoundError(
                f"constraint map stays negative up to the search radius {radius:g};"
                " the loss never turns positive on this data"
            )
        lo = np.where(below, hi, lo)
        hi = np.where(below, np.minimum(2.0 * np.abs(hi) + 1.0, radius), hi)
        below = g(hi) < 0
    return lo, hi


def _rows(
    values: np.ndarray, weights: tp.Optional[np.ndarray]
) -> tp.Tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    assert values.ndim == 2 and values.shape[1] >= 1, "empty sample cloud"
    if weights is None:
        weights = np.full(values.shape[1], 1.0 / values.shape[1])
    return values, np.asarray(weights, dtype=np.float64)


def l_bar_rows(
    loss: LossSpec,
    t: float,
    values: np.ndarray,
    weights: tp.Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL_BISECT,
    radius: float = DEFAULT_SEARCH_RADIUS,
) -> np.ndarray:
    """root of x -> E[l(t, x + X)] for each row of `values`; may be negative"""
    values, weights = _rows(values, weights)
    g = _constraint_map(loss, t, values, weights)
    rows = values.shape[0]
    lo, hi = _expand_up(g, np.full(rows, -1.0), np.full(rows, 1.0), radius)
    above = g(lo) >= 0
    while above.any():
        if np.any(above & (lo <= -radius)):
            raise BracketNotFoundError(
                f"constraint map stays nonnegative down to -{radius:g}"
            )
        hi = np.where(above, lo, hi)
        lo = np.where(above, np.maximum(-2.0 * np.abs(lo) - 1.0, -radius), lo)
        above = g(lo) >= 0
    return _bisect(g, lo, hi, tol)


def l_operator_rows(
    loss: LossSpec,
    t: float,
    values: np.ndarray,
    weights: tp.Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL_BISECT,
    radius: float = DEFAULT_SEARCH_RADIUS,
) -> np.ndarray:
    """smallest x >= 0 with E[l(t, x + X)] >= 0, row by row"""
    values, weights = _rows(values, weights)
    g = _constraint_map(loss, t, values, weights)
    out = np.zeros(values.shape[0])
    violated = g(out) < 0
    if not violated.any():
        return out
    sub_weights = weights[violated] if weights.ndim == 2 else weights
    g_sub = _constraint_map(loss, t, values[violated], sub_weights)
    rows = int(violated.sum())
    lo, hi = _expand_up(g_sub, np.zeros(rows), np.ones(rows), radius)
    out[violated] = _bisect(g_sub, lo, hi, tol)
    return out


def l_bar_operator(
    loss: LossSpec,
    t: float,
    cloud: SampleCloud,
    tol: float = DEFAULT_TOL_BISECT,
    radius: float = DEFAULT_SEARCH_RADIUS,
) -> float:
    return float(l_bar_rows(loss, t, cloud.values, cloud.weights, tol, radius)[0])


def l_operator(
    loss: LossSpec,
    t: float,
    cloud: SampleCloud,
    tol: float = DEFAULT_TOL_BISECT,
    radius: float = DEFAULT_SEARCH_RADIUS,
) -> float:
    return float(l_operator_rows(loss, t, cloud.values, cloud.weights, tol, radius)[0])


def empirical_l_operator_rows(
    loss: LossSpec,
    t: float,
    values: np.ndarray,
    tol: float = DEFAULT_TOL_BISECT,
    radius: float = DEFAULT_SEARCH_RADIUS,
) -> np.ndarray:
    """
    uniform clouds over the last axis; values are sorted first so that the
    result does not depend on the order of the particles
    """
    values = np.sort(np.asarray(values, dtype=np.float64), axis=-1)
    return l_operator_rows(loss, t, values, None, tol, radius)


def empirical_l_operator(
    loss: LossSpec,
    t: float,
    values: tp.Sequence[float],
    tol: float = DEFAULT_TOL_BISECT,
    radius: float = DEFAULT_SEARCH_RADIUS,
) -> float:
    rows = np.asarray(values)[None, :]
    return float(empirical_l_operator_rows(loss, t, rows, tol, radius)[0])


def expected_loss(
    loss: LossSpec, t: float, values: np.ndarray, weights: np.ndarray
) -> float:
    """sum_i w_i l(t, v_i)"""
    return float(np.asarray(weights) @ loss.evaluate(t, np.asarray(values)))
