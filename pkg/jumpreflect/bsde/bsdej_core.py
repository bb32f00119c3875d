# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Backward induction for the unreflected discrete BSDEJ

    y_k = E_k[y_{k+1}] + f(t_k, y_k or P_k, u_k) dt,   y_n = xi

with u_k = C^{-1} E_k[y_{k+1} dmu_k] the projection of the next values on the
compensated increments (C the one-step covariance). The scheme is explicit in u
and implicit, by damped fixed point, in y when f depends on its own y.

Arrays carry a group axis internally, (scenarios, groups, ...), so that the
particle system can run N equations on a joint ensemble in one pass.
"""

import dataclasses
import enum
import logging
import typing as tp
from pathlib import Path

import numpy as np
import pandas as pd

from jumpreflect.bsde.jump_model import JumpModel, MultiEnsemble, PathEnsemble
from jumpreflect.bsde.loss_ops import DEFAULT_SEARCH_RADIUS, DEFAULT_TOL_BISECT
from jumpreflect.bsde.problem import DriverSpec, TerminalSpec
from jumpreflect.bsde.regression import (
    DEFAULT_RIDGE,
    ConditionalExpectation,
    RegressionExpectation,
    TreeExpectation,
    polynomial_features,
)
from jumpreflect.core.utils import open_write

logger = logging.getLogger("jumpreflect.bsdej")

DEFAULT_IMPLICIT_MAX_ITERS = 100
DEFAULT_IMPLICIT_TOL = 1e-13
DEFAULT_DEGREE = 2

Ensemble = tp.Union[PathEnsemble, MultiEnsemble]
FeatureFn = tp.Callable[[int], tp.Optional[np.ndarray]]


class Backend(str, enum.Enum):
    EXACT = "exact"
    REGRESSION = "regression"

    @classmethod
    def _missing_(cls, value: object) -> tp.Optional["Backend"]:
        # the command line calls the Monte Carlo backend "mc"
        if value == "mc":
            return cls.REGRESSION
        return None


class ImplicitStepError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class SolveOptions:
    """numerical knobs shared by the single and the particle solvers"""

    backend: Backend = Backend.EXACT
    tol_bisect: float = DEFAULT_TOL_BISECT
    search_radius: float = DEFAULT_SEARCH_RADIUS
    ridge: float = DEFAULT_RIDGE
    degree: int = DEFAULT_DEGREE
    implicit_max_iters: int = DEFAULT_IMPLICIT_MAX_ITERS
    implicit_tol: float = DEFAULT_IMPLICIT_TOL
    damping: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "backend", Backend(self.backend))


def make_expectation(
    ensemble: Ensemble,
    backend: tp.Union[Backend, str] = Backend.EXACT,
    ridge: float = DEFAULT_RIDGE,
) -> ConditionalExpectation:
    backend = Backend(backend)
    if backend == Backend.EXACT:
        assert ensemble.is_exact, "the exact backend needs an exact tree ensemble"
        return TreeExpectation(
            ensemble.weights, ensemble.branching, ensemble.model.steps
        )
    return RegressionExpectation(ensemble.weights, ridge=ridge)


def count_features(counts: np.ndarray, degree: int = DEFAULT_DEGREE) -> FeatureFn:
    """step -> polynomial basis of the running counts at that step"""

    def features(step: int) -> np.ndarray:
        return polynomial_features(counts[..., step, :], degree)

    return features


def representation_matrix(model: JumpModel) -> np.ndarray:
    """pseudo inverse of the increment covariance; marks with nu_j = 0 get u_j = 0"""
    return np.linalg.pinv(model.increment_covariance(), hermitian=True)


def _project(
    model: JumpModel,
    expectation: ConditionalExpectation,
    values_next: np.ndarray,
    increments: np.ndarray,
    step: int,
    features: tp.Optional[np.ndarray],
) -> tp.Tuple[np.ndarray, np.ndarray]:
    """(E_k[v], u_k) from a single fit of v and v * dmu"""
    targets = np.concatenate(
        [values_next[..., None], values_next[..., None] * increments], axis=-1
    )
    moments = expectation(targets, step, features)
    if model.n_marks == 0:
        return moments[..., 0], np.zeros(values_next.shape + (0,))
    return moments[..., 0], moments[..., 1:] @ representation_matrix(model)


@dataclasses.dataclass
class BSDEJSolution:
    """
    y (S, [G,] n+1) with NaN outside the solved window, u (S, [G,] n, m) and the
    driver values f (S, [G,] n) used at each step.
    """

    y: np.ndarray
    u: np.ndarray
    f_values: np.ndarray
    window: tp.Tuple[int, int]
    implicit_iters: int = 0


def backward_induction(
    model: JumpModel,
    increments: np.ndarray,
    expectation: ConditionalExpectation,
    terminal_values: np.ndarray,
    driver: DriverSpec,
    window: tp.Optional[tp.Tuple[int, int]] = None,
    features: tp.Optional[FeatureFn] = None,
    frozen_P: tp.Optional[np.ndarray] = None,
    frozen_Q: tp.Optional[np.ndarray] = None,
    implicit_max_iters: int = DEFAULT_IMPLICIT_MAX_ITERS,
    implicit_tol: float = DEFAULT_IMPLICIT_TOL,
    damping: float = 1.0,
) -> BSDEJSolution:
    """grouped engine, every array has a group axis right after the scenarios"""
    n = model.steps
    a, b = window or (0, n)
    assert 0 <= a < b <= n, f"invalid window [{a}, {b}] for {n} steps"
    assert 0 < damping <= 1, f"damping must be in (0, 1], got {damping}"
    scenarios, groups = increments.shape[:2]
    expected = (scenarios, groups)
    assert terminal_values.shape == expected, (
        f"terminal values {terminal_values.shape} for {expected} scenarios x groups"
    )
    times = model.times
    dt = model.dt

    y = np.full((scenarios, groups, n + 1), np.nan)
    u = np.zeros((scenarios, groups, n, model.n_marks))
    f_values = np.zeros((scenarios, groups, n))
    y[:, :, b] = terminal_values
    total_iters = 0

    for k in range(b - 1, a - 1, -1):
        X = features(k) if features is not None else None
        ev, u_k = _project(
            model, expectation, y[:, :, k + 1], increments[:, :, k], k, X
        )
        u[:, :, k] = u_k
        u_eval = frozen_Q[:, :, k] if frozen_Q is not None else u_k
        t = float(times[k])

        if frozen_P is not None:
            f = driver(t, frozen_P[:, :, k], u_eval)
            y_k = ev + dt * f
        elif driver.depends_on_y:
            y_k, iters = _implicit_step(
                driver, t, dt, ev, u_eval, implicit_max_iters, implicit_tol, damping
            )
            total_iters += iters
            f = driver(t, y_k, u_eval)
        else:
            f = driver(t, ev, u_eval)
            y_k = ev + dt * f
        f_values[:, :, k] = f
        y[:, :, k] = y_k

    return BSDEJSolution(y, u, f_values, (a, b), implicit_iters=total_iters)


def _implicit_step(
    driver: DriverSpec,
    t: float,
    dt: float,
    ev: np.ndarray,
    u: np.ndarray,
    max_iters: int,
    tol: float,
    damping: float,
) -> tp.Tuple[np.ndarray, int]:
    """y = ev + dt f(t, y, u) by damped fixed point"""
    y = ev.copy()
    for it in range(1, max_iters + 1):
        update = (1.0 - damping) * y + damping * (ev + dt * driver(t, y, u))
        change = float(np.max(np.abs(update - y), initial=0.0))
        y = update
        if change <= tol * (1.0 + float(np.max(np.abs(y), initial=0.0))):
            return y, it
    raise ImplicitStepError(
        f"implicit step at t={t:.6g} did not converge in {max_iters} iterations"
        f" (last change {change:.3g}); reduce dt or the driver's y-Lipschitz constant"
    )


def _with_group_axis(array: tp.Optional[np.ndarray]) -> tp.Optional[np.ndarray]:
    return None if array is None else np.asarray(array, dtype=np.float64)[:, None]


def _drop_group_axis(solution: BSDEJSolution) -> BSDEJSolution:
    return dataclasses.replace(
        solution,
        y=solution.y[:, 0],
        u=solution.u[:, 0],
        f_values=solution.f_values[:, 0],
    )


def terminal_values_for(
    ensemble: PathEnsemble, terminal: tp.Union[TerminalSpec, np.ndarray]
) -> np.ndarray:
    if isinstance(terminal, TerminalSpec):
        return np.asarray(
            terminal(ensemble.model, ensemble.counts[:, -1, :]), dtype=np.float64
        )
    values = np.asarray(terminal, dtype=np.float64)
    assert values.shape == (ensemble.size,), (
        f"terminal values {values.shape} for {ensemble.size} scenarios"
    )
    return values


def solve_bsdej(
    ensemble: PathEnsemble,
    driver: DriverSpec,
    terminal: tp.Union[TerminalSpec, np.ndarray],
    frozen_P: tp.Optional[np.ndarray] = None,
    backend: tp.Union[Backend, str] = Backend.EXACT,
    expectation: tp.Optional[ConditionalExpectation] = None,
    window: tp.Optional[tp.Tuple[int, int]] = None,
    features: tp.Optional[FeatureFn] = None,
    degree: int = DEFAULT_DEGREE,
    implicit_max_iters: int = DEFAULT_IMPLICIT_MAX_ITERS,
    implicit_tol: float = DEFAULT_IMPLICIT_TOL,
    damping: float = 1.0,
) -> BSDEJSolution:
    """
    Solve one BSDEJ on `ensemble`. `terminal` is evaluated on the terminal counts,
    or holds the values at the window end when solving a stitched window.
    With `frozen_P` (S, n+1) the driver sees P instead of y.
    """
    if expectation is None:
        expectation = make_expectation(ensemble, backend)
    if features is None and not expectation.exact:
        features = count_features(ensemble.counts, degree)
    if window is not None and window[1] != ensemble.model.steps:
        assert not isinstance(terminal, TerminalSpec), (
            "a window ending before T needs the values at its end"
        )
    solution = backward_induction(
        ensemble.model,
        ensemble.increments[:, None],
        expectation,
        terminal_values_for(ensemble, terminal)[:, None],
        driver,
        window=window,
        features=features,
        frozen_P=_with_group_axis(frozen_P),
        implicit_max_iters=implicit_max_iters,
        implicit_tol=implicit_tol,
        damping=damping,
    )
    return _drop_group_axis(solution)


def conditional_expectation(
    ensemble: PathEnsemble,
    values: np.ndarray,
    step: int,
    backend: tp.Union[Backend, str] = Backend.EXACT,
    features: tp.Optional[np.ndarray] = None,
    degree: int = DEFAULT_DEGREE,
) -> np.ndarray:
    """E[values | F_step] on the scenarios of `ensemble`"""
    expectation = make_expectation(ensemble, backend)
    if features is None and not expectation.exact:
        features = polynomial_features(ensemble.counts[:, step, :], degree)
    return expectation(np.asarray(values, dtype=np.float64), step, features)


def extract_u(
    ensemble: PathEnsemble,
    values_next: np.ndarray,
    step: int,
    backend: tp.Union[Backend, str] = Backend.EXACT,
    features: tp.Optional[np.ndarray] = None,
    degree: int = DEFAULT_DEGREE,
) -> np.ndarray:
    """per-mark representation coefficients u_step, (scenarios, marks)"""
    expectation = make_expectation(ensemble, backend)
    if features is None and not expectation.exact:
        features = polynomial_features(ensemble.counts[:, step, :], degree)
    _, u = _project(
        ensemble.model,
        expectation,
        np.asarray(values_next, dtype=np.float64),
        ensemble.increments[:, step],
        step,
        features,
    )
    return u


def one_step_residuals(ensemble: PathEnsemble, solution: BSDEJSolution) -> np.ndarray:
    """y_{k+1} - y_k + f_k dt - sum_j u_k(j) dmu_k(j).

    Shape (scenarios, steps), NaN off the solved window.
    """
    dt = ensemble.model.dt
    y, u = solution.y, solution.u
    martingale = np.einsum("skm,skm->sk", u, ensemble.increments)
    residuals = y[:, 1:] - y[:, :-1] + dt * solution.f_values - martingale
    a, b = solution.window
    residuals[:, :a] = np.nan
    residuals[:, b:] = np.nan
    return residuals


def dump_solution_csv(
    ensemble: PathEnsemble, solution: BSDEJSolution, output: Path
) -> Path:
    """one row per (scenario, step): y and u_1..u_m, u empty at the last step"""
    scenarios, points = solution.y.shape
    index = np.indices((scenarios, points)).reshape(2, -1)
    frame = pd.DataFrame(
        {"scenario": index[0], "step": index[1], "y": solution.y.reshape(-1)}
    )
    padded = np.concatenate(
        [solution.u, np.full((scenarios, 1, ensemble.model.n_marks), np.nan)], axis=1
    )
    for j in range(ensemble.model.n_marks):
        frame[f"u_{j + 1}"] = padded[:, :, j].reshape(-1)
    with open_write(output) as o:
        frame.to_csv(o, index=False)
    return output
