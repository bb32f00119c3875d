# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Mean reflected BSDEJ with a deterministic flat K.

For a driver that does not see Y, the solution is the unreflected (y, u) shifted
by K_T - K_t = max over grid times s >= t of L_s(y_s). A driver that depends on Y
is handled by Picard iteration on P -> Y^P, window by window from the horizon
backwards, the window length following the contraction estimate
h <= min(1 / (4 lambda kappa), L / (L + lambda A)).
"""

import dataclasses
import logging
import math
import typing as tp

import numpy as np

from jumpreflect.bsde.bsdej_core import (
    BSDEJSolution,
    SolveOptions,
    make_expectation,
    solve_bsdej,
    terminal_values_for,
)
from jumpreflect.bsde.jump_model import PathEnsemble
from jumpreflect.bsde.loss_ops import LossSpec, l_operator_rows
from jumpreflect.bsde.problem import DriverSpec, TerminalSpec
from jumpreflect.bsde.regression import ConditionalExpectation

logger = logging.getLogger("jumpreflect.picard")

DEFAULT_MAX_ITERS = 50
DEFAULT_TOL_FIXED_POINT = 1e-10
DEFAULT_GLOBAL_DAMPING = 0.5


class PicardNonConvergence(RuntimeError):
    def __init__(self, message: str, log: tp.List[tp.Dict[str, tp.Any]]):
        super().__init__(message)
        self.log = log


@dataclasses.dataclass
class PicardConfig:
    A0: float
    A: float
    delta: float
    h_hat: float
    steps_per_interval: int
    intervals: tp.List[tp.Tuple[int, int]]
    max_iters: int = DEFAULT_MAX_ITERS
    tol_fixed_point: float = DEFAULT_TOL_FIXED_POINT

    def __post_init__(self) -> None:
        assert self.A >= self.A0, f"A={self.A} below A_0={self.A0}"
        assert self.steps_per_interval >= 1
        assert self.max_iters >= 1

    @property
    def interval_count(self) -> int:
        return len(self.intervals)


def compute_picard_window(
    driver: DriverSpec,
    loss: LossSpec,
    horizon: float,
    steps: int,
    A: tp.Optional[float] = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol_fixed_point: float = DEFAULT_TOL_FIXED_POINT,
    steps_per_interval: tp.Optional[int] = None,
) -> PicardConfig:
    """
    Contraction window for the Picard map, snapped to the grid: windows hold a
    whole number of steps, counted from the horizon, the first one possibly shorter.
    `steps_per_interval` overrides the computed length.
    """
    L = driver.bound
    lam = driver.lipschitz
    kappa = loss.kappa
    # lam = 0 drops the coupling terms, also for an unbounded kappa
    coupling = 4.0 * lam * kappa if lam > 0 else 0.0
    A0 = (3.0 + 2.0 * kappa + coupling) * L if L > 0 else 0.0
    A = A0 if A is None else max(float(A), A0)
    push = lam * A if lam > 0 else 0.0
    delta = min(L / (L + push), horizon) if L > 0 else horizon
    if lam == 0 or kappa == 0:
        h_hat = horizon
    else:
        h_hat = min(1.0 / (4.0 * lam * kappa), delta)

    dt = horizon / steps
    if steps_per_interval is None:
        if lam == 0 or kappa == 0:
            steps_per_interval = steps
        else:
            steps_per_interval = max(1, math.floor(h_hat / dt + 1e-9))
    steps_per_interval = min(int(steps_per_interval), steps)

    intervals = []
    b = steps
    while b > 0:
        a = max(0, b - steps_per_interval)
        intervals.append((a, b))
        b = a
    intervals.reverse()
    logger.info(
        f"Picard window: A_0={A0:.4g} delta={delta:.4g} h_hat={h_hat:.4g}"
        f" -> {len(intervals)} interval(s) of {steps_per_interval} step(s)"
    )
    return PicardConfig(
        A0=A0,
        A=A,
        delta=delta,
        h_hat=h_hat,
        steps_per_interval=steps_per_interval,
        intervals=intervals,
        max_iters=max_iters,
        tol_fixed_point=tol_fixed_point,
    )


@dataclasses.dataclass
class SolutionTriple:
    """
    Y (S, n+1), U (S, n, m), K (n+1) deterministic with K_0 = 0. `y` is the
    unreflected part, Y = y + (K_T - K) except for a terminal reflection, which
    only a Monte Carlo terminal that is infeasible on the sample produces.
    """

    Y: np.ndarray
    U: np.ndarray
    K: np.ndarray
    y: np.ndarray
    f_values: np.ndarray
    ell: np.ndarray
    margins: np.ndarray
    terminal_reflection: float = 0.0
    times: tp.Optional[np.ndarray] = None
    picard_log: tp.List[tp.Dict[str, tp.Any]] = dataclasses.field(default_factory=list)
    intervals: tp.List[tp.Tuple[int, int]] = dataclasses.field(default_factory=list)

    def report(
        self, loss: LossSpec, weights: np.ndarray, times: np.ndarray
    ) -> tp.Dict[str, tp.Any]:
        return {
            "K": self.K,
            "constraint_margins": self.margins,
            "min_constraint_margin": float(np.min(self.margins)),
            "flatness_residual": flatness_residual(self, loss, weights, times),
            "terminal_reflection": self.terminal_reflection,
            "Y0_mean": float(weights @ self.Y[:, 0]),
            "picard_log": self.picard_log,
            "intervals": self.intervals,
            "note": "residuals certify the discrete solve, not uniqueness",
        }


def constraint_margins(
    loss: LossSpec, times: np.ndarray, Y: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """E[l(t_k, Y_k)] under the scenario weights, one per grid time"""
    return np.array(
        [float(weights @ loss(float(t), Y[:, k])) for k, t in enumerate(times)]
    )


def _reflection_amounts(
    loss: LossSpec,
    times: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    window: tp.Tuple[int, int],
    options: SolveOptions,
) -> np.ndarray:
    a, b = window
    ell = np.zeros(len(times))
    for k in range(a, b + 1):
        ell[k] = l_operator_rows(
            loss,
            float(times[k]),
            y[None, :, k],
            weights,
            tol=options.tol_bisect,
            radius=options.search_radius,
        )[0]
    return ell


@dataclasses.dataclass
class _WindowSolve:
    bsde: BSDEJSolution
    ell: np.ndarray
    # max over [k, b] of ell, the local K_b - K_k
    shift: np.ndarray


def _reflect_window(
    ensemble: PathEnsemble,
    driver: DriverSpec,
    terminal: tp.Union[TerminalSpec, np.ndarray],
    loss: LossSpec,
    frozen_P: tp.Optional[np.ndarray],
    window: tp.Tuple[int, int],
    expectation: ConditionalExpectation,
    options: SolveOptions,
) -> _WindowSolve:
    a, b = window
    bsde = solve_bsdej(
        ensemble,
        driver,
        terminal,
        frozen_P=frozen_P,
        expectation=expectation,
        window=window,
        degree=options.degree,
        implicit_max_iters=options.implicit_max_iters,
        implicit_tol=options.implicit_tol,
        damping=options.damping,
    )
    times = ensemble.model.times
    ell = _reflection_amounts(loss, times, bsde.y, ensemble.weights, window, options)
    shift = np.zeros(len(times))
    shift[a : b + 1] = np.maximum.accumulate(ell[a : b + 1][::-1])[::-1]
    return _WindowSolve(bsde, ell, shift)


def _assemble(
    ensemble: PathEnsemble,
    loss: LossSpec,
    pieces: tp.List[tp.Tuple[tp.Tuple[int, int], _WindowSolve]],
    picard_log: tp.List[tp.Dict[str, tp.Any]],
) -> SolutionTriple:
    """pieces ordered from the earliest window.

    Earlier windows own [a, b), the last one owns [a, n].
    """
    model = ensemble.model
    n = model.steps
    S = ensemble.size
    Y = np.empty((S, n + 1))
    U = np.zeros((S, n, model.n_marks))
    f_values = np.zeros((S, n))
    ell = np.zeros(n + 1)
    remaining = np.zeros(n + 1)

    carried = 0.0
    terminal_reflection = 0.0
    for (a, b), piece in reversed(pieces):
        last = b == n
        stop = b + 1 if last else b
        local = piece.shift[a:stop]
        if last:
            terminal_reflection = float(piece.shift[n])
            local = local - terminal_reflection
        remaining[a:stop] = local + carried
        Y[:, a:stop] = piece.bsde.y[:, a:stop] + piece.shift[a:stop]
        U[:, a:b] = piece.bsde.u[:, a:b]
        f_values[:, a:b] = piece.bsde.f_values[:, a:b]
        ell[a:stop] = piece.ell[a:stop]
        carried = remaining[a]

    K = remaining[0] - remaining
    y = Y - remaining - terminal_reflection
    if terminal_reflection > 0:
        logger.warning(
            f"terminal condition infeasible on this sample: reflection"
            f" {terminal_reflection:.3g} at T"
        )
    margins = constraint_margins(loss, model.times, Y, ensemble.weights)
    return SolutionTriple(
        Y=Y,
        U=U,
        K=K,
        y=y,
        f_values=f_values,
        ell=ell,
        margins=margins,
        terminal_reflection=terminal_reflection,
        times=model.times,
        picard_log=picard_log,
        intervals=[w for w, _ in pieces],
    )


def reflect_constant_driver(
    ensemble: PathEnsemble,
    driver: DriverSpec,
    terminal: TerminalSpec,
    loss: LossSpec,
    frozen_P: tp.Optional[np.ndarray] = None,
    options: SolveOptions = SolveOptions(),
) -> SolutionTriple:
    """
    One representation step: the driver must not depend on Y, unless a frozen
    process P (S, n+1) is supplied in its place.
    """
    assert frozen_P is not None or not driver.depends_on_y, (
        "reflect_constant_driver needs a driver free of y, or a frozen P"
    )
    expectation = make_expectation(ensemble, options.backend, options.ridge)
    window = (0, ensemble.model.steps)
    piece = _reflect_window(
        ensemble, driver, terminal, loss, frozen_P, window, expectation, options
    )
    return _assemble(ensemble, loss, [(window, piece)], [])


def _sup_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old), initial=0.0))


def solve_mean_reflected(
    ensemble: PathEnsemble,
    driver: DriverSpec,
    terminal: TerminalSpec,
    loss: LossSpec,
    config: tp.Optional[PicardConfig] = None,
    options: SolveOptions = SolveOptions(),
) -> SolutionTriple:
    model = ensemble.model
    if not driver.depends_on_y:
        solution = reflect_constant_driver(
            ensemble, driver, terminal, loss, options=options
        )
        solution.picard_log.append(
            {"interval": [0, model.steps], "iteration": 1, "change": 0.0}
        )
        return solution

    if config is None:
        config = compute_picard_window(driver, loss, model.horizon, model.steps)
    assert config.intervals[-1][1] == model.steps and config.intervals[0][0] == 0, (
        f"Picard intervals {config.intervals} do not cover {model.steps} steps"
    )
    expectation = make_expectation(ensemble, options.backend, options.ridge)
    # bisection noise in the reflection amounts bounds how small a change can get
    stop_at = config.tol_fixed_point + 2.0 * options.tol_bisect
    log: tp.List[tp.Dict[str, tp.Any]] = []
    pieces: tp.List[tp.Tuple[tp.Tuple[int, int], _WindowSolve]] = []
    end_values: tp.Union[TerminalSpec, np.ndarray] = terminal

    for a, b in reversed(config.intervals):
        P = np.zeros((ensemble.size, model.steps + 1))
        previous_change = None
        for it in range(1, config.max_iters + 1):
            piece = _reflect_window(
                ensemble, driver, end_values, loss, P, (a, b), expectation, options
            )
            Y_window = piece.bsde.y[:, a : b + 1] + piece.shift[a : b + 1]
            change = _sup_change(Y_window, P[:, a : b + 1])
            ratio = change / previous_change if previous_change else None
            entry = {
                "interval": [a, b],
                "iteration": it,
                "change": change,
                "ratio": ratio,
            }
            log.append(entry)
            logger.info(
                f"window [{a}, {b}] iteration {it}: change {change:.3e}"
                + (f" ratio {ratio:.3f}" if ratio is not None else "")
            )
            P[:, a : b + 1] = Y_window
            previous_change = change
            if change <= stop_at:
                break
        else:
            raise PicardNonConvergence(
                f"Picard iteration on window [{a}, {b}] did not reach"
                f" {config.tol_fixed_point:g} in {config.max_iters} iterations"
                f" (last change {change:.3g}); shorten the windows",
                log,
            )
        # one more pass with the converged P so that y, u and f belong to it
        piece = _reflect_window(
            ensemble, driver, end_values, loss, P, (a, b), expectation, options
        )
        pieces.append(((a, b), piece))
        end_values = piece.bsde.y[:, a] + piece.shift[a]

    pieces.reverse()
    return _assemble(ensemble, loss, pieces, log)


def solve_mean_reflected_global(
    ensemble: PathEnsemble,
    driver: DriverSpec,
    terminal: TerminalSpec,
    loss: LossSpec,
    damping: float = DEFAULT_GLOBAL_DAMPING,
    max_iters: int = 2000,
    tol: float = 1e-12,
    options: SolveOptions = SolveOptions(),
) -> SolutionTriple:
    """damped Picard on the whole horizon at once, used as an independent check"""
    assert 0 < damping <= 1
    model = ensemble.model
    P = np.zeros((ensemble.size, model.steps + 1))
    log: tp.List[tp.Dict[str, tp.Any]] = []
    for it in range(1, max_iters + 1):
        solution = reflect_constant_driver(ensemble, driver, terminal, loss, P, options)
        change = _sup_change(solution.Y, P)
        log.append({"interval": [0, model.steps], "iteration": it, "change": change})
        if change <= tol + 2.0 * options.tol_bisect:
            solution.picard_log = log
            return solution
        P = (1.0 - damping) * P + damping * solution.Y
    raise PicardNonConvergence(
        f"global iteration did not reach {tol:g} in {max_iters} iterations", log
    )


def flatness_residual(
    solution: SolutionTriple,
    loss: LossSpec,
    weights: np.ndarray,
    times: np.ndarray,
) -> float:
    """sum_k E[l(t_k, Y_k)]^+ (K_{k+1} - K_k), left point rule"""
    margins = constraint_margins(loss, times, solution.Y, weights)
    return float(np.sum(np.maximum(margins[:-1], 0.0) * np.diff(solution.K)))


def terminal_feasibility(
    ensemble: PathEnsemble, terminal: TerminalSpec, loss: LossSpec
) -> float:
    """E[l(T, xi)] on the ensemble"""
    xi = terminal_values_for(ensemble, terminal)
    return float(ensemble.weights @ loss(ensemble.model.horizon, xi))
