# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
N interacting mean reflected BSDEJs sharing one reflection K^N.

With drivers free of Y, particle i is Y^i = y^i + S where y^i is its own
unreflected solution and S is the Snell envelope of
psi_k = inf{x >= 0 : mean_i l(t_k, x + y^i_k) >= 0}. The Doob decomposition of S
gives K^N. Drivers that see (Y, U) are handled by Picard iteration on the frozen
pair (P, Q), window by window as for the single equation.

The martingale part of S on a joint tree is projected on the N * m compensated
increments, giving U^{i,j} = delta_ij u^i + V^j; what the projection misses is
kept as the cross remainder R, zero for a single particle.
"""

import dataclasses
import logging
import typing as tp
from pathlib import Path

import numpy as np
import pandas as pd

from jumpreflect.bsde.bsdej_core import (
    BSDEJSolution,
    SolveOptions,
    backward_induction,
    make_expectation,
    representation_matrix,
)
from jumpreflect.bsde.jump_model import MultiEnsemble
from jumpreflect.bsde.loss_ops import LossSpec, empirical_l_operator_rows
from jumpreflect.bsde.mean_reflected import (
    PicardConfig,
    PicardNonConvergence,
    compute_picard_window,
)
from jumpreflect.bsde.problem import DriverSpec, TerminalSpec
from jumpreflect.bsde.regression import (
    ConditionalExpectation,
    RegressionExpectation,
    polynomial_features,
)
from jumpreflect.core.utils import open_write

logger = logging.getLogger("jumpreflect.particles")

DEFAULT_PARTICLE_TOL = 1e-8
DEFAULT_PARTICLE_MAX_ITERS = 50
# rows of a particle CSV dump above which it is refused
DEFAULT_DUMP_ROWS = 2_000_000


@dataclasses.dataclass
class ParticleSolution:
    """
    Scenario first, then particle: Y, y (S, N, n+1); u, V (S, N, n, m);
    R, f_values (S, N, n); K, S, psi (S, n+1). U^{i,j} is materialized by
    `U_matrix`.
    """

    Y: np.ndarray
    y: np.ndarray
    u: np.ndarray
    V: np.ndarray
    R: np.ndarray
    K: np.ndarray
    S: np.ndarray
    psi: np.ndarray
    f_values: np.ndarray
    weights: np.ndarray
    picard_log: tp.List[tp.Dict[str, tp.Any]] = dataclasses.field(default_factory=list)
    intervals: tp.List[tp.Tuple[int, int]] = dataclasses.field(default_factory=list)

    @property
    def particles(self) -> int:
        return self.Y.shape[1]

    @property
    def dK(self) -> np.ndarray:
        return np.diff(self.K, axis=1)

    def U_diag(self) -> np.ndarray:
        """U^{i,i}, the field particle i's driver sees"""
        return self.u + self.V

    def U_matrix(self) -> np.ndarray:
        """(S, N, N, n, m), entry [:, i, j] = delta_ij u^i + V^j"""
        N = self.particles
        shape = (self.V.shape[0], N) + self.V.shape[1:]
        U = np.broadcast_to(self.V[:, None], shape).copy()
        U[:, np.arange(N), np.arange(N)] += self.u
        return U

    @property
    def terminal_reflection(self) -> float:
        """E[psi_T], zero when the terminal condition is feasible on every node"""
        return float(self.weights @ self.psi[:, -1])

    def empirical_margins(self, loss: LossSpec, times: np.ndarray) -> np.ndarray:
        """(1/N) sum_i l(t_k, Y^i_k) per scenario and grid time"""
        return np.stack(
            [loss(float(t), self.Y[:, :, k]).mean(axis=1) for k, t in enumerate(times)],
            axis=1,
        )

    def diagnostics(self, loss: LossSpec, times: np.ndarray) -> tp.Dict[str, tp.Any]:
        margins = self.empirical_margins(loss, times)
        mean_K = self.weights @ self.K
        return {
            "K_mean_path": mean_K,
            "K_T_mean": float(mean_K[-1]),
            "K_T_max": float(self.K[:, -1].max()),
            "min_constraint_margin": float(margins.min()),
            "skorokhod_residual": discrete_skorokhod_residual(self, loss, times),
            "terminal_reflection": self.terminal_reflection,
            "max_cross_remainder": float(np.max(np.abs(self.R), initial=0.0)),
            "picard_log": self.picard_log,
            "intervals": self.intervals,
        }


def psi_process(
    loss: LossSpec,
    times: np.ndarray,
    y: np.ndarray,
    options: SolveOptions = SolveOptions(),
    steps: tp.Optional[tp.Iterable[int]] = None,
) -> np.ndarray:
    """empirical reflection amount per node, y (S, N, n+1) -> (S, n+1)"""
    psi = np.zeros((y.shape[0], y.shape[2]))
    for k in range(y.shape[2]) if steps is None else steps:
        psi[:, k] = empirical_l_operator_rows(
            loss, float(times[k]), y[:, :, k], options.tol_bisect, options.search_radius
        )
    return psi


def exchangeable_features(loss: LossSpec, t: float, values: np.ndarray) -> np.ndarray:
    """[1, mean v, mean l(t, v), mean v^2] over the particle axis, (S, N) -> (S, 4)"""
    values = np.sort(values, axis=1)
    return np.stack(
        [
            np.ones(values.shape[0]),
            values.mean(axis=1),
            loss(t, values).mean(axis=1),
            (values**2).mean(axis=1),
        ],
        axis=1,
    )


def _expect(
    expectation: ConditionalExpectation,
    values: np.ndarray,
    step: int,
    features: tp.Optional[np.ndarray],
    pooled: bool = False,
) -> np.ndarray:
    if expectation.exact:
        return expectation(values, step)
    assert isinstance(expectation, RegressionExpectation)
    assert features is not None
    return expectation.project(features, values, pooled=pooled)


@dataclasses.dataclass
class _SnellWindow:
    S: np.ndarray
    continuation: np.ndarray
    dK: np.ndarray


def _snell_window(
    expectation: ConditionalExpectation,
    psi: np.ndarray,
    window: tp.Tuple[int, int],
    features: tp.Callable[[int], tp.Optional[np.ndarray]],
) -> _SnellWindow:
    a, b = window
    scenarios, points = psi.shape
    S = np.full((scenarios, points), np.nan)
    continuation = np.zeros((scenarios, points - 1))
    dK = np.zeros((scenarios, points - 1))
    S[:, b] = psi[:, b]
    for k in range(b - 1, a - 1, -1):
        # S >= 0, a regression fit of it may not be
        cont = np.maximum(_expect(expectation, S[:, k + 1], k, features(k)), 0.0)
        S[:, k] = np.maximum(psi[:, k], cont)
        continuation[:, k] = cont
        dK[:, k] = S[:, k] - cont
    return _SnellWindow(S, continuation, dK)


def snell_envelope(
    ensemble: MultiEnsemble,
    psi: np.ndarray,
    backend: str = "exact",
    features: tp.Optional[tp.Callable[[int], tp.Optional[np.ndarray]]] = None,
    options: SolveOptions = SolveOptions(),
) -> tp.Tuple[np.ndarray, np.ndarray]:
    """
    Snell envelope S of psi (S, n+1) by backward programming and the
    nondecreasing predictable K of its Doob decomposition, K_0 = 0.
    The regression backend needs `features`, step -> (S, p).
    """
    expectation = make_expectation(ensemble, backend, options.ridge)
    if features is None:
        assert expectation.exact, "the regression backend needs Snell features"
        features = lambda k: None  # noqa: E731
    psi = np.asarray(psi, dtype=np.float64)
    snell = _snell_window(expectation, psi, (0, psi.shape[1] - 1), features)
    K = np.concatenate(
        [np.zeros((psi.shape[0], 1)), np.cumsum(snell.dK, axis=1)], axis=1
    )
    return snell.S, K


@dataclasses.dataclass
class _ParticleWindow:
    bsde: BSDEJSolution
    psi: np.ndarray
    snell: _SnellWindow
    V: np.ndarray
    R: np.ndarray


def _solve_window(
    multi: MultiEnsemble,
    driver: DriverSpec,
    end_values: np.ndarray,
    loss: LossSpec,
    window: tp.Tuple[int, int],
    expectation: ConditionalExpectation,
    options: SolveOptions,
    frozen_P: tp.Optional[np.ndarray] = None,
    frozen_Q: tp.Optional[np.ndarray] = None,
) -> _ParticleWindow:
    model = multi.model
    times = model.times
    a, b = window
    counts = multi.counts
    increments = multi.increments

    def y_features(k: int) -> tp.Optional[np.ndarray]:
        if expectation.exact:
            return None
        own = polynomial_features(counts[:, :, k, :], options.degree)
        if frozen_P is None:
            return own
        shared = exchangeable_features(loss, float(times[k]), frozen_P[:, :, k])
        shared = shared[:, None, 1:]
        return np.concatenate(
            [own, np.broadcast_to(shared, own.shape[:2] + shared.shape[2:])], axis=2
        )

    bsde = backward_induction(
        model,
        increments,
        expectation,
        end_values,
        driver,
        window=window,
        features=y_features,
        frozen_P=frozen_P,
        frozen_Q=frozen_Q,
        implicit_max_iters=options.implicit_max_iters,
        implicit_tol=options.implicit_tol,
        damping=options.damping,
    )
    y = bsde.y
    psi = psi_process(loss, times, y, options, steps=range(a, b + 1))

    def snell_features(k: int) -> tp.Optional[np.ndarray]:
        if expectation.exact:
            return None
        return exchangeable_features(loss, float(times[k]), y[:, :, k])

    snell = _snell_window(expectation, psi, window, snell_features)

    V = np.zeros_like(bsde.u)
    R = np.zeros(bsde.f_values.shape)
    rep = representation_matrix(model) if model.n_marks else None
    N = multi.particles
    for k in range(a, b):
        dmu = increments[:, :, k, :]
        if rep is not None:
            targets = snell.S[:, k + 1, None, None] * dmu
            X = None
            if not expectation.exact:
                shared = snell_features(k)
                shared = np.broadcast_to(
                    shared[:, None, :], (multi.size, N, shared.shape[1])
                )
                X = np.concatenate([shared, y[:, :, k, None]], axis=2)
            V[:, :, k] = _expect(expectation, targets, k, X, pooled=True) @ rep
        snell_part = (
            snell.S[:, k + 1]
            - snell.continuation[:, k]
            - np.einsum("snm,snm->s", V[:, :, k], dmu)
        )
        own_part = (
            y[:, :, k + 1]
            - y[:, :, k]
            + model.dt * bsde.f_values[:, :, k]
            - np.einsum("snm,snm->sn", bsde.u[:, :, k], dmu)
        )
        R[:, :, k] = own_part + snell_part[:, None]
    return _ParticleWindow(bsde, psi, snell, V, R)


def _assemble(
    multi: MultiEnsemble,
    pieces: tp.List[tp.Tuple[tp.Tuple[int, int], _ParticleWindow]],
    picard_log: tp.List[tp.Dict[str, tp.Any]],
) -> ParticleSolution:
    """pieces ordered from the earliest window.

    Earlier windows own [a, b), the last one owns [a, n].
    """
    n = multi.model.steps
    first = pieces[0][1]
    Y = np.empty(first.bsde.y.shape)
    y = np.empty(first.bsde.y.shape)
    S = np.empty(first.psi.shape)
    psi = np.empty(first.psi.shape)
    u = np.zeros(first.bsde.u.shape)
    V = np.zeros(first.V.shape)
    R = np.zeros(first.R.shape)
    f_values = np.zeros(first.bsde.f_values.shape)
    dK = np.zeros((multi.size, n))
    for (a, b), piece in pieces:
        stop = b + 1 if b == n else b
        y[:, :, a:stop] = piece.bsde.y[:, :, a:stop]
        S[:, a:stop] = piece.snell.S[:, a:stop]
        psi[:, a:stop] = piece.psi[:, a:stop]
        Y[:, :, a:stop] = y[:, :, a:stop] + S[:, None, a:stop]
        u[:, :, a:b] = piece.bsde.u[:, :, a:b]
        V[:, :, a:b] = piece.V[:, :, a:b]
        R[:, :, a:b] = piece.R[:, :, a:b]
        f_values[:, :, a:b] = piece.bsde.f_values[:, :, a:b]
        dK[:, a:b] = piece.snell.dK[:, a:b]
    K = np.concatenate([np.zeros((multi.size, 1)), np.cumsum(dK, axis=1)], axis=1)
    solution = ParticleSolution(
        Y=Y,
        y=y,
        u=u,
        V=V,
        R=R,
        K=K,
        S=S,
        psi=psi,
        f_values=f_values,
        weights=np.asarray(multi.weights),
        picard_log=picard_log,
        intervals=[w for w, _ in pieces],
    )
    if solution.terminal_reflection > 0:
        logger.warning(
            f"empirical terminal constraint fails on some scenarios:"
            f" E[psi_T] = {solution.terminal_reflection:.3g}"
        )
    return solution


def _terminal_values(multi: MultiEnsemble, terminal: TerminalSpec) -> np.ndarray:
    values = terminal(multi.model, multi.counts[:, :, -1, :])
    return np.asarray(values, dtype=np.float64)


def solve_particles_constant(
    multi: MultiEnsemble,
    driver: DriverSpec,
    terminal: TerminalSpec,
    loss: LossSpec,
    options: SolveOptions = SolveOptions(),
    frozen_P: tp.Optional[np.ndarray] = None,
    frozen_Q: tp.Optional[np.ndarray] = None,
) -> ParticleSolution:
    """
    One pass on the whole horizon. The drivers must not see Y unless a frozen
    P (S, N, n+1) is given; a frozen Q (S, N, n, m) replaces U^{i,i}.
    """
    assert frozen_P is not None or not driver.depends_on_y, (
        "solve_particles_constant needs a driver free of y, or a frozen P"
    )
    expectation = make_expectation(multi, options.backend, options.ridge)
    window = (0, multi.model.steps)
    piece = _solve_window(
        multi,
        driver,
        _terminal_values(multi, terminal),
        loss,
        window,
        expectation,
        options,
        frozen_P=frozen_P,
        frozen_Q=frozen_Q,
    )
    return _assemble(multi, [(window, piece)], [])


def solve_particles(
    multi: MultiEnsemble,
    driver: DriverSpec,
    terminal: TerminalSpec,
    loss: LossSpec,
    config: tp.Optional[PicardConfig] = None,
    options: SolveOptions = SolveOptions(),
    tol: float = DEFAULT_PARTICLE_TOL,
    max_iters: int = DEFAULT_PARTICLE_MAX_ITERS,
) -> ParticleSolution:
    """Picard iteration on (P, Q) -> (Y, U^{i,i}), stitched backwards over windows"""
    model = multi.model
    if not (driver.depends_on_y or driver.depends_on_u):
        solution = solve_particles_constant(multi, driver, terminal, loss, options)
        solution.picard_log.append(
            {"interval": [0, model.steps], "iteration": 1, "change": 0.0}
        )
        return solution

    if config is None:
        config = compute_picard_window(driver, loss, model.horizon, model.steps)
    expectation = make_expectation(multi, options.backend, options.ridge)
    shape = (multi.size, multi.particles)
    end_values = _terminal_values(multi, terminal)
    stop_at = tol + 2.0 * options.tol_bisect
    log: tp.List[tp.Dict[str, tp.Any]] = []
    pieces: tp.List[tp.Tuple[tp.Tuple[int, int], _ParticleWindow]] = []

    for a, b in reversed(config.intervals):
        P = np.zeros(shape + (model.steps + 1,))
        Q = np.zeros(shape + (model.steps, model.n_marks))
        previous_change = None
        for it in range(1, max_iters + 1):
            piece = _solve_window(
                multi, driver, end_values, loss, (a, b), expectation, options, P, Q
            )
            Y_window = piece.bsde.y[:, :, a : b + 1] + piece.snell.S[:, None, a : b + 1]
            U_window = piece.bsde.u[:, :, a:b] + piece.V[:, :, a:b]
            change = max(
                float(np.max(np.abs(Y_window - P[:, :, a : b + 1]))),
                float(np.max(np.abs(U_window - Q[:, :, a:b]), initial=0.0)),
            )
            ratio = change / previous_change if previous_change else None
            log.append(
                {"interval": [a, b], "iteration": it, "change": change, "ratio": ratio}
            )
            logger.info(
                f"particles window [{a}, {b}] iteration {it}: change {change:.3e}"
                + (f" ratio {ratio:.3f}" if ratio is not None else "")
            )
            P[:, :, a : b + 1] = Y_window
            Q[:, :, a:b] = U_window
            previous_change = change
            if change <= stop_at:
                break
        else:
            raise PicardNonConvergence(
                f"particle Picard iteration on window [{a}, {b}] did not reach {tol:g}"
                f" in {max_iters} iterations (last change {change:.3g});"
                " shorten the windows",
                log,
            )
        piece = _solve_window(
            multi, driver, end_values, loss, (a, b), expectation, options, P, Q
        )
        pieces.append(((a, b), piece))
        end_values = piece.bsde.y[:, :, a] + piece.snell.S[:, None, a]

    pieces.reverse()
    return _assemble(multi, pieces, log)


def discrete_skorokhod_residual(
    solution: ParticleSolution, loss: LossSpec, times: np.ndarray
) -> float:
    """E[sum_k ((1/N) sum_i l(t_k, Y^i_k))^+ dK_k]"""
    margins = solution.empirical_margins(loss, times)
    per_scenario = np.sum(np.maximum(margins[:, :-1], 0.0) * solution.dK, axis=1)
    return float(solution.weights @ per_scenario)


def reconstruction_residuals(
    multi: MultiEnsemble, solution: ParticleSolution, dt: float
) -> np.ndarray:
    """
    Y^i_{k+1} - Y^i_k + f^i dt - sum_j U^{i,j} dmu^j - R^i_k + dK_k, (S, N, n)
    """
    dmu = multi.increments
    own = np.einsum("snkm,snkm->snk", solution.u, dmu)
    shared = np.einsum("snkm,snkm->sk", solution.V, dmu)
    Y = solution.Y
    return (
        Y[:, :, 1:]
        - Y[:, :, :-1]
        + dt * solution.f_values
        - own
        - shared[:, None]
        - solution.R
        + solution.dK[:, None]
    )


def uniform_bound_probe(
    particle_counts: tp.Sequence[int],
    solve: tp.Callable[[int], ParticleSolution],
    driver: DriverSpec,
    terminal_bound: float,
) -> tp.List[tp.Dict[str, float]]:
    """max_i sup |Y^i| / (L + |xi|_inf) for every particle count"""
    scale = driver.bound + terminal_bound
    assert scale > 0, "the bound probe needs L + |xi|_inf > 0"
    rows = []
    for N in particle_counts:
        solution = solve(N)
        sup = float(np.max(np.abs(solution.Y)))
        rows.append({"N": N, "sup_Y": sup, "ratio": sup / scale})
        logger.info(f"bound probe N={N}: sup |Y| = {sup:.4g}, ratio {sup / scale:.4g}")
    return rows


def dump_particles_csv(
    solution: ParticleSolution, output: Path, max_rows: int = DEFAULT_DUMP_ROWS
) -> Path:
    """one row per (scenario, particle, step); refused above `max_rows`"""
    scenarios, particles, points = solution.Y.shape
    rows = scenarios * particles * points
    if rows > max_rows:
        raise ValueError(
            f"particle dump would write {rows} rows, above the guard {max_rows}"
        )
    index = np.indices((scenarios, particles, points)).reshape(3, -1)
    frame = pd.DataFrame(
        {
            "scenario": index[0],
            "particle": index[1],
            "step": index[2],
            "Y": solution.Y.reshape(-1),
            "S": np.repeat(solution.S[:, None, :], particles, axis=1).reshape(-1),
            "K": np.repeat(solution.K[:, None, :], particles, axis=1).reshape(-1),
        }
    )
    with open_write(output) as o:
        frame.to_csv(o, index=False)
    return output
