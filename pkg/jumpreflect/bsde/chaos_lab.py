# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Propagation of chaos experiments.

The particle system is compared with N independent copies of the limit
equation, each copy driven by the same noise as its particle. Errors are
measured in the grid versions of the S^2, M^{2,2} and A^2 norms and their decay
in N is fitted in log-log scale, with inverse variance weights across seeds.
"""

import dataclasses
import logging
import time
import typing as tp
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from jumpreflect.bsde.bsdej_core import SolveOptions, make_expectation, solve_bsdej
from jumpreflect.bsde.jump_model import (
    EnsembleKind,
    JumpModel,
    MultiEnsemble,
    PathEnsemble,
    build_exact_tree,
    build_multi_ensemble,
    derive_seed,
    sample_paths,
)
from jumpreflect.bsde.mean_reflected import (
    PicardConfig,
    SolutionTriple,
    solve_mean_reflected,
)
from jumpreflect.bsde.particle_system import ParticleSolution, solve_particles
from jumpreflect.bsde.problem import DriverSpec, Problem, ShiftedDriver, TerminalSpec
from jumpreflect.core.utils import open_write

logger = logging.getLogger("jumpreflect.chaos")

METRICS = ("err_Y", "err_U", "err_K")
CSV_COLUMNS = ["N", "seed", "err_Y", "err_U", "err_K", "runtime_s"]
MIN_RATE_POINTS = 4
DEFAULT_FAILURE_BUDGET = 0.2
# sup |dK| and mean squared dy below these are rounding noise
FLAT_K_INCREMENT = 1e-12
FLAT_Y_INCREMENT = 1e-24


class GridMismatchError(ValueError):
    pass


class SweepAbortedError(RuntimeError):
    pass


@dataclasses.dataclass
class ReferenceCopies:
    """Ybar (S, N, n+1) and ubar (S, N, n, m) of the limit copies, K (n+1) shared"""

    Y: np.ndarray
    u: np.ndarray
    K: np.ndarray


def _check_grid(limit: SolutionTriple, model: JumpModel) -> None:
    if limit.K.shape != (model.steps + 1,):
        raise GridMismatchError(
            f"limit K has {limit.K.shape[0]} grid points,"
            f" the particles {model.steps + 1}"
        )
    if limit.times is not None and not np.allclose(
        limit.times, model.times, rtol=0, atol=1e-12
    ):
        raise GridMismatchError(
            "limit solution and particle system use different grids"
        )


def build_reference(
    limit: SolutionTriple,
    multi: MultiEnsemble,
    driver: DriverSpec,
    terminal: TerminalSpec,
    options: SolveOptions = SolveOptions(),
) -> ReferenceCopies:
    """
    Copy i solves the limit equation with K frozen to the limit one along particle
    i's own noise: Ybar = ybar + (K_T - K) where ybar solves the BSDEJ with driver
    f(t, y + K_T - K_t, u).
    """
    model = multi.model
    _check_grid(limit, model)
    remaining = limit.K[-1] - limit.K
    shifted = ShiftedDriver(driver, model.times, remaining)
    Y = np.empty((multi.size, multi.particles, model.steps + 1))
    u = np.empty((multi.size, multi.particles, model.steps, model.n_marks))
    for i in range(multi.particles):
        view = multi.particle(i)
        copy = solve_bsdej(
            view,
            shifted,
            terminal,
            expectation=make_expectation(view, options.backend, options.ridge),
            degree=options.degree,
            implicit_max_iters=options.implicit_max_iters,
            implicit_tol=options.implicit_tol,
            damping=options.damping,
        )
        Y[:, i] = copy.y + remaining
        u[:, i] = copy.u
    return ReferenceCopies(Y=Y, u=u, K=np.asarray(limit.K))


def chaos_errors(
    solution: ParticleSolution, reference: ReferenceCopies, model: JumpModel
) -> tp.Dict[str, float]:
    w = solution.weights
    dY = solution.Y - reference.Y
    err_Y = float(w @ np.max(dY**2, axis=2).mean(axis=1))

    nu = model.nu
    own = solution.u + solution.V - reference.u
    own_sq = np.einsum("snkm,m->snk", own**2, nu)
    V_sq = np.einsum("snkm,m->snk", solution.V**2, nu)
    others = V_sq.sum(axis=1, keepdims=True) - V_sq
    per_particle = model.dt * np.sum(own_sq + others, axis=2)
    err_U = float(w @ per_particle.mean(axis=1))

    dK = solution.K - reference.K[None, :]
    err_K = float(w @ np.max(dK**2, axis=1))
    return {"err_Y": err_Y, "err_U": err_U, "err_K": err_K}


def _ensemble_kind(options: SolveOptions) -> EnsembleKind:
    if options.backend == "exact":
        return EnsembleKind.EXACT_TREE
    return EnsembleKind.MONTE_CARLO


def solve_limit(
    problem: Problem,
    options: SolveOptions,
    paths: tp.Optional[int] = None,
    seed: tp.Optional[int] = None,
    picard: tp.Optional[PicardConfig] = None,
) -> tp.Tuple[PathEnsemble, SolutionTriple]:
    """the mean reflected limit on an exact tree, or on `paths` Monte Carlo paths"""
    if _ensemble_kind(options) == EnsembleKind.EXACT_TREE:
        ensemble = build_exact_tree(problem.model)
    else:
        assert paths is not None and seed is not None
        ensemble = sample_paths(problem.model, paths, seed)
    solution = solve_mean_reflected(
        ensemble, problem.driver, problem.terminal, problem.loss, picard, options
    )
    return ensemble, solution


def run_chaos_job(
    problem: Problem,
    limit: SolutionTriple,
    particles: int,
    seed: int,
    paths: tp.Optional[int],
    options: SolveOptions = SolveOptions(),
    particle_tol: float = 1e-8,
    max_iters: int = 50,
) -> tp.Dict[str, tp.Any]:
    start = time.perf_counter()
    multi = build_multi_ensemble(
        problem.model, particles, _ensemble_kind(options), paths=paths, seed=seed
    )
    solution = solve_particles(
        multi,
        problem.driver,
        problem.terminal,
        problem.loss,
        options=options,
        tol=particle_tol,
        max_iters=max_iters,
    )
    reference = build_reference(limit, multi, problem.driver, problem.terminal, options)
    errors = chaos_errors(solution, reference, problem.model)
    return {
        "N": particles,
        "seed": seed,
        **errors,
        "runtime_s": time.perf_counter() - start,
    }


def guarded_chaos_job(
    problem: Problem,
    limit: SolutionTriple,
    particles: int,
    seed: int,
    paths: tp.Optional[int],
    options: SolveOptions = SolveOptions(),
    particle_tol: float = 1e-8,
    max_iters: int = 50,
) -> tp.Dict[str, tp.Any]:
    """run_chaos_job, with a failure turned into a row carrying the error"""
    try:
        return run_chaos_job(
            problem, limit, particles, seed, paths, options, particle_tol, max_iters
        )
    except Exception as e:
        logger.warning(f"chaos job N={particles} seed={seed} failed: {e!r}")
        return {"N": particles, "seed": seed, "error": repr(e)}


@dataclasses.dataclass
class SlopeFit:
    slope: float
    half_width: float
    intercept: float
    points: int

    @property
    def interval(self) -> tp.Tuple[float, float]:
        return self.slope - self.half_width, self.slope + self.half_width


def fit_loglog_slope(
    x: tp.Sequence[float],
    y: tp.Sequence[float],
    stderr: tp.Optional[tp.Sequence[float]] = None,
    min_points: int = MIN_RATE_POINTS,
    confidence: float = 0.95,
) -> SlopeFit:
    """
    Weighted least squares of log y on log x. With standard errors each point is
    weighted by the inverse variance of log y (delta method); the half width is
    the Student t interval of the slope.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if len(np.unique(x[keep])) < min_points:
        raise ValueError(
            f"a slope fit needs >= {min_points} distinct positive points,"
            f" got {len(np.unique(x[keep]))}"
        )
    lx, ly = np.log(x[keep]), np.log(y[keep])
    if stderr is None:
        weights = np.ones_like(lx)
    else:
        rel_var = (np.asarray(stderr, dtype=np.float64)[keep] / y[keep]) ** 2
        positive = rel_var[rel_var > 0]
        floor = positive.min() if positive.size else 1.0
        weights = 1.0 / np.maximum(rel_var, floor)
    X = np.column_stack([np.ones_like(lx), lx])
    gram = X.T @ (weights[:, None] * X)
    beta = np.linalg.solve(gram, X.T @ (weights * ly))
    residuals = ly - X @ beta
    dof = len(lx) - 2
    s2 = float(weights @ residuals**2) / dof
    cov = s2 * np.linalg.inv(gram)
    quantile = stats.t.ppf(0.5 + confidence / 2, dof)
    half_width = float(quantile * np.sqrt(max(cov[1, 1], 0.0)))
    return SlopeFit(
        slope=float(beta[1]),
        half_width=half_width,
        intercept=float(beta[0]),
        points=len(lx),
    )


@dataclasses.dataclass
class RateReport:
    N_values: tp.List[int]
    replicates: tp.List[int]
    errors: tp.Dict[str, tp.List[float]]
    stderr: tp.Dict[str, tp.List[float]]
    slopes: tp.Dict[str, SlopeFit]
    inversions: tp.Dict[str, int]
    failures: tp.List[tp.Dict[str, tp.Any]]
    total_jobs: int

    def to_dict(self) -> tp.Dict[str, tp.Any]:
        return {
            "N_values": self.N_values,
            "replicates": self.replicates,
            "errors": self.errors,
            "stderr": self.stderr,
            "slopes": {
                m: {
                    "slope": fit.slope,
                    "half_width": fit.half_width,
                    "interval": list(fit.interval),
                    "points": fit.points,
                }
                for m, fit in self.slopes.items()
            },
            "inversions": self.inversions,
            "failed_jobs": self.failures,
            "failure_flag": bool(self.failures),
            "total_jobs": self.total_jobs,
        }


def count_inversions(values: tp.Sequence[float]) -> int:
    """consecutive increases of a sequence that should decrease"""
    v = np.asarray(values, dtype=np.float64)
    return int(np.sum(np.diff(v) > 0))


def aggregate_rate_report(
    rows: tp.List[tp.Dict[str, tp.Any]],
    failure_budget: float = DEFAULT_FAILURE_BUDGET,
) -> RateReport:
    """Aggregate per (N, seed) rows; order of `rows` does not matter."""
    frame = pd.DataFrame(rows)
    if "error" not in frame.columns:
        frame["error"] = None
    failed = frame[frame["error"].notna()]
    ok = frame[frame["error"].isna()]
    if len(frame) and len(failed) / len(frame) > failure_budget:
        raise SweepAbortedError(
            f"{len(failed)}/{len(frame)} chaos jobs failed, above the"
            f" {failure_budget:.0%} budget; first error: {failed['error'].iloc[0]}"
        )
    grouped = ok.groupby("N")
    N_values = sorted(int(n) for n in grouped.groups)
    replicates = [int(grouped.size()[n]) for n in N_values]
    errors: tp.Dict[str, tp.List[float]] = {}
    stderr: tp.Dict[str, tp.List[float]] = {}
    slopes: tp.Dict[str, SlopeFit] = {}
    inversions: tp.Dict[str, int] = {}
    for metric in METRICS:
        means = grouped[metric].mean()
        sems = grouped[metric].sem(ddof=1).fillna(0.0)
        errors[metric] = [float(means[n]) for n in N_values]
        stderr[metric] = [float(sems[n]) for n in N_values]
        slopes[metric] = fit_loglog_slope(N_values, errors[metric], stderr[metric])
        inversions[metric] = count_inversions(errors[metric])
        logger.info(
            f"{metric}: slope {slopes[metric].slope:.3f}"
            f" +- {slopes[metric].half_width:.3f},"
            f" {inversions[metric]} inversion(s)"
        )
    return RateReport(
        N_values=N_values,
        replicates=replicates,
        errors=errors,
        stderr=stderr,
        slopes=slopes,
        inversions=inversions,
        failures=failed[["N", "seed", "error"]].to_dict("records"),
        total_jobs=len(frame),
    )


@dataclasses.dataclass
class SweepPlan:
    particle_counts: tp.List[int]
    replicates: int
    paths: tp.Optional[int]
    master_seed: int
    reference_factor: int = 10
    jobs: int = 1
    failure_budget: float = DEFAULT_FAILURE_BUDGET
    particle_tol: float = 1e-8
    max_iters: int = 50

    def __post_init__(self) -> None:
        if len(set(self.particle_counts)) < MIN_RATE_POINTS:
            raise ValueError(
                f"a rate sweep needs >= {MIN_RATE_POINTS} distinct N values,"
                f" got {sorted(set(self.particle_counts))}"
            )
        assert self.replicates >= 2, "standard errors need at least two seeds per N"

    def job_seeds(self) -> tp.List[tp.Tuple[int, int]]:
        """(N, seed) pairs, the seed derived from (master_seed, N, replicate)"""
        return [
            (N, derive_seed(self.master_seed, N, r))
            for N in sorted(set(self.particle_counts))
            for r in range(self.replicates)
        ]

    def reference_seed(self) -> int:
        return derive_seed(self.master_seed, 0, 0)


def rate_sweep(
    problem: Problem,
    plan: SweepPlan,
    options: SolveOptions = SolveOptions(),
    limit: tp.Optional[SolutionTriple] = None,
) -> tp.Tuple[RateReport, pd.DataFrame]:
    if limit is None:
        ref_paths = None if plan.paths is None else plan.reference_factor * plan.paths
        _, limit = solve_limit(problem, options, ref_paths, plan.reference_seed())
    jobs = plan.job_seeds()
    logger.info(f"rate sweep: {len(jobs)} jobs on {plan.jobs} worker(s)")
    rows = Parallel(n_jobs=plan.jobs)(
        delayed(guarded_chaos_job)(
            problem,
            limit,
            N,
            seed,
            plan.paths,
            options,
            particle_tol=plan.particle_tol,
            max_iters=plan.max_iters,
        )
        for N, seed in jobs
    )
    report = aggregate_rate_report(rows, plan.failure_budget)
    return report, rate_frame(rows)


def rate_frame(rows: tp.List[tp.Dict[str, tp.Any]]) -> pd.DataFrame:
    """successful rows, sorted by (N, seed), in the CSV column order"""
    frame = pd.DataFrame(rows)
    if "error" in frame.columns:
        frame = frame[frame["error"].isna()]
    frame = frame.reindex(columns=CSV_COLUMNS)
    frame = frame.astype({"N": int, "seed": int})
    return frame.sort_values(["N", "seed"]).reset_index(drop=True)


def write_rate_csv(frame: pd.DataFrame, output: Path) -> Path:
    with open_write(output) as o:
        frame.to_csv(o, index=False, float_format="%.17g")
    return output


@dataclasses.dataclass
class RegularityReport:
    steps: tp.List[int]
    rows: tp.List[tp.Dict[str, float]]
    k_slope: tp.Optional[SlopeFit]
    y_slope: tp.Optional[SlopeFit]

    def to_dict(self) -> tp.Dict[str, tp.Any]:
        def fit(f: tp.Optional[SlopeFit]) -> tp.Optional[tp.Dict[str, float]]:
            return None if f is None else {"slope": f.slope, "half_width": f.half_width}

        return {
            "steps": self.steps,
            "rows": self.rows,
            "k_increment_slope": fit(self.k_slope),
            "y_increment_slope": fit(self.y_slope),
        }


def _maybe_fit(
    x: tp.List[float], y: tp.List[float], floor: float
) -> tp.Optional[SlopeFit]:
    values = np.asarray(y, dtype=np.float64)
    values = np.where(values > floor, values, 0.0)
    try:
        return fit_loglog_slope(x, values, min_points=3)
    except ValueError:
        # flat increments, nothing to fit
        return None


def regularity_probe(
    problem: Problem,
    base_steps: int,
    levels: int = 4,
    lags: tp.Sequence[int] = (1, 2, 4),
    options: SolveOptions = SolveOptions(),
    paths: tp.Optional[int] = None,
    seed: int = 0,
) -> RegularityReport:
    """
    Solve at base_steps * 2^j, j < levels, and record for each lag l (in steps)
    sup_k |K_{k+l} - K_k| and the mean over k of E[(y_{k+l} - y_k)^2] for the
    unreflected solution y, so the deterministic push of K stays out of it.
    """
    rows = []
    steps_list = [base_steps * 2**j for j in range(levels)]
    for steps in steps_list:
        model = problem.model.with_steps(steps)
        level_problem = dataclasses.replace(problem, model=model)
        ensemble, solution = solve_limit(level_problem, options, paths, seed)
        w = ensemble.weights
        for lag in lags:
            if lag > steps:
                continue
            dK = solution.K[lag:] - solution.K[:-lag]
            dy = solution.y[:, lag:] - solution.y[:, :-lag]
            rows.append(
                {
                    "steps": steps,
                    "dt": model.dt,
                    "lag": lag,
                    "lag_time": lag * model.dt,
                    "k_increment": float(np.max(np.abs(dK))),
                    "y_increment": float(np.mean(w @ dy**2)),
                }
            )
    lag_times = [r["lag_time"] for r in rows]
    report = RegularityReport(
        steps=steps_list,
        rows=rows,
        k_slope=_maybe_fit(
            lag_times, [r["k_increment"] for r in rows], FLAT_K_INCREMENT
        ),
        y_slope=_maybe_fit(
            lag_times, [r["y_increment"] for r in rows], FLAT_Y_INCREMENT
        ),
    )
    logger.info(
        "regularity probe: "
        + ", ".join(
            f"{name} slope {fit.slope:.3f}"
            for name, fit in (("K", report.k_slope), ("y", report.y_slope))
            if fit is not None
        )
    )
    return report

