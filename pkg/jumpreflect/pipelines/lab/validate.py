# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Assumption checks run before any solve. The declared constants of the loss,
the driver and the terminal condition are certified by sampling on a
deterministic probe grid; every failed check carries its worst witness.
"""

import dataclasses
import logging
import typing as tp
from dataclasses import dataclass, field

import hydra
import numpy as np
from omegaconf import MISSING

from jumpreflect.bsde.bsdej_core import terminal_values_for
from jumpreflect.bsde.jump_model import (
    EnumerationCapExceeded,
    InvalidModelError,
    JumpModel,
    PathEnsemble,
    sample_paths,
)
from jumpreflect.bsde.loss_ops import LossSpec
from jumpreflect.bsde.mean_reflected import terminal_feasibility
from jumpreflect.bsde.problem import DriverSpec, Problem, TerminalSpec
from jumpreflect.core import utils
from jumpreflect.core.lab_module import LabModule, Requirements
from jumpreflect.modules.problem_config import (
    ProblemConfig,
    SolverConfig,
    build_ensemble,
    build_model,
)

logger = logging.getLogger("jumpreflect.lab.validate")

REL_TOL = 1e-9
ABS_TOL = 1e-12


class ValidationFailed(Exception):
    def __init__(self, report: "ValidationReport"):
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        super().__init__(
            f"assumption checks failed: {failed} (set force=true to solve anyway)"
        )
        self.report = report


class ConfigGuardError(ValueError):
    """the configuration cannot produce a meaningful experiment"""


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    detail: str = ""
    witness: tp.Dict[str, tp.Any] = field(default_factory=dict)


@dataclass
class ValidationReport:
    checks: tp.List[AssumptionCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> AssumptionCheck:
        return next(c for c in self.checks if c.name == name)

    def to_dict(self) -> tp.Dict[str, tp.Any]:
        return {
            "passed": self.passed,
            "checks": [dataclasses.asdict(c) for c in self.checks],
        }


def _within(value: float, bound: float) -> bool:
    return value <= bound * (1.0 + REL_TOL) + ABS_TOL


def _probe_times(model: JumpModel, count: int = 5) -> np.ndarray:
    return np.linspace(0.0, model.horizon, count)


def check_model(model: JumpModel) -> AssumptionCheck:
    mass = float(model.nu.sum() * model.dt)
    return AssumptionCheck(
        "model",
        True,
        f"{model.n_marks} mark(s), {model.steps} steps, sum(nu) dt = {mass:.4g}",
        {"jump_mass_per_step": mass},
    )


def _pilot(
    model: JumpModel, solver: SolverConfig, pilot_paths: int, seed: int
) -> PathEnsemble:
    try:
        return build_ensemble(model, solver, pilot_paths, seed)
    except EnumerationCapExceeded:
        logger.info(f"exact tree too large for the pilot, sampling {pilot_paths} paths")
        return sample_paths(model, pilot_paths, seed)


def check_terminal(
    pilot: PathEnsemble, terminal: TerminalSpec, loss: LossSpec
) -> tp.List[AssumptionCheck]:
    model = pilot.model
    feasibility = terminal_feasibility(pilot, terminal, loss)
    xi = terminal_values_for(pilot, terminal)
    M = terminal.bound_for(model)
    worst = int(np.argmax(np.abs(xi)))
    return [
        AssumptionCheck(
            "terminal_feasibility",
            feasibility >= -ABS_TOL,
            f"E[l(T, xi)] = {feasibility:.6g} on {pilot.size} pilot scenarios",
            {"expected_loss": feasibility},
        ),
        AssumptionCheck(
            "terminal_bound",
            bool(np.isfinite(M)) and _within(float(abs(xi[worst])), M),
            f"max |xi| = {abs(xi[worst]):.6g}, declared M = {M:.6g}",
            {"scenario": worst, "xi": float(xi[worst]), "declared": M},
        ),
    ]


def _nu_norm(model: JumpModel, u: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...m,m->...", u**2, model.nu))


def check_driver(
    driver: DriverSpec,
    model: JumpModel,
    radius: float,
    probe_points: int,
    seed: int = 0,
) -> tp.List[AssumptionCheck]:
    rng = np.random.default_rng(seed)
    m = model.n_marks
    times = _probe_times(model)
    zeros = np.zeros(1)

    worst_bound = max(
        (abs(float(driver(float(t), zeros, np.zeros((1, m)))[0])), float(t))
        for t in times
    )
    checks = [
        AssumptionCheck(
            "driver_bound",
            _within(worst_bound[0], driver.bound),
            f"max |f(t, 0, 0)| = {worst_bound[0]:.6g},"
            f" declared L = {driver.bound:.6g}",
            {"t": worst_bound[1], "value": worst_bound[0], "declared": driver.bound},
        )
    ]

    # pairs on a grid in y, plus random pairs mixing y and u moves of several sizes
    y = np.linspace(-radius, radius, probe_points)
    u = rng.uniform(-radius, radius, size=(probe_points, m))
    moves = [(np.diff(y, prepend=y[0] - 1e-3), np.zeros((probe_points, m)))]
    for scale in (1e-3, 1e-1, 1.0):
        du = scale * rng.normal(size=(probe_points, m))
        moves.append((np.zeros(probe_points), du))
        moves.append((scale * rng.normal(size=probe_points), du))
    worst = {"ratio": 0.0}
    for t in times:
        base = driver(float(t), y, u)
        for dy, du in moves:
            gap = np.abs(dy) + _nu_norm(model, du)
            change = np.abs(driver(float(t), y + dy, u + du) - base)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(
                    gap > 0, change / gap, np.where(change > 0, np.inf, 0.0)
                )
            k = int(np.argmax(ratio))
            if ratio[k] > worst["ratio"]:
                worst = {
                    "ratio": float(ratio[k]),
                    "t": float(t),
                    "first": {"y": float(y[k]), "u": u[k].tolist()},
                    "second": {"y": float(y[k] + dy[k]), "u": (u[k] + du[k]).tolist()},
                }
    checks.append(
        AssumptionCheck(
            "driver_lipschitz",
            _within(worst["ratio"], driver.lipschitz),
            f"largest difference quotient {worst['ratio']:.6g},"
            f" declared lambda = {driver.lipschitz:.6g}",
            worst,
        )
    )
    return checks


def check_loss(
    loss: LossSpec,
    model: JumpModel,
    radius: float,
    search_radius: float,
    probe_points: int,
) -> tp.List[AssumptionCheck]:
    times = _probe_times(model)
    y = np.linspace(-radius, radius, probe_points)
    values = np.stack([loss(float(t), y) for t in times])
    slopes = np.diff(values, axis=1) / np.diff(y)
    lo = np.unravel_index(int(np.argmin(slopes)), slopes.shape)
    hi = np.unravel_index(int(np.argmax(slopes)), slopes.shape)
    min_slope, max_slope = float(slopes[lo]), float(slopes[hi])
    checks = [
        AssumptionCheck(
            "loss_monotone",
            min_slope >= loss.kappa_lower * (1.0 - REL_TOL) - ABS_TOL,
            f"smallest slope {min_slope:.6g},"
            f" declared kappa_lower = {loss.kappa_lower:.6g}",
            {"t": float(times[lo[0]]), "y": [float(y[lo[1]]), float(y[lo[1] + 1])]},
        ),
        AssumptionCheck(
            "loss_bi_lipschitz",
            bool(np.isfinite(loss.kappa_upper))
            and _within(max_slope, loss.kappa_upper),
            f"largest slope {max_slope:.6g},"
            f" declared kappa_upper = {loss.kappa_upper:.6g}",
            {"t": float(times[hi[0]]), "y": [float(y[hi[1]]), float(y[hi[1] + 1])]},
        ),
    ]

    drift = np.abs(np.diff(values, axis=0)) / np.diff(times)[:, None]
    k = np.unravel_index(int(np.argmax(drift)), drift.shape)
    checks.append(
        AssumptionCheck(
            "loss_time_lipschitz",
            _within(float(drift[k]), loss.time_lipschitz),
            f"largest time quotient {float(drift[k]):.6g},"
            f" declared r = {loss.time_lipschitz:.6g}",
            {"t": [float(times[k[0]]), float(times[k[0] + 1])], "y": float(y[k[1]])},
        )
    )

    C = loss.growth_bound(model.horizon)
    growth = np.abs(values) / (1.0 + np.abs(y))
    g = np.unravel_index(int(np.argmax(growth)), growth.shape)
    checks.append(
        AssumptionCheck(
            "loss_growth",
            bool(np.isfinite(C)) and _within(float(growth[g]), C),
            f"max |l| / (1 + |y|) = {float(growth[g]):.6g}, declared C = {C:.6g}",
            {"t": float(times[g[0]]), "y": float(y[g[1]])},
        )
    )

    # the L operator brackets its root inside [0, search_radius]
    edge = search_radius - radius
    at_edge = np.array([float(loss(float(t), np.array([edge]))[0]) for t in times])
    checks.append(
        AssumptionCheck(
            "loss_positive_at_search_radius",
            bool(edge > 0 and np.all(at_edge > 0)),
            f"min l(t, {edge:.6g}) = {at_edge.min():.6g}",
            {"t": float(times[int(np.argmin(at_edge))]), "value": float(at_edge.min())},
        )
    )
    return checks


def validate_built_problem(
    problem: Problem,
    solver: SolverConfig,
    pilot_paths: int = 2000,
    seed: int = 0,
    probe_points: int = 65,
) -> ValidationReport:
    model = problem.model
    checks = [check_model(model)]
    pilot = _pilot(model, solver, pilot_paths, seed)
    checks += check_terminal(pilot, problem.terminal, problem.loss)
    M = problem.terminal.bound_for(model)
    # a priori scale of |Y|: M + L T, and at least one
    radius = max(1.0, 2.0 * (M + problem.driver.bound * model.horizon))
    if not np.isfinite(radius):
        radius = 10.0
    checks += check_driver(problem.driver, model, radius, probe_points, seed)
    checks += check_loss(
        problem.loss, model, radius, solver.search_radius, probe_points
    )
    return ValidationReport(checks)


def validate_problem(
    config: ProblemConfig,
    solver: SolverConfig,
    pilot_paths: int = 2000,
    seed: int = 0,
    probe_points: int = 65,
) -> ValidationReport:
    try:
        model = build_model(config.model)
    except InvalidModelError as e:
        return ValidationReport([AssumptionCheck("model", False, str(e))])
    pieces = {}
    for name in ("loss", "driver", "terminal"):
        try:
            pieces[name] = hydra.utils.instantiate(
                getattr(config, name), _convert_="all"
            )
        except Exception as e:
            return ValidationReport(
                [check_model(model), AssumptionCheck(name, False, f"cannot build: {e}")]
            )
    problem = Problem(model=model, **pieces)
    report = validate_built_problem(problem, solver, pilot_paths, seed, probe_points)
    for c in report.checks:
        log = logger.info if c.passed else logger.warning
        log(f"{c.name}: {'ok' if c.passed else 'FAILED'} - {c.detail}")
    return report


@dataclass
class ValidateProblemConfig:
    problem: ProblemConfig = MISSING
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = MISSING
    pilot_paths: int = 2000
    master_seed: int = 0
    probe_points: int = 65


class ValidateProblemModule(LabModule):
    def __init__(self, config: ValidateProblemConfig = ValidateProblemConfig()):
        super().__init__(config, ValidateProblemConfig)

    def requirements(self) -> Requirements:
        return Requirements(cpus_per_task=1, timeout_min=30)

    def run(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> tp.Dict[str, tp.Any]:
        report = validate_problem(
            self.config.problem,
            self.config.solver,
            pilot_paths=self.config.pilot_paths,
            seed=self.config.master_seed,
            probe_points=self.config.probe_points,
        )
        output = utils.ensure_dir(self.config.output_dir) / "validation.json"
        return {
            "report": utils.write_json(output, report.to_dict()),
            "validation": report,
        }
