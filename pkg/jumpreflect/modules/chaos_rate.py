# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
The two halves of a scheduled rate sweep: the limit equation is solved once by
LimitSolveModule and stored as a joblib file, then ChaosJobsModule fans the
(N, seed) grid out as an array, one batch of jobs per array item.
"""

import logging
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import joblib
from omegaconf import MISSING

from jumpreflect.bsde.chaos_lab import SweepPlan, guarded_chaos_job, solve_limit
from jumpreflect.bsde.jump_model import EnsembleKind
from jumpreflect.bsde.mean_reflected import SolutionTriple
from jumpreflect.core import utils
from jumpreflect.core.lab_module import LabModule, Requirements
from jumpreflect.modules.problem_config import (
    ProblemConfig,
    SolverConfig,
    build_problem,
    ensemble_kind,
    picard_config,
    solve_options,
)

logger = logging.getLogger("jumpreflect.modules.chaos_rate")


@dataclass
class LimitSolveConfig:
    problem: ProblemConfig = MISSING
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = MISSING
    # reference ensemble, ignored by the exact backend
    paths: int = 40000
    seed: int = 0
    requirements: Requirements = field(
        default_factory=lambda: Requirements(cpus_per_task=1, timeout_min=60)
    )


class LimitSolveModule(LabModule):
    def __init__(self, config: LimitSolveConfig = LimitSolveConfig()):
        super().__init__(config, LimitSolveConfig)

    def requirements(self) -> Requirements:
        return self.config.requirements

    def run(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> Path:
        problem = build_problem(self.config.problem)
        with utils.measure("solving the limit equation", logger):
            _, limit = solve_limit(
                problem,
                solve_options(self.config.solver),
                self.config.paths,
                self.config.seed,
                picard_config(problem, self.config.solver),
            )
        output = utils.ensure_dir(self.config.output_dir) / "limit.joblib"
        with utils.open_write(output, "wb") as o:
            joblib.dump(limit, o)
        return output


def load_limit(path: tp.Union[str, Path]) -> SolutionTriple:
    limit = joblib.load(path)
    assert isinstance(limit, SolutionTriple), f"{path} does not hold a limit solution"
    return limit


@dataclass
class ChaosJobsConfig:
    """
    limit_file: output of LimitSolveModule
    paths: Monte Carlo scenarios per particle system
    jobs: number of array items the (N, seed) grid is split into
    """

    problem: ProblemConfig = MISSING
    solver: SolverConfig = field(default_factory=SolverConfig)
    limit_file: str = MISSING
    particle_counts: tp.List[int] = MISSING
    replicates: int = 10
    paths: int = 4000
    master_seed: int = 0
    jobs: int = 1
    requirements: Requirements = field(
        default_factory=lambda: Requirements(cpus_per_task=1, timeout_min=240)
    )


class ChaosJobsModule(LabModule):
    def __init__(self, config: ChaosJobsConfig = ChaosJobsConfig()):
        super().__init__(config, ChaosJobsConfig)

    def plan(self) -> SweepPlan:
        return SweepPlan(
            particle_counts=list(self.config.particle_counts),
            replicates=self.config.replicates,
            paths=self.config.paths,
            master_seed=self.config.master_seed,
            jobs=self.config.jobs,
            particle_tol=self.config.solver.particle_tol,
            max_iters=self.config.solver.max_iters,
        )

    def array(self) -> tp.List[tp.List[tp.Tuple[int, int]]]:
        return utils.split_in(self.plan().job_seeds(), self.config.jobs)

    def requirements(self) -> Requirements:
        return self.config.requirements

    def run(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> tp.List[tp.Dict[str, tp.Any]]:
        assert iteration_value is not None, "ChaosJobsModule only runs as an array"
        problem = build_problem(self.config.problem)
        options = solve_options(self.config.solver)
        limit = load_limit(self.config.limit_file)
        plan = self.plan()
        exact = ensemble_kind(self.config.solver) == EnsembleKind.EXACT_TREE
        logger.info(f"batch {iteration_index}: {len(iteration_value)} chaos jobs")
        return [
            guarded_chaos_job(
                problem,
                limit,
                N,
                seed,
                None if exact else plan.paths,
                options,
                particle_tol=plan.particle_tol,
                max_iters=plan.max_iters,
            )
            for N, seed in iteration_value
        ]

    def validate(
        self,
        output: tp.Any,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> bool:
        return isinstance(output, list) and len(output) == len(iteration_value or [])
