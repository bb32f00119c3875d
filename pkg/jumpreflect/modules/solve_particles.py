# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import logging
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from omegaconf import MISSING

from jumpreflect.bsde.jump_model import (
    MultiEnsemble,
    build_multi_ensemble,
    dump_ensemble_csv,
)
from jumpreflect.bsde.particle_system import (
    DEFAULT_DUMP_ROWS,
    ParticleSolution,
    dump_particles_csv,
    reconstruction_residuals,
    solve_particles,
    uniform_bound_probe,
)
from jumpreflect.bsde.problem import Problem
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


@dataclass
class SolveParticlesConfig:
    """
    particles: N, the size of the interacting system
    bound_probe_counts: extra particle counts for the uniform bound probe
    dump_max_rows: the full particle dump is skipped above this many rows
    """

    problem: ProblemConfig = MISSING
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = MISSING
    particles: int = 2
    paths: int = 4000
    master_seed: int = 0
    bound_probe_counts: tp.List[int] = field(default_factory=list)
    dump_csv: bool = False
    dump_max_rows: int = DEFAULT_DUMP_ROWS
    requirements: Requirements = field(
        default_factory=lambda: Requirements(cpus_per_task=1, timeout_min=120)
    )


class SolveParticlesModule(LabModule):
    def __init__(self, config: SolveParticlesConfig = SolveParticlesConfig()):
        super().__init__(config, SolveParticlesConfig)
        self.logger = logging.getLogger("jumpreflect.modules.solve_particles")

    def requirements(self) -> Requirements:
        return self.config.requirements

    def solve(
        self, problem: Problem, particles: int
    ) -> tp.Tuple[MultiEnsemble, ParticleSolution]:
        multi = build_multi_ensemble(
            problem.model,
            particles,
            ensemble_kind(self.config.solver),
            paths=self.config.paths,
            seed=self.config.master_seed,
            cap=self.config.solver.enumeration_cap,
        )
        solution = solve_particles(
            multi,
            problem.driver,
            problem.terminal,
            problem.loss,
            picard_config(problem, self.config.solver),
            solve_options(self.config.solver),
            tol=self.config.solver.particle_tol,
            max_iters=self.config.solver.max_iters,
        )
        return multi, solution

    def run(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> tp.Dict[str, tp.Any]:
        problem = build_problem(self.config.problem)
        model = problem.model
        N = self.config.particles
        with utils.measure(
            f"solving {N} particles of {self.config.problem.name}", self.logger
        ):
            multi, solution = self.solve(problem, N)

        report = solution.diagnostics(problem.loss, model.times)
        residuals = reconstruction_residuals(multi, solution, model.dt)
        report.update(
            problem=problem.describe(),
            particles=N,
            scenarios=multi.size,
            times=model.times,
            max_reconstruction_residual=float(
                np.max(np.abs(residuals), initial=0.0)
            ),
        )
        if self.config.bound_probe_counts:
            report["uniform_bound"] = uniform_bound_probe(
                list(self.config.bound_probe_counts),
                lambda n: self.solve(problem, n)[1],
                problem.driver,
                problem.terminal.bound_for(model),
            )

        output_dir = utils.ensure_dir(self.config.output_dir)
        outputs: tp.Dict[str, tp.Any] = {}
        margins = solution.empirical_margins(problem.loss, model.times)
        curve = pd.DataFrame(
            {
                "t": model.times,
                "K_mean": report["K_mean_path"],
                "K_max": solution.K.max(axis=0),
                "margin_min": margins.min(axis=0),
            }
        )
        curve_file = output_dir / "solve_particles_K.csv"
        with utils.open_write(curve_file) as o:
            curve.to_csv(o, index=False, float_format="%.17g")
        outputs["K_curve"] = curve_file

        if self.config.dump_csv:
            outputs["ensemble"] = dump_ensemble_csv(multi, output_dir / "ensemble.csv")
            try:
                outputs["particles"] = dump_particles_csv(
                    solution, output_dir / "particles.csv", self.config.dump_max_rows
                )
            except ValueError as e:
                self.logger.warning(f"skipping the particle dump: {e}")
                report["dump_skipped"] = str(e)

        outputs["report"] = utils.write_json(
            output_dir / "solve_particles.json", report
        )
        outputs["summary"] = {
            "particles": N,
            "K_T_mean": report["K_T_mean"],
            "min_constraint_margin": report["min_constraint_margin"],
            "skorokhod_residual": report["skorokhod_residual"],
            "max_reconstruction_residual": report["max_reconstruction_residual"],
        }
        return outputs


def summary_line(outputs: tp.Dict[str, tp.Any]) -> str:
    s = outputs["summary"]
    return (
        f"N={s['particles']} E[K_T]={s['K_T_mean']:.6g}"
        f" min_margin={s['min_constraint_margin']:.3g}"
        f" skorokhod={s['skorokhod_residual']:.3g}"
        f" reconstruction={s['max_reconstruction_residual']:.3g}"
        f" report={Path(outputs['report'])}"
    )
