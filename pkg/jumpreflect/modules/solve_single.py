# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import logging
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
from omegaconf import MISSING

from jumpreflect.bsde.bsdej_core import BSDEJSolution, dump_solution_csv
from jumpreflect.bsde.jump_model import dump_ensemble_csv
from jumpreflect.bsde.mean_reflected import solve_mean_reflected
from jumpreflect.core import utils
from jumpreflect.core.lab_module import LabModule, Requirements
from jumpreflect.modules.problem_config import (
    ProblemConfig,
    SolverConfig,
    build_ensemble,
    build_problem,
    picard_config,
    solve_options,
)


@dataclass
class SolveSingleConfig:
    problem: ProblemConfig = MISSING
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = MISSING
    # Monte Carlo backend only
    paths: int = 4000
    master_seed: int = 0
    dump_csv: bool = False
    requirements: Requirements = field(
        default_factory=lambda: Requirements(cpus_per_task=1, timeout_min=60)
    )


class SolveSingleModule(LabModule):
    """
    Solves the mean reflected equation with a deterministic flat K and writes
    the certificate report (solve_single.json) and the K curve
    (solve_single_K.csv).
    """

    def __init__(self, config: SolveSingleConfig = SolveSingleConfig()):
        super().__init__(config, SolveSingleConfig)
        self.logger = logging.getLogger("jumpreflect.modules.solve_single")

    def requirements(self) -> Requirements:
        return self.config.requirements

    def run(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> tp.Dict[str, tp.Any]:
        problem = build_problem(self.config.problem)
        options = solve_options(self.config.solver)
        model = problem.model
        ensemble = build_ensemble(
            model, self.config.solver, self.config.paths, self.config.master_seed
        )
        with utils.measure(
            f"solving {self.config.problem.name} on {ensemble.size} scenarios",
            self.logger,
        ):
            solution = solve_mean_reflected(
                ensemble,
                problem.driver,
                problem.terminal,
                problem.loss,
                picard_config(problem, self.config.solver),
                options,
            )

        output_dir = utils.ensure_dir(self.config.output_dir)
        report = solution.report(problem.loss, ensemble.weights, model.times)
        report.update(
            problem=problem.describe(),
            backend=options.backend.value,
            scenarios=ensemble.size,
            times=model.times,
        )
        outputs: tp.Dict[str, tp.Any] = {
            "report": utils.write_json(output_dir / "solve_single.json", report)
        }

        curve = pd.DataFrame(
            {
                "t": model.times,
                "K": solution.K,
                "margin": solution.margins,
                "reflection": solution.ell,
            }
        )
        curve_file = output_dir / "solve_single_K.csv"
        with utils.open_write(curve_file) as o:
            curve.to_csv(o, index=False, float_format="%.17g")
        outputs["K_curve"] = curve_file

        if self.config.dump_csv:
            outputs["ensemble"] = dump_ensemble_csv(
                ensemble, output_dir / "ensemble.csv"
            )
            outputs["solution"] = dump_solution_csv(
                ensemble,
                BSDEJSolution(
                    y=solution.y,
                    u=solution.U,
                    f_values=solution.f_values,
                    window=(0, model.steps),
                ),
                output_dir / "solution.csv",
            )

        outputs["summary"] = {
            "K_T": float(solution.K[-1]),
            "min_constraint_margin": report["min_constraint_margin"],
            "flatness_residual": report["flatness_residual"],
            "Y0_mean": report["Y0_mean"],
        }
        return outputs

    def validate(
        self,
        output: tp.Any,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> bool:
        return isinstance(output, dict) and super().validate(
            output, iteration_value, iteration_index
        )


def summary_line(outputs: tp.Dict[str, tp.Any]) -> str:
    s = outputs["summary"]
    return (
        f"K_T={s['K_T']:.6g} min_margin={s['min_constraint_margin']:.3g}"
        f" flatness={s['flatness_residual']:.3g} E[Y_0]={s['Y0_mean']:.6g}"
        f" report={Path(outputs['report'])}"
    )
