# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import logging
import typing as tp
from dataclasses import dataclass, field
from pathlib import Path

from omegaconf import MISSING

from jumpreflect.bsde.chaos_lab import regularity_probe
from jumpreflect.bsde.jump_model import EnsembleKind
from jumpreflect.core import utils
from jumpreflect.core.lab_module import LabModule, Requirements
from jumpreflect.modules.problem_config import (
    ProblemConfig,
    SolverConfig,
    build_problem,
    ensemble_kind,
    solve_options,
)


@dataclass
class RegularityProbeConfig:
    """
    The problem is solved with base_steps * 2^j steps for j < levels, and the
    increments are measured at the given lags (in steps).
    """

    problem: ProblemConfig = MISSING
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = MISSING
    base_steps: int = 4
    levels: int = 4
    lags: tp.List[int] = field(default_factory=lambda: [1, 2, 4])
    paths: int = 4000
    master_seed: int = 0
    requirements: Requirements = field(default_factory=Requirements)


class RegularityProbeModule(LabModule):
    def __init__(self, config: RegularityProbeConfig = RegularityProbeConfig()):
        super().__init__(config, RegularityProbeConfig)
        self.logger = logging.getLogger("jumpreflect.modules.regularity")

    def requirements(self) -> Requirements:
        return self.config.requirements

    def run(
        self,
        iteration_value: tp.Optional[tp.Any] = None,
        iteration_index: int = 0,
    ) -> tp.Dict[str, tp.Any]:
        problem = build_problem(self.config.problem)
        exact = ensemble_kind(self.config.solver) == EnsembleKind.EXACT_TREE
        with utils.measure(
            f"regularity probe over {self.config.levels} grids", self.logger
        ):
            report = regularity_probe(
                problem,
                base_steps=self.config.base_steps,
                levels=self.config.levels,
                lags=list(self.config.lags),
                options=solve_options(self.config.solver),
                paths=None if exact else self.config.paths,
                seed=self.config.master_seed,
            )
        payload = report.to_dict()
        output = utils.ensure_dir(self.config.output_dir) / "regularity.json"
        return {
            "report": utils.write_json(output, payload),
            "summary": {
                "k_increment_slope": payload["k_increment_slope"],
                "y_increment_slope": payload["y_increment_slope"],
            },
        }


def summary_line(outputs: tp.Dict[str, tp.Any]) -> str:
    def fmt(fit: tp.Optional[tp.Dict[str, float]]) -> str:
        if fit is None:
            return "flat"
        return f"{fit['slope']:.3f}+-{fit['half_width']:.3f}"

    s = outputs["summary"]
    return (
        f"K increment slope {fmt(s['k_increment_slope'])},"
        f" y increment slope {fmt(s['y_increment_slope'])}"
        f" report={Path(outputs['report'])}"
    )
