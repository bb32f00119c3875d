# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import typing as tp

import pytest

from jumpreflect.modules.problem_config import ModelConfig, ProblemConfig, SolverConfig


def closed_form_problem(steps: int = 4) -> tp.Dict[str, tp.Any]:
    """K_t = t / 2: E[Y] is pushed along the line 1/2 - t/2"""
    return {
        "name": "closed_form",
        "model": {"marks": [1.0], "intensities": [0.5], "horizon": 1.0, "steps": steps},
        "loss": {
            "_target_": "jumpreflect.bsde.loss_ops.AffineThresholdLoss",
            "level": 0.5,
            "drift": -0.5,
        },
        "driver": {"_target_": "jumpreflect.bsde.problem.ZeroDriver"},
        "terminal": {
            "_target_": "jumpreflect.bsde.problem.CompoundTerminal",
            "center": True,
        },
    }


@pytest.fixture
def problem() -> ProblemConfig:
    raw = closed_form_problem()
    return ProblemConfig(
        name=raw["name"],
        model=ModelConfig(**raw["model"]),
        loss=raw["loss"],
        driver=raw["driver"],
        terminal=raw["terminal"],
    )


@pytest.fixture
def solver() -> SolverConfig:
    return SolverConfig(tol_bisect=1e-12)
