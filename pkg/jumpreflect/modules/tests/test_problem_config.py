# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import pytest
from omegaconf import OmegaConf

from jumpreflect.bsde.bsdej_core import Backend
from jumpreflect.bsde.jump_model import EnsembleKind, InvalidModelError
from jumpreflect.bsde.loss_ops import AffineThresholdLoss
from jumpreflect.bsde.problem import CompoundTerminal, SaturatedDriver, ZeroDriver
from jumpreflect.modules.problem_config import (
    ModelConfig,
    ProblemConfig,
    SolverConfig,
    build_ensemble,
    build_model,
    build_problem,
    ensemble_kind,
    picard_config,
    solve_options,
)
from jumpreflect.modules.tests.conftest import closed_form_problem


def test_build_problem_from_yaml_like_config():
    config = OmegaConf.merge(
        OmegaConf.structured(ProblemConfig), closed_form_problem(steps=8)
    )
    problem = build_problem(config)
    assert problem.model.steps == 8
    assert problem.model.dt == pytest.approx(0.125)
    assert isinstance(problem.loss, AffineThresholdLoss)
    assert isinstance(problem.driver, ZeroDriver)
    assert isinstance(problem.terminal, CompoundTerminal)
    assert problem.terminal.center


def test_list_arguments_reach_the_families():
    config = OmegaConf.merge(
        OmegaConf.structured(ProblemConfig),
        closed_form_problem(),
        {
            "model": {"marks": [1.0, -0.5], "intensities": [0.6, 0.9]},
            "driver": {
                "_target_": "jumpreflect.bsde.problem.SaturatedDriver",
                "u_coef": [0.5, -0.2],
                "lipschitz": 0.7,
            },
        },
    )
    driver = build_problem(config).driver
    assert isinstance(driver, SaturatedDriver)
    assert driver.u_coef.tolist() == [0.5, -0.2]
    assert driver.depends_on_u


def test_invalid_model():
    with pytest.raises(InvalidModelError):
        # nu * dt must stay below one
        build_model(ModelConfig(marks=[1.0], intensities=[10.0], steps=4))


def test_solver_config():
    assert ensemble_kind(SolverConfig()) == EnsembleKind.EXACT_TREE
    assert ensemble_kind(SolverConfig(backend="mc")) == EnsembleKind.MONTE_CARLO
    options = solve_options(SolverConfig(backend="mc", degree=3, damping=0.5))
    assert options.backend == Backend.REGRESSION
    assert options.degree == 3
    assert options.damping == 0.5


def test_build_ensemble(problem: ProblemConfig):
    model = build_problem(problem).model
    tree = build_ensemble(model, SolverConfig(), paths=10, seed=0)
    assert tree.size == 2**model.steps
    assert tree.weights.sum() == pytest.approx(1.0)

    sampled = build_ensemble(model, SolverConfig(backend="mc"), paths=10, seed=3)
    assert sampled.size == 10
    again = build_ensemble(model, SolverConfig(backend="mc"), paths=10, seed=3)
    assert (sampled.outcomes == again.outcomes).all()


def test_picard_window_override(problem: ProblemConfig):
    built = build_problem(problem)
    assert picard_config(built, SolverConfig()).intervals == [(0, 4)]
    forced = picard_config(built, SolverConfig(steps_per_interval=1))
    assert forced.interval_count == 4
