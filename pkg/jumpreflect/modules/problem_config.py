# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Structured configs shared by the lab modules, and the helpers turning them into
solver objects. Loss, driver and terminal are `_target_` nodes instantiated by
hydra, e.g.

    loss:
      _target_: jumpreflect.bsde.loss_ops.KinkedLoss
      kappa_lower: 1.0
      kappa_upper: 2.0
"""

import typing as tp
from dataclasses import dataclass, field

import hydra
from omegaconf import MISSING

from jumpreflect.bsde.bsdej_core import (
    DEFAULT_DEGREE,
    DEFAULT_IMPLICIT_MAX_ITERS,
    DEFAULT_IMPLICIT_TOL,
    SolveOptions,
)
from jumpreflect.bsde.jump_model import (
    DEFAULT_ENUMERATION_CAP,
    EnsembleKind,
    JumpModel,
    PathEnsemble,
    build_exact_tree,
    sample_paths,
)
from jumpreflect.bsde.loss_ops import DEFAULT_SEARCH_RADIUS, DEFAULT_TOL_BISECT
from jumpreflect.bsde.mean_reflected import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL_FIXED_POINT,
    PicardConfig,
    compute_picard_window,
)
from jumpreflect.bsde.particle_system import DEFAULT_PARTICLE_TOL
from jumpreflect.bsde.problem import Problem
from jumpreflect.bsde.regression import DEFAULT_RIDGE


@dataclass
class ModelConfig:
    marks: tp.List[float] = MISSING
    intensities: tp.List[float] = MISSING
    horizon: float = 1.0
    steps: int = 16


@dataclass
class ProblemConfig:
    """
    name: label carried into the reports
    loss/driver/terminal: hydra `_target_` nodes
    """

    name: str = "custom"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: tp.Any = MISSING
    driver: tp.Any = MISSING
    terminal: tp.Any = MISSING


@dataclass
class SolverConfig:
    """
    backend: `exact` (enumerated tree) or `mc` (regression on sampled paths)
    picard_A: the a priori bound A, null for A_0
    steps_per_interval: overrides the computed Picard window, null to compute it
    enumeration_cap: largest exact tree allowed before asking for `mc`
    """

    backend: str = "exact"
    tol_bisect: float = DEFAULT_TOL_BISECT
    search_radius: float = DEFAULT_SEARCH_RADIUS
    ridge: float = DEFAULT_RIDGE
    degree: int = DEFAULT_DEGREE
    implicit_max_iters: int = DEFAULT_IMPLICIT_MAX_ITERS
    implicit_tol: float = DEFAULT_IMPLICIT_TOL
    damping: float = 1.0
    picard_A: tp.Optional[float] = None
    max_iters: int = DEFAULT_MAX_ITERS
    tol_fixed_point: float = DEFAULT_TOL_FIXED_POINT
    steps_per_interval: tp.Optional[int] = None
    particle_tol: float = DEFAULT_PARTICLE_TOL
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP


def build_model(config: ModelConfig) -> JumpModel:
    return JumpModel(
        marks=tuple(config.marks),
        intensities=tuple(config.intensities),
        horizon=config.horizon,
        steps=config.steps,
    )


def build_problem(config: ProblemConfig) -> Problem:
    return Problem(
        model=build_model(config.model),
        loss=hydra.utils.instantiate(config.loss, _convert_="all"),
        driver=hydra.utils.instantiate(config.driver, _convert_="all"),
        terminal=hydra.utils.instantiate(config.terminal, _convert_="all"),
    )


def solve_options(config: SolverConfig) -> SolveOptions:
    return SolveOptions(
        backend=config.backend,
        tol_bisect=config.tol_bisect,
        search_radius=config.search_radius,
        ridge=config.ridge,
        degree=config.degree,
        implicit_max_iters=config.implicit_max_iters,
        implicit_tol=config.implicit_tol,
        damping=config.damping,
    )


def picard_config(problem: Problem, config: SolverConfig) -> PicardConfig:
    model = problem.model
    return compute_picard_window(
        problem.driver,
        problem.loss,
        model.horizon,
        model.steps,
        A=config.picard_A,
        max_iters=config.max_iters,
        tol_fixed_point=config.tol_fixed_point,
        steps_per_interval=config.steps_per_interval,
    )


def ensemble_kind(config: SolverConfig) -> EnsembleKind:
    if SolveOptions(backend=config.backend).backend == "exact":
        return EnsembleKind.EXACT_TREE
    return EnsembleKind.MONTE_CARLO


def build_ensemble(
    model: JumpModel, config: SolverConfig, paths: int, seed: int
) -> PathEnsemble:
    if ensemble_kind(config) == EnsembleKind.EXACT_TREE:
        return build_exact_tree(model, cap=config.enumeration_cap)
    return sample_paths(model, paths, seed)
