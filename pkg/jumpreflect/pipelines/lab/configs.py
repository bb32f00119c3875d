# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import typing as tp
from dataclasses import dataclass, field

from omegaconf import MISSING

from jumpreflect.bsde.chaos_lab import DEFAULT_FAILURE_BUDGET
from jumpreflect.bsde.particle_system import DEFAULT_DUMP_ROWS
from jumpreflect.modules.problem_config import ProblemConfig, SolverConfig

SUBCOMMANDS = (
    "validate",
    "solve-single",
    "solve-particles",
    "chaos-rate",
    "probe-regularity",
)


@dataclass
class ExperimentConfig:
    """
    particles: N for solve-particles
    particle_counts, replicates: the (N, seed) grid of chaos-rate
    paths: Monte Carlo scenarios per equation (ignored by the exact backend)
    reference_factor: the limit equation gets reference_factor * paths scenarios
    failure_budget: share of failed chaos jobs above which the sweep aborts
    base_steps, levels, lags: grids and increments of probe-regularity
    """

    particles: int = 2
    particle_counts: tp.List[int] = field(
        default_factory=lambda: [8, 16, 32, 64, 128, 256]
    )
    replicates: int = 10
    paths: int = 4000
    reference_factor: int = 10
    failure_budget: float = DEFAULT_FAILURE_BUDGET
    bound_probe_counts: tp.List[int] = field(default_factory=list)
    base_steps: int = 4
    levels: int = 4
    lags: tp.List[int] = field(default_factory=lambda: [1, 2, 4])
    pilot_paths: int = 2000
    probe_points: int = 65
    dump_csv: bool = False
    dump_max_rows: int = DEFAULT_DUMP_ROWS


@dataclass
class LabConfig:
    subcommand: str = MISSING
    problem: ProblemConfig = MISSING
    solver: SolverConfig = field(default_factory=SolverConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    launcher: tp.Any = MISSING
    output_dir: str = MISSING
    master_seed: int = 0
    # run the solve subcommands even when an assumption check fails
    force: bool = False
    # array items of a chaos-rate sweep
    jobs: int = 1
