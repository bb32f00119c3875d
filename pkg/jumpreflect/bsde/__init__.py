# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

from jumpreflect.bsde.bsdej_core import Backend, SolveOptions, solve_bsdej
from jumpreflect.bsde.jump_model import (
    EnsembleKind,
    JumpModel,
    MultiEnsemble,
    PathEnsemble,
    build_exact_tree,
    build_multi_ensemble,
    sample_paths,
)
from jumpreflect.bsde.mean_reflected import (
    PicardConfig,
    SolutionTriple,
    compute_picard_window,
    solve_mean_reflected,
)
from jumpreflect.bsde.particle_system import ParticleSolution, solve_particles
from jumpreflect.bsde.problem import Problem
