# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import math

import numpy as np
import pandas as pd
import pytest

from jumpreflect.bsde.bsdej_core import (
    Backend,
    ImplicitStepError,
    SolveOptions,
    conditional_expectation,
    dump_solution_csv,
    extract_u,
    one_step_residuals,
    solve_bsdej,
)
from jumpreflect.bsde.jump_model import JumpModel, build_exact_tree, sample_paths
from jumpreflect.bsde.problem import (
    CompoundTerminal,
    ConstantDriver,
    ConstantTerminal,
    LinearDriver,
    SaturatedDriver,
    ZeroDriver,
)


def counting_model(steps: int = 4, nu: float = 0.5) -> JumpModel:
    return JumpModel(marks=(1.0,), intensities=(nu,), horizon=1.0, steps=steps)


def test_backend_aliases():
    assert Backend("mc") == Backend.REGRESSION
    assert SolveOptions(backend="exact").backend == Backend.EXACT
    with pytest.raises(ValueError):
        Backend("nope")


def test_conditional_expectation_one_step():
    model = JumpModel(marks=(1.0,), intensities=(0.1,), horizon=1.0, steps=1)
    tree = build_exact_tree(model)
    values = np.array([1.0, 2.0])
    np.testing.assert_allclose(conditional_expectation(tree, values, 0), [1.1, 1.1])
    np.testing.assert_allclose(conditional_expectation(tree, np.full(2, 3.0), 0), 3.0)


def test_regression_backend_on_tree_matches_exact():
    model = counting_model(steps=3, nu=0.6)
    tree = build_exact_tree(model)
    values = tree.counts[:, 3, 0] ** 2 + 3.0 * tree.counts[:, 3, 0]
    for step in range(3):
        np.testing.assert_allclose(
            conditional_expectation(tree, values, step, backend="mc"),
            conditional_expectation(tree, values, step),
            atol=1e-10,
        )


def test_extract_u():
    model = JumpModel(marks=(1.0,), intensities=(0.1,), horizon=1.0, steps=1)
    tree = build_exact_tree(model)
    np.testing.assert_allclose(extract_u(tree, np.full(2, 5.0), 0), 0.0, atol=1e-14)
    np.testing.assert_allclose(extract_u(tree, np.array([1.0, 2.0]), 0), 1.0)

    two = JumpModel(marks=(1.0, -1.0), intensities=(0.3, 0.0), horizon=1.0, steps=1)
    tree = build_exact_tree(two)
    u = extract_u(tree, np.array([0.0, 2.0, 7.0]), 0)
    # a mark that never fires gets no coefficient
    np.testing.assert_allclose(u, [[2.0, 0.0]] * 3, atol=1e-12)


def test_compensated_count_closed_form():
    model = counting_model(steps=5, nu=0.5)
    tree = build_exact_tree(model)
    solution = solve_bsdej(tree, ZeroDriver(), CompoundTerminal(scale=1.0))
    expected = tree.counts[:, :, 0] + model.nu[0] * (model.horizon - model.times)
    np.testing.assert_allclose(solution.y, expected, atol=1e-12)
    np.testing.assert_allclose(solution.u, 1.0, atol=1e-12)
    # a martingale keeps its mean
    np.testing.assert_allclose(tree.mean(solution.y), 0.5, atol=1e-12)


def test_constant_driver_shifts_the_mean():
    model = counting_model()
    tree = build_exact_tree(model)
    terminal = CompoundTerminal(scale=2.0, offset=1.0)
    solution = solve_bsdej(tree, ConstantDriver(0.7), terminal)
    assert solution.y[0, 0] == pytest.approx(1.0 + 2.0 * 0.5 + 0.7, abs=1e-12)


def test_implicit_linear_driver_converges_at_rate_one():
    errors = []
    for steps in (8, 16, 32, 64):
        model = JumpModel(marks=(), intensities=(), horizon=1.0, steps=steps)
        tree = build_exact_tree(model)
        solution = solve_bsdej(tree, LinearDriver(y_coef=-1.0), ConstantTerminal(1.0))
        assert solution.y[0, 0] == pytest.approx((1 + model.dt) ** -steps, rel=1e-10)
        errors.append(abs(solution.y[0, 0] - math.exp(-1.0)))
    slopes = np.diff(np.log(errors)) / np.diff(np.log([1 / 8, 1 / 16, 1 / 32, 1 / 64]))
    assert np.all(slopes > 0.9)


def test_implicit_step_failure():
    model = JumpModel(marks=(), intensities=(), horizon=1.0, steps=1)
    tree = build_exact_tree(model)
    with pytest.raises(ImplicitStepError):
        solve_bsdej(tree, LinearDriver(y_coef=-3.0), ConstantTerminal(1.0))
    # damping restores the contraction
    solution = solve_bsdej(
        tree,
        LinearDriver(y_coef=-3.0),
        ConstantTerminal(1.0),
        damping=0.2,
        implicit_max_iters=500,
    )
    assert solution.y[0, 0] == pytest.approx(0.25, rel=1e-10)


def test_generic_problem_residuals_and_predictability():
    model = JumpModel(marks=(1.0, -0.5), intensities=(0.6, 0.9), horizon=1.0, steps=4)
    tree = build_exact_tree(model)
    driver = SaturatedDriver(y_coef=0.4, u_coef=[0.5, -0.2], const=0.1, lipschitz=1.0)
    solution = solve_bsdej(tree, driver, CompoundTerminal(scale=1.5, cap=2.0))
    assert np.abs(one_step_residuals(tree, solution)).max() <= 1e-10

    # y_k and u_k only depend on the first k steps
    for k in range(model.steps):
        nodes = model.branches**k
        y = solution.y[:, k].reshape(nodes, -1)
        u = solution.u[:, k].reshape(nodes, -1, model.n_marks)
        np.testing.assert_allclose(y, y[:, :1].repeat(y.shape[1], axis=1), atol=1e-13)
        np.testing.assert_allclose(u, u[:, :1].repeat(u.shape[1], axis=1), atol=1e-12)


def test_window_needs_array_terminal():
    model = counting_model(steps=4)
    tree = build_exact_tree(model)
    with pytest.raises(AssertionError):
        solve_bsdej(tree, ZeroDriver(), CompoundTerminal(), window=(0, 2))

    full = solve_bsdej(tree, ConstantDriver(0.3), CompoundTerminal())
    part = solve_bsdej(tree, ConstantDriver(0.3), full.y[:, 2], window=(0, 2))
    np.testing.assert_allclose(part.y[:, :3], full.y[:, :3], atol=1e-14)
    assert np.all(np.isnan(part.y[:, 3:]))
    residuals = one_step_residuals(tree, part)
    assert np.all(np.isnan(residuals[:, 2:]))
    assert np.nanmax(np.abs(residuals)) <= 1e-12


def test_frozen_driver_input():
    model = counting_model(steps=3)
    tree = build_exact_tree(model)
    frozen = np.full((tree.size, 4), 2.0)
    solution = solve_bsdej(
        tree, LinearDriver(y_coef=0.5), ConstantTerminal(1.0), frozen_P=frozen
    )
    assert solution.y[0, 0] == pytest.approx(1.0 + 0.5 * 2.0, abs=1e-12)
    assert solution.implicit_iters == 0


def test_regression_backend_monte_carlo():
    model = counting_model(steps=8, nu=1.0)
    paths = sample_paths(model, 20000, seed=0)
    solution = solve_bsdej(
        paths, ZeroDriver(), CompoundTerminal(scale=1.0), backend="mc"
    )
    expected = paths.counts[:, :, 0] + (model.horizon - model.times)
    assert solution.y[0, 0] == pytest.approx(1.0, abs=0.03)
    assert np.abs(solution.y - expected).mean() < 0.03
    assert np.abs(solution.u - 1.0).mean() < 0.1


def test_dump_solution_csv(tmp_path):
    model = JumpModel(marks=(1.0, 2.0), intensities=(0.2, 0.3), horizon=1.0, steps=2)
    tree = build_exact_tree(model)
    solution = solve_bsdej(tree, ZeroDriver(), CompoundTerminal())
    frame = pd.read_csv(dump_solution_csv(tree, solution, tmp_path / "solution.csv"))
    assert list(frame.columns) == ["scenario", "step", "y", "u_1", "u_2"]
    assert len(frame) == tree.size * 3
    assert frame[frame.step == 2].u_1.isna().all()
