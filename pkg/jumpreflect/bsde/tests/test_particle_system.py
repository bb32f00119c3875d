# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import dataclasses
import itertools

import numpy as np
import pandas as pd
import pytest

from jumpreflect.bsde.bsdej_core import SolveOptions
from jumpreflect.bsde.jump_model import JumpModel, build_multi_ensemble
from jumpreflect.bsde.loss_ops import AffineThresholdLoss, LinearLoss
from jumpreflect.bsde.mean_reflected import compute_picard_window
from jumpreflect.bsde.problem import (
    CompoundTerminal,
    ConstantDriver,
    ConstantTerminal,
    LinearDriver,
    SaturatedDriver,
    ZeroDriver,
)
from jumpreflect.bsde.particle_system import (
    discrete_skorokhod_residual,
    dump_particles_csv,
    psi_process,
    reconstruction_residuals,
    snell_envelope,
    solve_particles,
    solve_particles_constant,
    uniform_bound_probe,
)
from jumpreflect.bsde.regression import TreeExpectation

PRECISE = SolveOptions(tol_bisect=1e-13)


def small_model(steps: int = 3, horizon: float = 0.5) -> JumpModel:
    return JumpModel(marks=(1.0,), intensities=(0.8,), horizon=horizon, steps=steps)


def threshold_loss() -> AffineThresholdLoss:
    # zero at T so that counts are always feasible there
    return AffineThresholdLoss(level=0.6, drift=-1.2)


def brute_force(model, particles, loss, y_coef=0.0, tol=1e-13, max_iters=500):
    """
    Particle system on the joint tree with dictionaries keyed by histories,
    psi in closed form for a unit slope affine loss.
    """
    n, dt, times = model.steps, model.dt, model.times
    p = model.branch_probs
    joint = list(itertools.product(range(model.branches), repeat=particles))
    prob = {o: float(np.prod([p[j] for j in o])) for o in joint}
    levels = [list(itertools.product(joint, repeat=k)) for k in range(n + 1)]

    def counts(history):
        return np.array(
            [sum(o[i] == 1 for o in history) for i in range(particles)], float
        )

    P = {h: np.zeros(particles) for level in levels for h in level}
    for _ in range(max_iters):
        y, S = {}, {}
        for h in levels[n]:
            y[h] = counts(h)
        for k in range(n - 1, -1, -1):
            for h in levels[k]:
                y[h] = sum(prob[o] * y[h + (o,)] for o in joint) + dt * y_coef * P[h]
        psi = {}
        for k in range(n + 1):
            for h in levels[k]:
                psi[h] = max(loss.threshold(times[k]) - y[h].mean(), 0.0)
        cont = {}
        for h in levels[n]:
            S[h] = psi[h]
        for k in range(n - 1, -1, -1):
            for h in levels[k]:
                cont[h] = sum(prob[o] * S[h + (o,)] for o in joint)
                S[h] = max(psi[h], cont[h])
        Y = {h: y[h] + S[h] for h in y}
        change = max(np.abs(Y[h] - P[h]).max() for h in Y)
        P = Y
        if change < tol:
            break
    return Y, S, cont


def compare_with_brute_force(multi, solution, Y, S, cont):
    n = multi.model.steps
    for s in range(multi.size):
        path = tuple(tuple(int(v) for v in multi.outcomes[s, :, k]) for k in range(n))
        K = 0.0
        for k in range(n + 1):
            h = path[:k]
            np.testing.assert_allclose(solution.Y[s, :, k], Y[h], atol=1e-9)
            assert solution.S[s, k] == pytest.approx(S[h], abs=1e-9)
            assert solution.K[s, k] == pytest.approx(K, abs=1e-9)
            if k < n:
                K += S[h] - cont[h]


def test_psi_examples():
    y = np.array([[[-1.0], [3.0]], [[-1.0], [-3.0]]])
    psi = psi_process(LinearLoss(), np.array([0.0]), y, PRECISE)
    np.testing.assert_allclose(psi[:, 0], [0.0, 2.0], atol=1e-12)


def test_snell_deterministic():
    model = JumpModel(marks=(), intensities=(), horizon=1.0, steps=2)
    multi = build_multi_ensemble(model, 1, "exact-tree")
    S, K = snell_envelope(multi, np.array([[0.0, 1.0, 0.0]]))
    np.testing.assert_allclose(S, [[1.0, 1.0, 0.0]])
    np.testing.assert_allclose(K, [[0.0, 0.0, 1.0]])

    S, K = snell_envelope(multi, np.zeros((1, 3)))
    np.testing.assert_array_equal(S, 0.0)
    np.testing.assert_array_equal(K, 0.0)


def test_snell_is_best_stopping_value():
    rng = np.random.default_rng(0)
    model = JumpModel(marks=(1.0,), intensities=(0.6,), horizon=1.0, steps=2)
    multi = build_multi_ensemble(model, 2, "exact-tree")
    nodes = multi.branching
    psi = np.stack(
        [
            np.full(multi.size, rng.uniform()),
            np.repeat(rng.uniform(size=nodes), nodes),
            rng.uniform(size=multi.size),
        ],
        axis=1,
    )
    S, K = snell_envelope(multi, psi)

    w = multi.weights
    values = [float(w @ psi[:, 0])]
    for stop_at_one in itertools.product([False, True], repeat=nodes):
        mask = np.repeat(stop_at_one, nodes)
        values.append(float(w @ np.where(mask, psi[:, 1], psi[:, 2])))
    assert len(values) == 17
    assert S[0, 0] == pytest.approx(max(values), abs=1e-14)

    tree = TreeExpectation(w, multi.branching, model.steps)
    for k in range(model.steps):
        continuation = tree(S[:, k + 1], k)
        assert np.all(S[:, k] >= psi[:, k])
        assert np.all(continuation <= S[:, k] + 1e-15)
        # least such process: S is psi or its continuation at every node
        np.testing.assert_allclose(S[:, k], np.maximum(psi[:, k], continuation))
    assert np.all(np.diff(K, axis=1) >= 0)


def test_constant_driver_matches_brute_force():
    model = small_model()
    multi = build_multi_ensemble(model, 2, "exact-tree")
    loss = threshold_loss()
    solution = solve_particles(
        multi, ZeroDriver(), CompoundTerminal(), loss, options=PRECISE
    )
    compare_with_brute_force(multi, solution, *brute_force(model, 2, loss))

    times = model.times
    assert solution.terminal_reflection == 0.0
    assert solution.K[:, -1].max() > 0.01
    assert discrete_skorokhod_residual(solution, loss, times) <= 1e-10
    assert solution.empirical_margins(loss, times).min() >= -1e-10
    assert np.all(np.diff(solution.K, axis=1) >= 0)
    assert np.abs(reconstruction_residuals(multi, solution, model.dt)).max() <= 1e-10


def test_y_dependent_driver_matches_brute_force():
    model = small_model()
    multi = build_multi_ensemble(model, 2, "exact-tree")
    loss = threshold_loss()
    driver = LinearDriver(y_coef=0.3)
    solution = solve_particles(
        multi, driver, CompoundTerminal(), loss, options=PRECISE, tol=1e-12
    )
    assert solution.intervals == [(0, 3)]
    assert len(solution.picard_log) > 1
    compare_with_brute_force(multi, solution, *brute_force(model, 2, loss, y_coef=0.3))
    assert np.abs(reconstruction_residuals(multi, solution, model.dt)).max() <= 1e-10


def test_windows_stitch_to_the_one_window_solution():
    model = small_model()
    multi = build_multi_ensemble(model, 2, "exact-tree")
    loss = threshold_loss()
    driver = LinearDriver(y_coef=0.3)

    def solve(steps_per_interval):
        config = compute_picard_window(
            driver,
            loss,
            model.horizon,
            model.steps,
            steps_per_interval=steps_per_interval,
        )
        return solve_particles(
            multi, driver, CompoundTerminal(), loss, config, PRECISE, tol=1e-13
        )

    whole = solve(3)
    split = solve(1)
    assert whole.intervals == [(0, 3)]
    assert split.intervals == [(0, 1), (1, 2), (2, 3)]
    # y and S split Y per window, Y and K do not depend on the windows
    np.testing.assert_allclose(split.Y, whole.Y, atol=1e-10)
    np.testing.assert_allclose(split.K, whole.K, atol=1e-10)
    assert np.abs(reconstruction_residuals(multi, split, model.dt)).max() <= 1e-10
    assert discrete_skorokhod_residual(split, loss, model.times) <= 1e-10


def test_inflated_push_breaks_skorokhod():
    model = small_model()
    multi = build_multi_ensemble(model, 2, "exact-tree")
    loss = threshold_loss()
    solution = solve_particles(
        multi, ZeroDriver(), CompoundTerminal(), loss, options=PRECISE
    )
    margins = solution.empirical_margins(loss, model.times)
    s, k = np.argwhere(margins[:, :-1] > 1e-3)[0]
    K = solution.K.copy()
    K[s, k + 1 :] += 0.1
    inflated = dataclasses.replace(solution, K=K)
    assert discrete_skorokhod_residual(inflated, loss, model.times) > 0


def test_slack_constraint_never_pushes():
    model = small_model()
    multi = build_multi_ensemble(model, 2, "exact-tree")
    solution = solve_particles(
        multi, ConstantDriver(0.1), ConstantTerminal(1.0), LinearLoss(intercept=-0.5)
    )
    np.testing.assert_array_equal(solution.psi, 0.0)
    np.testing.assert_array_equal(solution.K, 0.0)
    np.testing.assert_array_equal(solution.Y, solution.y)


def test_single_particle_has_no_cross_remainder():
    model = JumpModel(marks=(1.0, -0.5), intensities=(0.6, 0.9), horizon=1.0, steps=4)
    multi = build_multi_ensemble(model, 1, "exact-tree")
    loss = AffineThresholdLoss(level=0.3)
    driver = SaturatedDriver(u_coef=[0.4, 0.2], const=-0.2, lipschitz=0.5)
    solution = solve_particles(
        multi, driver, CompoundTerminal(center=True, offset=0.3), loss, options=PRECISE
    )
    assert np.abs(solution.R).max() <= 1e-12
    assert np.abs(reconstruction_residuals(multi, solution, model.dt)).max() <= 1e-10
    assert np.all(solution.S >= solution.psi - 1e-15)
    np.testing.assert_array_equal(solution.S[:, -1], solution.psi[:, -1])


def test_particle_exchangeability():
    model = small_model()
    multi = build_multi_ensemble(model, 2, "exact-tree")
    loss = threshold_loss()
    terminal = CompoundTerminal(scale=1.5)
    base = solve_particles_constant(multi, ZeroDriver(), terminal, loss, PRECISE)
    swapped = solve_particles_constant(
        multi.permuted([1, 0]), ZeroDriver(), terminal, loss, PRECISE
    )
    np.testing.assert_allclose(swapped.K, base.K, atol=1e-14)
    np.testing.assert_allclose(swapped.Y, base.Y[:, [1, 0]], atol=1e-14)


def test_u_matrix_layout():
    model = small_model()
    multi = build_multi_ensemble(model, 2, "exact-tree")
    solution = solve_particles(
        multi, ZeroDriver(), CompoundTerminal(), threshold_loss()
    )
    U = solution.U_matrix()
    assert U.shape == (multi.size, 2, 2, model.steps, 1)
    np.testing.assert_allclose(U[:, 0, 0], solution.U_diag()[:, 0])
    np.testing.assert_allclose(U[:, 0, 1], solution.V[:, 1])
    np.testing.assert_allclose(U[:, 1, 0], solution.V[:, 0])


def test_monte_carlo_smoke():
    model = JumpModel(marks=(1.0, -1.0), intensities=(0.8, 0.4), horizon=1.0, steps=6)
    multi = build_multi_ensemble(model, 4, "monte-carlo", paths=400, seed=3)
    loss = AffineThresholdLoss(level=0.5, drift=-0.5)
    solution = solve_particles(
        multi,
        ConstantDriver(-0.2),
        CompoundTerminal(center=True),
        loss,
        options=SolveOptions(backend="mc"),
    )
    assert solution.Y.shape == (400, 4, 7)
    assert np.all(np.diff(solution.K, axis=1) >= 0)
    assert solution.empirical_margins(loss, model.times).min() >= -1e-8
    assert np.abs(reconstruction_residuals(multi, solution, model.dt)).max() <= 1e-10
    diagnostics = solution.diagnostics(loss, model.times)
    assert diagnostics["K_T_mean"] > 0
    assert diagnostics["skorokhod_residual"] <= 1e-8


def test_monte_carlo_push_only_where_constraint_binds():
    model = JumpModel(marks=(1.0, -1.0), intensities=(0.8, 0.4), horizon=1.0, steps=6)
    multi = build_multi_ensemble(model, 4, "monte-carlo", paths=400, seed=3)
    loss = AffineThresholdLoss(level=0.5, drift=-0.5)
    solution = solve_particles(
        multi,
        ConstantDriver(-0.2),
        CompoundTerminal(center=True),
        loss,
        options=SolveOptions(backend="mc"),
    )
    # the continuation of a nonnegative envelope is clipped at 0
    slack = solution.empirical_margins(loss, model.times)[:, :-1] > 1e-8
    assert slack.any()
    assert np.all(solution.dK[slack] == 0.0)
    assert np.all(solution.dK[solution.psi[:, :-1] == 0.0] == 0.0)


def test_uniform_bound_probe():
    model = small_model()
    loss = threshold_loss()
    driver = ConstantDriver(0.5)

    def solve(N):
        multi = build_multi_ensemble(model, N, "exact-tree")
        return solve_particles(multi, driver, ConstantTerminal(1.0), loss)

    rows = uniform_bound_probe([1, 2], solve, driver, terminal_bound=1.0)
    assert [r["N"] for r in rows] == [1, 2]
    # Y = 1 + 0.5 (T - t) needs no push
    assert rows[0]["sup_Y"] == pytest.approx(1.25)
    assert rows[1]["ratio"] == pytest.approx(1.25 / 1.5)


def test_dump_particles_csv(tmp_path):
    model = small_model(steps=2)
    multi = build_multi_ensemble(model, 2, "exact-tree")
    solution = solve_particles(
        multi, ZeroDriver(), CompoundTerminal(), threshold_loss()
    )
    out = dump_particles_csv(solution, tmp_path / "particles.csv")
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["scenario", "particle", "step", "Y", "S", "K"]
    assert len(frame) == multi.size * 2 * 3
    with pytest.raises(ValueError, match="guard"):
        dump_particles_csv(solution, tmp_path / "big.csv", max_rows=10)
