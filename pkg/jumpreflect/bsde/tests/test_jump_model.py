# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import numpy as np
import pandas as pd
import pytest

from jumpreflect.bsde.jump_model import (
    EnsembleKind,
    EnsembleTooLarge,
    EnumerationCapExceeded,
    InvalidModelError,
    JumpModel,
    build_exact_tree,
    build_multi_ensemble,
    compensated_increment,
    derive_seed,
    dump_ensemble_csv,
    jump_counts,
    sample_paths,
)


def two_marks(steps: int = 3) -> JumpModel:
    return JumpModel(
        marks=(1.0, -0.5), intensities=(0.4, 0.2), horizon=1.0, steps=steps
    )


def test_model_validation():
    with pytest.raises(InvalidModelError):
        JumpModel(marks=(1.0,), intensities=(2.0,), horizon=1.0, steps=2)
    with pytest.raises(InvalidModelError):
        JumpModel(marks=(1.0, 1.0), intensities=(0.1, 0.1), horizon=1.0, steps=4)
    with pytest.raises(InvalidModelError):
        JumpModel(marks=(1.0,), intensities=(0.1, 0.2), horizon=1.0, steps=4)
    with pytest.raises(InvalidModelError):
        JumpModel(marks=(1.0,), intensities=(-0.1,), horizon=1.0, steps=4)

    model = two_marks()
    assert model.branches == 3
    assert model.dt == pytest.approx(1 / 3)
    np.testing.assert_allclose(model.branch_probs.sum(), 1.0)
    np.testing.assert_allclose(model.times, [0, 1 / 3, 2 / 3, 1])


def test_compensated_increment():
    model = JumpModel(marks=(1.0,), intensities=(0.5,), horizon=1.0, steps=5)
    assert compensated_increment(model, 1, 0) == pytest.approx(1 - 0.1)
    assert compensated_increment(model, 0, 0) == pytest.approx(-0.1)


def test_exact_tree_layout():
    model = two_marks(steps=3)
    tree = build_exact_tree(model)
    assert tree.kind == EnsembleKind.EXACT_TREE
    assert tree.size == 27
    assert tree.outcomes[0].tolist() == [0, 0, 0]
    assert tree.outcomes[1].tolist() == [0, 0, 1]
    assert tree.outcomes[3].tolist() == [0, 1, 0]
    assert tree.outcomes[-1].tolist() == [2, 2, 2]
    np.testing.assert_allclose(tree.weights.sum(), 1.0, atol=1e-15)

    # compensated increments are centered at every step
    np.testing.assert_allclose(tree.mean(tree.increments), 0.0, atol=1e-15)
    counts = tree.counts
    assert counts.shape == (27, 4, 2)
    assert counts[:, 0].sum() == 0
    assert counts[-1, -1].tolist() == [0, 3]
    np.testing.assert_allclose(tree.mean(counts[:, -1]), model.nu * model.horizon)


def test_jump_counts_running():
    model = two_marks(steps=4)
    outcomes = np.array([[1, 0, 2, 1]], dtype=np.int8)
    counts = jump_counts(model, outcomes)
    assert counts[0].tolist() == [[0, 0], [1, 0], [1, 0], [1, 1], [2, 1]]


def test_enumeration_cap():
    model = JumpModel(marks=(1.0,), intensities=(0.1,), horizon=1.0, steps=21)
    with pytest.raises(EnumerationCapExceeded, match="Monte Carlo"):
        build_exact_tree(model)
    with pytest.raises(EnumerationCapExceeded):
        build_multi_ensemble(model.with_steps(6), particles=4, kind="exact-tree")


def test_sampling_reproducible():
    model = two_marks(steps=5)
    a = sample_paths(model, 100, seed=3)
    b = sample_paths(model, 100, seed=3)
    c = sample_paths(model, 100, seed=4)
    np.testing.assert_array_equal(a.outcomes, b.outcomes)
    assert not np.array_equal(a.outcomes, c.outcomes)
    np.testing.assert_allclose(a.weights, 0.01)

    multi = build_multi_ensemble(
        model, particles=3, kind="monte-carlo", paths=100, seed=3
    )
    assert multi.outcomes.shape == (100, 3, 5)
    # particle 0 draws from the same stream as a single run with the same seed
    np.testing.assert_array_equal(multi.outcomes[:, 0], a.outcomes)
    assert not np.array_equal(multi.outcomes[:, 0], multi.outcomes[:, 1])

    # a longer sample extends a shorter one path by path
    longer = sample_paths(model, 150, seed=3)
    np.testing.assert_array_equal(longer.outcomes[:100], a.outcomes)


def test_sampling_frequencies():
    model = JumpModel(marks=(1.0,), intensities=(2.0,), horizon=1.0, steps=4)
    paths = sample_paths(model, 20000, seed=0)
    freq = (paths.outcomes == 1).mean()
    assert freq == pytest.approx(0.5, abs=0.02)


def test_cell_budget():
    model = two_marks(steps=10)
    with pytest.raises(EnsembleTooLarge):
        build_multi_ensemble(
            model,
            particles=10,
            kind="monte-carlo",
            paths=1000,
            seed=0,
            cell_budget=1000,
        )


def test_joint_tree():
    model = JumpModel(marks=(1.0,), intensities=(0.5,), horizon=1.0, steps=2)
    multi = build_multi_ensemble(model, particles=2, kind="exact-tree")
    assert multi.size == 16
    assert multi.branching == 4
    # step major, particle minor: scenario 1 is particle 1 jumping at step 1
    assert multi.outcomes[1].tolist() == [[0, 0], [0, 1]]
    assert multi.outcomes[4].tolist() == [[0, 0], [1, 0]]
    np.testing.assert_allclose(multi.weights.sum(), 1.0)

    single = build_exact_tree(model)
    for i in range(2):
        view = multi.particle(i)
        assert view.branching == 4
        # the marginal law of each particle is the single tree
        paths = [tuple(o) for o in view.outcomes]
        frame = pd.DataFrame({"path": paths, "w": view.weights})
        marginal = frame.groupby("path")["w"].sum()
        for outcome, w in zip(single.outcomes, single.weights):
            assert marginal[tuple(outcome)] == pytest.approx(w)

    swapped = multi.permuted([1, 0])
    np.testing.assert_array_equal(swapped.outcomes[:, 0], multi.outcomes[:, 1])
    assert np.array_equal(swapped.weights, multi.weights)


def test_derive_seed():
    assert derive_seed(1, 8, 0) == derive_seed(1, 8, 0)
    seeds = {derive_seed(1, N, r) for N in (8, 16, 32) for r in range(10)}
    assert len(seeds) == 30
    with pytest.raises(AssertionError):
        derive_seed(-1)


def test_dump_ensemble_csv(tmp_path):
    model = two_marks(steps=2)
    out = dump_ensemble_csv(build_exact_tree(model), tmp_path / "tree.csv")
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["scenario_id", "step", "outcome_label"]
    assert len(frame) == 9 * 2
    assert set(frame.outcome_label) == {"none", "mark_1", "mark_2"}

    multi = build_multi_ensemble(model, 2, "monte-carlo", paths=5, seed=1)
    frame = pd.read_csv(dump_ensemble_csv(multi, tmp_path / "multi.csv"))
    assert list(frame.columns) == ["scenario_id", "particle", "step", "outcome_label"]
    assert len(frame) == 5 * 2 * 2
