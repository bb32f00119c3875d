# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Finite-mark Poisson driver on a uniform grid, discretized by Bernoulli thinning:
on each step at most one jump happens, of mark j with probability nu_j * dt.

Scenario sets come in two kinds. Exact trees enumerate every joint outcome with
its product probability; Monte Carlo samples draw M paths with uniform weights
from counter-based Philox streams, one stream per particle.

Outcome labels are small integers: 0 is "no jump", j + 1 is mark j. Step k of an
outcome array holds the jump on (t_k, t_{k+1}].
"""

import dataclasses
import enum
import functools
import logging
import typing as tp
from pathlib import Path

import numpy as np
import pandas as pd

from jumpreflect.core.utils import open_write

logger = logging.getLogger("jumpreflect.jump_model")

NO_JUMP = 0
DEFAULT_ENUMERATION_CAP = 2**20
# scenarios * particles * steps above which a Monte Carlo multi ensemble is refused
DEFAULT_CELL_BUDGET = 2**28


class InvalidModelError(ValueError):
    pass


class EnsembleTooLarge(ValueError):
    pass


class EnumerationCapExceeded(EnsembleTooLarge):
    pass


class EnsembleKind(str, enum.Enum):
    EXACT_TREE = "exact-tree"
    MONTE_CARLO = "monte-carlo"


@dataclasses.dataclass(frozen=True)
class JumpModel:
    marks: tp.Tuple[float, ...]
    intensities: tp.Tuple[float, ...]
    horizon: float
    steps: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "marks", tuple(float(e) for e in self.marks))
        object.__setattr__(
            self, "intensities", tuple(float(v) for v in self.intensities)
        )
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))

        if len(self.marks) != len(self.intensities):
            raise InvalidModelError(
                f"{len(self.marks)} marks but {len(self.intensities)} intensities"
            )
        if len(set(self.marks)) != len(self.marks):
            raise InvalidModelError(f"marks must be distinct, got {self.marks}")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise InvalidModelError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise InvalidModelError(f"need at least one step, got {self.steps}")
        nu = np.asarray(self.intensities, dtype=np.float64)
        if not np.all(np.isfinite(nu)) or np.any(nu < 0):
            raise InvalidModelError(f"intensities must be >= 0, got {self.intensities}")
        if nu.sum() * self.dt >= 1.0:
            raise InvalidModelError(
                f"sum(nu) * dt = {nu.sum() * self.dt:.4g} >= 1: refine the grid,"
                " at most one jump per step must stay a probability"
            )

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    @property
    def branches(self) -> int:
        """one-step outcomes of a single driver"""
        return self.n_marks + 1

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=np.float64)

    @property
    def mark_values(self) -> np.ndarray:
        return np.asarray(self.marks, dtype=np.float64)

    @property
    def jump_probs(self) -> np.ndarray:
        return self.nu * self.dt

    @property
    def branch_probs(self) -> np.ndarray:
        """(p_none, p_1, ..., p_m)"""
        p = self.jump_probs
        return np.concatenate([[1.0 - p.sum()], p])

    def increment_covariance(self) -> np.ndarray:
        """one-step covariance of the compensated increments, diag(p) - p p^T"""
        p = self.jump_probs
        return np.diag(p) - np.outer(p, p)

    def with_steps(self, steps: int) -> "JumpModel":
        return dataclasses.replace(self, steps=steps)

    def label_name(self, label: int) -> str:
        return "none" if label == NO_JUMP else f"mark_{label}"


def compensated_increment(
    model: JumpModel, step_outcome: int, mark_index: int
) -> float:
    """1{outcome = mark j} - nu_j dt, marks indexed from 0"""
    assert 0 <= mark_index < model.n_marks, f"invalid mark index {mark_index}"
    hit = 1.0 if int(step_outcome) == mark_index + 1 else 0.0
    return hit - float(model.jump_probs[mark_index])


def compensated_increments(model: JumpModel, outcomes: np.ndarray) -> np.ndarray:
    """vectorized version, appends a mark axis to the outcome array"""
    labels = np.arange(1, model.n_marks + 1, dtype=np.int8)
    hits = (np.asarray(outcomes)[..., None] == labels).astype(np.float64)
    return hits - model.jump_probs


def jump_counts(model: JumpModel, outcomes: np.ndarray) -> np.ndarray:
    """running counts per mark before each grid time, the last step axis grows by one"""
    labels = np.arange(1, model.n_marks + 1, dtype=np.int8)
    hits = (np.asarray(outcomes)[..., None] == labels).astype(np.int32)
    counts = np.cumsum(hits, axis=-2)
    zeros = np.zeros(counts.shape[:-2] + (1, model.n_marks), dtype=np.int32)
    return np.concatenate([zeros, counts], axis=-2)


def _check_weights(weights: np.ndarray, size: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (size,):
        raise ValueError(f"expected {size} weights, got shape {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("scenario weights must be nonnegative")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"scenario weights sum to {weights.sum():.16g}, not 1")
    return weights


@dataclasses.dataclass(frozen=True, eq=False)
class PathEnsemble:
    model: JumpModel
    kind: EnsembleKind
    outcomes: np.ndarray
    weights: np.ndarray
    seed: tp.Optional[int] = None
    # joint one-step branching of the exact tree indexing the scenarios, larger
    # than model.branches when this is one particle of a joint tree
    branching: int = 0

    def __post_init__(self) -> None:
        outcomes = np.asarray(self.outcomes, dtype=np.int8)
        assert (
            outcomes.ndim == 2
        ), f"outcomes must be (scenarios, steps), got {outcomes.shape}"
        assert (
            outcomes.shape[1] == self.model.steps
        ), f"{outcomes.shape[1]} steps of outcomes for a {self.model.steps} step model"
        if outcomes.size and (
            outcomes.min() < 0 or outcomes.max() > self.model.n_marks
        ):
            raise ValueError("outcome labels out of range")
        weights = _check_weights(self.weights, outcomes.shape[0])
        outcomes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "kind", EnsembleKind(self.kind))
        if self.kind == EnsembleKind.EXACT_TREE and self.branching == 0:
            object.__setattr__(self, "branching", self.model.branches)

    @property
    def size(self) -> int:
        return self.outcomes.shape[0]

    @property
    def is_exact(self) -> bool:
        return self.kind == EnsembleKind.EXACT_TREE

    @functools.cached_property
    def increments(self) -> np.ndarray:
        """compensated increments, (scenarios, steps, marks)"""
        return compensated_increments(self.model, self.outcomes)

    @functools.cached_property
    def counts(self) -> np.ndarray:
        """running jump counts, (scenarios, steps + 1, marks)"""
        return jump_counts(self.model, self.outcomes)

    def mean(self, values: np.ndarray) -> np.ndarray:
        """weighted average over the scenario axis"""
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


@dataclasses.dataclass(frozen=True, eq=False)
class MultiEnsemble:
    """
    N independent drivers on a shared scenario index. Exact ensembles are the
    product tree over particles, Monte Carlo ones use one stream per particle.
    """

    model: JumpModel
    kind: EnsembleKind
    outcomes: np.ndarray
    weights: np.ndarray
    seed: tp.Optional[int] = None

    def __post_init__(self) -> None:
        outcomes = np.asarray(self.outcomes, dtype=np.int8)
        assert (
            outcomes.ndim == 3
        ), f"outcomes must be (scenarios, particles, steps), got {outcomes.shape}"
        assert outcomes.shape[2] == self.model.steps
        weights = _check_weights(self.weights, outcomes.shape[0])
        outcomes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "kind", EnsembleKind(self.kind))

    @property
    def size(self) -> int:
        return self.outcomes.shape[0]

    @property
    def particles(self) -> int:
        return self.outcomes.shape[1]

    @property
    def is_exact(self) -> bool:
        return self.kind == EnsembleKind.EXACT_TREE

    @property
    def branching(self) -> int:
        return self.model.branches**self.particles if self.is_exact else 0

    @functools.cached_property
    def increments(self) -> np.ndarray:
        """(scenarios, particles, steps, marks)"""
        return compensated_increments(self.model, self.outcomes)

    @functools.cached_property
    def counts(self) -> np.ndarray:
        """(scenarios, particles, steps + 1, marks)"""
        return jump_counts(self.model, self.outcomes)

    def particle(self, i: int) -> PathEnsemble:
        return PathEnsemble(
            model=self.model,
            kind=self.kind,
            outcomes=self.outcomes[:, i, :],
            weights=self.weights,
            seed=self.seed,
            branching=self.branching,
        )

    def permuted(self, order: tp.Sequence[int]) -> "MultiEnsemble":
        """same scenarios and weights, particles relabelled"""
        order = list(order)
        assert sorted(order) == list(
            range(self.particles)
        ), f"not a permutation: {order}"
        return MultiEnsemble(
            model=self.model,
            kind=self.kind,
            outcomes=self.outcomes[:, order, :],
            weights=self.weights,
            seed=self.seed,
        )

    def mean(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


def _enumerate_digits(base: int, width: int) -> np.ndarray:
    """all base-`base` words of length `width`, first digit most significant"""
    index = np.arange(base**width, dtype=np.int64)
    powers = base ** np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((index[:, None] // powers) % base).astype(np.int8)


def _check_cap(model: JumpModel, digits: int, cap: int) -> None:
    size = model.branches**digits
    if size > cap:
        raise EnumerationCapExceeded(
            f"exact tree needs {model.branches}^{digits} = {size} scenarios, above"
            f" the enumeration cap {cap}; use the Monte Carlo backend"
            " (solver.backend=mc)"
        )


def build_exact_tree(
    model: JumpModel, cap: int = DEFAULT_ENUMERATION_CAP
) -> PathEnsemble:
    _check_cap(model, model.steps, cap)
    outcomes = _enumerate_digits(model.branches, model.steps)
    weights = np.prod(model.branch_probs[outcomes], axis=1)
    logger.debug(f"enumerated {len(weights)} scenarios for {model}")
    return PathEnsemble(model, EnsembleKind.EXACT_TREE, outcomes, weights)


def derive_seed(*keys: int) -> int:
    """a 32 bit seed that depends on every key, used to key sweep jobs"""
    assert all(k >= 0 for k in keys), f"seed keys must be nonnegative, got {keys}"
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(
        1, dtype=np.uint32
    )
    return int(state[0])


def _draw_labels(model: JumpModel, paths: int, seed: int, stream: int) -> np.ndarray:
    # Philox is counter based: draw number scenario * steps + step of the stream
    # is the uniform deciding that step, whoever generates it
    generator = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), int(stream)]))
    )
    uniforms = generator.random((paths, model.steps))
    cdf = np.cumsum(model.branch_probs)
    labels = np.searchsorted(cdf, uniforms, side="right")
    return np.minimum(labels, model.n_marks).astype(np.int8)


def sample_paths(model: JumpModel, paths: int, seed: int) -> PathEnsemble:
    assert paths >= 1, f"need at least one path, got {paths}"
    assert seed is not None and seed >= 0, "Monte Carlo needs a nonnegative seed"
    outcomes = _draw_labels(model, paths, seed, stream=0)
    weights = np.full(paths, 1.0 / paths)
    return PathEnsemble(model, EnsembleKind.MONTE_CARLO, outcomes, weights, seed=seed)


def build_multi_ensemble(
    model: JumpModel,
    particles: int,
    kind: tp.Union[EnsembleKind, str],
    paths: tp.Optional[int] = None,
    seed: tp.Optional[int] = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
    cell_budget: int = DEFAULT_CELL_BUDGET,
) -> MultiEnsemble:
    assert particles >= 1, f"need at least one particle, got {particles}"
    kind = EnsembleKind(kind)
    if kind == EnsembleKind.EXACT_TREE:
        _check_cap(model, model.steps * particles, cap)
        digits = _enumerate_digits(model.branches, model.steps * particles)
        # digits are step major, particle minor
        outcomes = digits.reshape(-1, model.steps, particles).transpose(0, 2, 1)
        weights = np.prod(model.branch_probs[digits], axis=1)
        return MultiEnsemble(model, kind, outcomes, weights)

    assert paths is not None and paths >= 1, "Monte Carlo ensembles need paths >= 1"
    assert seed is not None and seed >= 0, "Monte Carlo needs a nonnegative seed"
    cells = paths * particles * model.steps
    if cells > cell_budget:
        raise EnsembleTooLarge(
            f"{paths} paths x {particles} particles x {model.steps} steps = {cells}"
            f" cells, above the budget {cell_budget}"
        )
    outcomes = np.stack(
        [_draw_labels(model, paths, seed, stream=i) for i in range(particles)], axis=1
    )
    weights = np.full(paths, 1.0 / paths)
    return MultiEnsemble(model, kind, outcomes, weights, seed=seed)


def dump_ensemble_csv(
    ensemble: tp.Union[PathEnsemble, MultiEnsemble], output: Path
) -> Path:
    """debug dump, one row per (scenario[, particle], step)"""
    outcomes = ensemble.outcomes
    if outcomes.ndim == 2:
        outcomes = outcomes[:, None, :]
    scenarios, particles, steps = outcomes.shape
    index = np.indices((scenarios, particles, steps)).reshape(3, -1)
    names = np.array(
        [ensemble.model.label_name(j) for j in range(ensemble.model.branches)]
    )
    frame = pd.DataFrame(
        {
            "scenario_id": index[0],
            "particle": index[1],
            "step": index[2],
            "outcome_label": names[outcomes.reshape(-1)],
        }
    )
    if isinstance(ensemble, PathEnsemble):
        frame = frame.drop(columns="particle")
    with open_write(output) as o:
        frame.to_csv(o, index=False)
    return output
