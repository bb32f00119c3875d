# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

"""
Problem data besides the loss: drivers f(t, y, u) and terminal conditions xi.

Every family declares the constants the solvers and the validation rely on:
lambda (Lipschitz constant of f in y and in u under |u|_nu) and L (bound on
|f(t, 0, 0)|) for drivers, M (bound on |xi|) for terminals. Families are meant
to be built by hydra from `_target_` config nodes.
"""

import dataclasses
import typing as tp
from abc import ABC, abstractmethod

import numpy as np

from jumpreflect.bsde.jump_model import JumpModel
from jumpreflect.bsde.loss_ops import LossSpec


class DriverSpec(ABC):
    def __init__(
        self,
        lipschitz: float,
        bound: float,
        depends_on_y: bool,
        depends_on_u: bool,
    ):
        if lipschitz < 0 or bound < 0:
            raise ValueError(
                f"driver constants must be >= 0, got lambda={lipschitz}, L={bound}"
            )
        self.lipschitz = float(lipschitz)
        self.bound = float(bound)
        self.depends_on_y = bool(depends_on_y)
        self.depends_on_u = bool(depends_on_u)

    @abstractmethod
    def evaluate(self, t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        """y has any shape, u the same shape plus a trailing mark axis"""
        ...

    def __call__(self, t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.evaluate(t, y, u)

    def describe(self) -> tp.Dict[str, tp.Any]:
        return {
            "family": type(self).__name__,
            "lipschitz": self.lipschitz,
            "bound": self.bound,
            "depends_on_y": self.depends_on_y,
            "depends_on_u": self.depends_on_u,
        }


class ZeroDriver(DriverSpec):
    def __init__(self) -> None:
        super().__init__(0.0, 0.0, depends_on_y=False, depends_on_u=False)

    def evaluate(self, t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(y, dtype=np.float64))


class ConstantDriver(DriverSpec):
    def __init__(self, value: float = 0.0):
        super().__init__(0.0, abs(value), depends_on_y=False, depends_on_u=False)
        self.value = float(value)

    def evaluate(self, t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.full(np.shape(y), self.value)


def _coefficients(u_coef: tp.Optional[tp.Sequence[float]]) -> np.ndarray:
    return np.asarray(list(u_coef or []), dtype=np.float64)


def _u_term(
    coef: np.ndarray, u: np.ndarray, fn: tp.Callable[[np.ndarray], np.ndarray]
) -> tp.Union[float, np.ndarray]:
    if coef.size == 0 or not np.any(coef):
        return 0.0
    u = np.asarray(u, dtype=np.float64)
    assert (
        u.shape[-1] == coef.size
    ), f"{coef.size} u coefficients for {u.shape[-1]} marks"
    return fn(u) @ coef


class LinearDriver(DriverSpec):
    """const + y_coef * y + sum_j u_coef[j] * u_j"""

    def __init__(
        self,
        y_coef: float = 0.0,
        u_coef: tp.Optional[tp.Sequence[float]] = None,
        const: float = 0.0,
        lipschitz: tp.Optional[float] = None,
        bound: tp.Optional[float] = None,
    ):
        self.y_coef = float(y_coef)
        self.u_coef = _coefficients(u_coef)
        self.const = float(const)
        uses_u = bool(np.any(self.u_coef))
        if lipschitz is None:
            # the u part is Lipschitz in |u|_nu with a constant that depends on nu
            if uses_u:
                raise ValueError("declare `lipschitz` for a driver that depends on u")
            lipschitz = abs(self.y_coef)
        super().__init__(
            lipschitz,
            abs(self.const) if bound is None else bound,
            depends_on_y=self.y_coef != 0.0,
            depends_on_u=uses_u,
        )

    def evaluate(self, t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return self.const + self.y_coef * y + _u_term(self.u_coef, u, lambda v: v)


class SaturatedDriver(DriverSpec):
    """const + y_coef * tanh(y) + sum_j u_coef[j] * tanh(u_j)"""

    def __init__(
        self,
        y_coef: float = 0.0,
        u_coef: tp.Optional[tp.Sequence[float]] = None,
        const: float = 0.0,
        lipschitz: tp.Optional[float] = None,
        bound: tp.Optional[float] = None,
    ):
        self.y_coef = float(y_coef)
        self.u_coef = _coefficients(u_coef)
        self.const = float(const)
        uses_u = bool(np.any(self.u_coef))
        if lipschitz is None:
            if uses_u:
                raise ValueError("declare `lipschitz` for a driver that depends on u")
            lipschitz = abs(self.y_coef)
        super().__init__(
            lipschitz,
            abs(self.const) if bound is None else bound,
            depends_on_y=self.y_coef != 0.0,
            depends_on_u=uses_u,
        )

    def evaluate(self, t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return self.const + self.y_coef * np.tanh(y) + _u_term(self.u_coef, u, np.tanh)


class ShiftedDriver(DriverSpec):
    """f(t, y + shift(t), u) for a deterministic shift given on the grid"""

    def __init__(self, base: DriverSpec, times: np.ndarray, shift: np.ndarray):
        super().__init__(
            base.lipschitz, base.bound, base.depends_on_y, base.depends_on_u
        )
        self.base = base
        self.times = np.asarray(times, dtype=np.float64)
        self.shift = np.asarray(shift, dtype=np.float64)
        assert self.times.shape == self.shift.shape

    def evaluate(self, t: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.base.evaluate(
            t, np.asarray(y) + float(np.interp(t, self.times, self.shift)), u
        )


class TerminalSpec(ABC):
    """xi as a function of the terminal jump counts per mark"""

    def __init__(self, bound: tp.Optional[float] = None):
        self.declared_bound = None if bound is None else float(bound)

    @abstractmethod
    def evaluate(self, model: JumpModel, counts: np.ndarray) -> np.ndarray:
        """counts has a trailing mark axis, the result drops it"""
        ...

    def __call__(self, model: JumpModel, counts: np.ndarray) -> np.ndarray:
        return self.evaluate(model, counts)

    def bound_for(self, model: JumpModel) -> float:
        """M with |xi| <= M on every path of the grid"""
        if self.declared_bound is not None:
            return self.declared_bound
        return self._support_bound(model)

    @abstractmethod
    def _support_bound(self, model: JumpModel) -> float:
        ...

    def describe(self) -> tp.Dict[str, tp.Any]:
        return {"family": type(self).__name__, "bound": self.declared_bound}


class ConstantTerminal(TerminalSpec):
    def __init__(self, value: float = 0.0, bound: tp.Optional[float] = None):
        super().__init__(bound)
        self.value = float(value)

    def evaluate(self, model: JumpModel, counts: np.ndarray) -> np.ndarray:
        return np.full(np.shape(counts)[:-1], self.value)

    def _support_bound(self, model: JumpModel) -> float:
        return abs(self.value)


def _compound_value(model: JumpModel, counts: np.ndarray) -> np.ndarray:
    return np.asarray(counts, dtype=np.float64) @ model.mark_values


def _compound_range(model: JumpModel) -> tp.Tuple[float, float]:
    # at most one jump per step: the extremes put every step on one mark
    marks = model.mark_values
    if marks.size == 0:
        return 0.0, 0.0
    n = model.steps
    return min(0.0, n * marks.min()), max(0.0, n * marks.max())


class CompoundTerminal(TerminalSpec):
    """
    offset + scale * (X_T - c) with X_T = sum_j e_j N^j_T, c = E[X_T] when
    centered and 0 otherwise, optionally clipped to [-cap, cap]
    """

    def __init__(
        self,
        scale: float = 1.0,
        offset: float = 0.0,
        center: bool = False,
        cap: tp.Optional[float] = None,
        bound: tp.Optional[float] = None,
    ):
        super().__init__(bound)
        self.scale = float(scale)
        self.offset = float(offset)
        self.center = bool(center)
        self.cap = None if cap is None else float(cap)

    def centering(self, model: JumpModel) -> float:
        if not self.center:
            return 0.0
        return float(model.horizon * model.nu @ model.mark_values)

    def evaluate(self, model: JumpModel, counts: np.ndarray) -> np.ndarray:
        xi = self.offset + self.scale * (
            _compound_value(model, counts) - self.centering(model)
        )
        if self.cap is not None:
            xi = np.clip(xi, -self.cap, self.cap)
        return xi

    def _support_bound(self, model: JumpModel) -> float:
        lo, hi = _compound_range(model)
        c = self.centering(model)
        extremes = [self.offset + self.scale * (x - c) for x in (lo, hi)]
        bound = max(abs(e) for e in extremes)
        return min(bound, self.cap) if self.cap is not None else bound


class HingeTerminal(TerminalSpec):
    """offset + scale * max(X_T - strike, 0)"""

    def __init__(
        self,
        strike: float = 0.0,
        scale: float = 1.0,
        offset: float = 0.0,
        bound: tp.Optional[float] = None,
    ):
        super().__init__(bound)
        self.strike = float(strike)
        self.scale = float(scale)
        self.offset = float(offset)

    def evaluate(self, model: JumpModel, counts: np.ndarray) -> np.ndarray:
        payoff = np.maximum(_compound_value(model, counts) - self.strike, 0.0)
        return self.offset + self.scale * payoff

    def _support_bound(self, model: JumpModel) -> float:
        lo, hi = _compound_range(model)
        payoffs = [max(x - self.strike, 0.0) for x in (lo, hi)]
        return max(abs(self.offset + self.scale * p) for p in payoffs)


@dataclasses.dataclass
class Problem:
    model: JumpModel
    loss: LossSpec
    driver: DriverSpec
    terminal: TerminalSpec

    def describe(self) -> tp.Dict[str, tp.Any]:
        return {
            "model": dataclasses.asdict(self.model),
            "loss": self.loss.describe(),
            "driver": self.driver.describe(),
            "terminal": self.terminal.describe(),
        }
