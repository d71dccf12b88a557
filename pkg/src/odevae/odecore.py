"""Latent ODE systems and Runge-Kutta solvers that run on the tape.

The solvers only use :mod:`odevae.diffmath` primitives for the state
update, so a solve recorded inside a :class:`~odevae.diffmath.Tape` can be
differentiated with respect to the initial state and the ODE parameters.
Step-size control reads raw values and is treated as a constant by the
backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffmath import Tensor, constant, index, lincomb, matmul, mul, no_grad, reshape, stack

__all__ = [
    "SolverInstability",
    "OdeSystem",
    "SolverConfig",
    "Trajectory",
    "SCENARIOS",
    "make_scenario_system",
    "system_matrix",
    "solve_at",
    "solve_grid",
    "solve_sequence",
    "linear_closed_form",
    "rk4_reference",
]

SCENARIOS = ("linear2", "lotka-volterra", "linear4")


class SolverInstability(RuntimeError):
    """The state blew up, went non-finite, or the step budget ran out."""

    def __init__(self, message: str, eta=None) -> None:
        super().__init__(message)
        self.eta = None if eta is None else np.array(eta, dtype=np.float64)


RHS = Callable[[Tensor, float, Tensor], Tensor]


@dataclass(frozen=True)
class OdeSystem:
    """Right-hand side ``F(mu, t, eta)`` for a 2-dimensional latent state.

    ``eta`` holds the ``n_free_params`` values supplied by the ODE-net;
    ``fixed_params`` are the coefficients treated as known.
    """

    kind: str
    n_free_params: int
    rhs: RHS
    fixed_params: dict = field(default_factory=dict)
    name: str = ""

    def bind(self, eta) -> Callable[[Tensor, float], Tensor]:
        eta = eta if isinstance(eta, Tensor) else constant(eta)
        if eta.data.shape != (self.n_free_params,):
            raise ValueError(
                f"{self.name or self.kind}: expected {self.n_free_params} parameters, got shape {eta.data.shape}"
            )
        if self.kind == "linear-diag":
            return lambda mu, t: mul(eta, mu)
        if self.kind == "linear-2x2":
            A = reshape(eta, (2, 2))
            return lambda mu, t: matmul(A, mu)
        if self.kind == "lotka-volterra":
            return _lotka_volterra_bound(eta, self.fixed_params)
        rhs = self.rhs
        return lambda mu, t: rhs(mu, t, eta)


def _lotka_volterra_bound(eta: Tensor, fixed: dict):
    # du1 = a*u1 - c1*u1*u2 ; du2 = c2*u1*u2 - b*u1
    c1 = fixed.get("c1", 1.0)
    c2 = fixed.get("c2", 1.0)
    linear_coef = mul(eta, np.array([1.0, -1.0]))
    inter_coef = np.array([-c1, c2])

    def f(mu, t):
        u1 = index(mu, 0)
        u2 = index(mu, 1)
        return lincomb([mul(u1, linear_coef), mul(mul(u1, u2), inter_coef)], [1.0, 1.0])

    return f


def _lotka_volterra_rhs(mu: Tensor, t: float, eta: Tensor) -> Tensor:
    u1, u2 = index(mu, 0), index(mu, 1)
    a, b = index(eta, 0), index(eta, 1)
    return stack([a * u1 - u1 * u2, u1 * u2 - b * u1])


def _linear_diag_rhs(mu: Tensor, t: float, eta: Tensor) -> Tensor:
    return mul(eta, mu)


def _linear_full_rhs(mu: Tensor, t: float, eta: Tensor) -> Tensor:
    return matmul(reshape(eta, (2, 2)), mu)


def make_scenario_system(scenario: str) -> OdeSystem:
    """ODE family for one of the three simulation scenarios.

    ``linear2``: ``diag(eta1, eta2)``; ``lotka-volterra``: free growth/decay
    rates ``(a, b)`` with both interaction coefficients fixed at 1;
    ``linear4``: full matrix ``[[eta1, eta2], [eta3, eta4]]``.
    """
    if scenario == "linear2":
        return OdeSystem("linear-diag", 2, _linear_diag_rhs, name=scenario)
    if scenario == "lotka-volterra":
        return OdeSystem("lotka-volterra", 2, _lotka_volterra_rhs, {"c1": 1.0, "c2": 1.0}, name=scenario)
    if scenario == "linear4":
        return OdeSystem("linear-2x2", 4, _linear_full_rhs, name=scenario)
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")


def system_matrix(sys: OdeSystem, eta) -> np.ndarray:
    """Constant system matrix of a linear ``sys`` for parameters ``eta``."""
    eta = np.asarray(eta, dtype=np.float64)
    if sys.kind == "linear-diag":
        return np.diag(eta)
    if sys.kind == "linear-2x2":
        return eta.reshape(2, 2).copy()
    raise ValueError(f"{sys.kind} system has no constant matrix")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "adaptive-54"
    step: float = 0.1
    abs_tol: float = 1e-6
    rel_tol: float = 1e-6
    max_steps: int = 10_000
    blowup_threshold: float = 1e6

    def __post_init__(self):
        if self.method not in ("adaptive-54", "rk4-fixed"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not (self.step > 0 and self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("solver step and tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list[Tensor]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def values(self) -> np.ndarray:
        return np.array([s.data for s in self.states]).reshape(len(self.states), -1)


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = _A[6] + (0.0,)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


class _Integrator:
    """Carries step size, FSAL derivative and step count across segments."""

    def __init__(self, f, cfg: SolverConfig, eta):
        self.f = f
        self.cfg = cfg
        self.eta = eta
        self.h: float | None = None
        self.k1: Tensor | None = None
        self.steps = 0

    def _fail(self, why: str):
        eta = None if self.eta is None else getattr(self.eta, "data", self.eta)
        raise SolverInstability(why, eta)

    def _check(self, y: Tensor):
        peak = float(np.abs(y.data).max())
        if not peak <= self.cfg.blowup_threshold:
            if math.isfinite(peak):
                self._fail(f"state magnitude exceeded {self.cfg.blowup_threshold:g}")
            self._fail("non-finite state")

    def _count(self):
        self.steps += 1
        if self.steps > self.cfg.max_steps:
            self._fail(f"exceeded {self.cfg.max_steps} solver steps")

    def advance(self, y: Tensor, t0: float, t1: float) -> Tensor:
        if t1 == t0:
            return y
        if self.cfg.method == "rk4-fixed":
            return self._rk4(y, t0, t1)
        return self._dopri(y, t0, t1)

    def _rk4(self, y, t0, t1):
        f = self.f
        n = max(1, math.ceil((t1 - t0) / self.cfg.step - 1e-12))
        h = (t1 - t0) / n
        t = t0
        for i in range(n):
            self._count()
            k1 = f(y, t)
            k2 = f(lincomb([y, k1], [1.0, h / 2]), t + h / 2)
            k3 = f(lincomb([y, k2], [1.0, h / 2]), t + h / 2)
            k4 = f(lincomb([y, k3], [1.0, h]), t + h)
            y = lincomb([y, k1, k2, k3, k4], [1.0, h / 6, h / 3, h / 3, h / 6])
            self._check(y)
            t = t0 + (i + 1) * h
        return y

    def _initial_step(self, y, t0, t1):
        cfg = self.cfg
        with no_grad():
            f0 = self.k1.data
            sc = cfg.abs_tol + cfg.rel_tol * np.abs(y.data)
            d0 = np.sqrt(np.mean((y.data / sc) ** 2))
            d1 = np.sqrt(np.mean((f0 / sc) ** 2))
            h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
            h0 = min(h0, t1 - t0)
            y1 = y.data + h0 * f0
            f1 = self.f(constant(y1), t0 + h0).data
            d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
            if max(d1, d2) <= 1e-15:
                h1 = max(1e-6, h0 * 1e-3)
            else:
                h1 = (0.01 / max(d1, d2)) ** (1 / 5)
        return min(100 * h0, h1, t1 - t0)

    def _dopri(self, y, t0, t1):
        cfg = self.cfg
        f = self.f
        if self.k1 is None:
            self.k1 = f(y, t0)
            self._check(self.k1)
        if self.h is None:
            self.h = self._initial_step(y, t0, t1)
        t = t0
        span = t1 - t0
        while t < t1:
            self._count()
            h = self.h
            last = t + h >= t1 - 1e-12 * span
            if last:
                h = t1 - t
            ks = [self.k1]
            for i in range(1, 7):
                coeffs = [1.0] + [h * a for a in _A[i]]
                yi = lincomb([y] + ks, coeffs)
                ks.append(f(yi, t + _C[i] * h))
            y_new = yi  # stage 7 is the 5th-order solution (FSAL)
            err_vec = h * np.dot(_E, [k.data for k in ks])
            sc = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y.data), np.abs(y_new.data))
            r = err_vec / sc
            err = math.sqrt(float(r @ r) / r.size)
            if not math.isfinite(err):
                self._fail("non-finite error estimate")
            if err <= 1.0:
                self._check(y_new)
                y = y_new
                t = t1 if last else t + h
                self.k1 = ks[6]
                factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                if not last or h >= self.h:
                    self.h = h * factor
            else:
                self.h = h * max(0.2, 0.9 * err ** -0.2)
                if self.h < 1e-12 * max(1.0, abs(t)):
                    self._fail("step size underflow")
        return y


def _prepare(sys, eta, mu0):
    eta_t = eta if isinstance(eta, Tensor) else constant(eta)
    mu0_t = mu0 if isinstance(mu0, Tensor) else constant(mu0)
    if mu0_t.data.shape != (2,):
        raise ValueError(f"initial state must have shape (2,), got {mu0_t.data.shape}")
    return sys.bind(eta_t), eta_t, mu0_t


def solve_at(sys: OdeSystem, eta, mu0, t0: float, t1: float, cfg: SolverConfig | None = None) -> Tensor:
    """State at ``t1`` of the initial value problem ``mu(t0) = mu0``."""
    cfg = cfg or SolverConfig()
    if t1 < t0:
        raise ValueError(f"t1={t1} precedes t0={t0}")
    f, eta_t, mu0_t = _prepare(sys, eta, mu0)
    return _Integrator(f, cfg, eta_t).advance(mu0_t, float(t0), float(t1))


def solve_sequence(sys: OdeSystem, eta, mu0, times, cfg: SolverConfig | None = None) -> list[Tensor]:
    """States at non-decreasing ``times`` in one integration pass.

    ``mu0`` is the state at ``times[0]`` and is returned unchanged as the
    first entry; repeated times give repeated states.
    """
    cfg = cfg or SolverConfig()
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("time grid must be a non-empty 1-D sequence")
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be non-decreasing")
    f, eta_t, mu0_t = _prepare(sys, eta, mu0)
    integ = _Integrator(f, cfg, eta_t)
    states = [mu0_t]
    y = mu0_t
    for a, b in zip(times[:-1], times[1:]):
        y = integ.advance(y, float(a), float(b))
        states.append(y)
    return states


def solve_grid(sys: OdeSystem, eta, mu0, times, cfg: SolverConfig | None = None) -> Trajectory:
    """Solution at every point of a strictly increasing grid."""
    times = np.asarray(times, dtype=np.float64)
    if times.ndim == 1 and np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return Trajectory(times, solve_sequence(sys, eta, mu0, times, cfg))


def linear_closed_form(A, mu0, t: float) -> np.ndarray:
    """``expm(t*A) @ mu0`` for a real 2x2 ``A``.

    Uses ``exp(tA) = e^{st} [C(t) I + S(t) (A - sI)]`` with ``s = tr(A)/2``
    and ``d^2 = s^2 - det(A)``; ``C, S`` are cosh/sinh, cos/sin, or the
    polynomial limit ``1, t`` for the defective case ``d = 0``.
    """
    A = np.asarray(A, dtype=np.float64)
    mu0 = np.asarray(mu0, dtype=np.float64)
    s = 0.5 * np.trace(A)
    disc = s * s - np.linalg.det(A)
    if abs(disc) * t * t < 1e-16:
        # series through second order in disc keeps full precision near d = 0
        x = disc * t * t
        c = 1 + x / 2 + x * x / 24
        sh = t * (1 + x / 6 + x * x / 120)
    elif disc > 0:
        d = math.sqrt(disc)
        c, sh = math.cosh(d * t), math.sinh(d * t) / d
    else:
        d = math.sqrt(-disc)
        c, sh = math.cos(d * t), math.sin(d * t) / d
    M = math.exp(s * t) * (c * np.eye(2) + sh * (A - s * np.eye(2)))
    return M @ mu0


def rk4_reference(A, mu0, t: float, n_steps: int = 1_000_000) -> np.ndarray:
    """Brute-force fine-step RK4 on ``dy/dt = A y``; independent test oracle."""
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(mu0, dtype=np.float64).copy()
    h = t / n_steps
    # one RK4 step of a linear system is multiplication by a fixed matrix
    I = np.eye(2)
    hA = h * A
    step = I + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + hA @ hA @ hA @ hA / 24
    for _ in range(n_steps):
        y = step @ y
    return y
