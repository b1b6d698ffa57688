"""Nonlinear system registration, linearization, ZOH discretization, simulators.

Simulation is fixed-step RK4 with the input held on a zero-order-hold grid;
the divergence guard distinguishes instability from float overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

__all__ = [
    "NonlinearSystem",
    "DiscreteLinearModel",
    "DivergenceError",
    "LinearizationError",
    "StabilizabilityError",
    "linearize",
    "discretize_zoh",
    "linearize_and_discretize",
    "simulate_nonlinear",
    "simulate_closed_loop_nonlinear",
    "lqr_state_feedback",
]

DIVERGENCE_LIMIT = 1e9


class DivergenceError(RuntimeError):
    """State norm exceeded the divergence limit; carries the blow-up time."""

    def __init__(self, time: float):
        super().__init__(f"trajectory diverged at t={time:.6g}")
        self.time = time


class LinearizationError(RuntimeError):
    pass


class StabilizabilityError(RuntimeError):
    pass


@dataclass
class NonlinearSystem:
    """Continuous-time system xdot = f(x, u), y = h(x, u).

    `h` defaults to full state output.  Analytic Jacobians are optional; when
    absent, central finite differences are used.
    """

    n: int
    n_u: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    n_y: int | None = None
    jac_f: Callable[[np.ndarray, np.ndarray], tuple] | None = None
    jac_h: Callable[[np.ndarray, np.ndarray], tuple] | None = None
    name: str = ""

    def __post_init__(self):
        if self.h is None:
            self.h = lambda x, u: np.asarray(x, dtype=float)
            if self.n_y is None:
                self.n_y = self.n
        elif self.n_y is None:
            probe = self.h(np.zeros(self.n), np.zeros(self.n_u))
            self.n_y = int(np.asarray(probe).size)

    def deriv(self, x, u) -> np.ndarray:
        return np.asarray(self.f(np.asarray(x, float), np.asarray(u, float)), float)

    def output(self, x, u) -> np.ndarray:
        return np.atleast_1d(
            np.asarray(self.h(np.asarray(x, float), np.asarray(u, float)), float)
        )


@dataclass
class DiscreteLinearModel:
    """ZOH discretization of the linearization about an operating point."""

    a_d: np.ndarray
    b_d: np.ndarray
    c: np.ndarray
    d: np.ndarray
    tau: float
    x_star: np.ndarray
    u_star: np.ndarray

    def __post_init__(self):
        self.a_d = np.asarray(self.a_d, float)
        self.b_d = np.asarray(self.b_d, float)
        self.c = np.asarray(self.c, float)
        self.d = np.asarray(self.d, float)
        self.x_star = np.asarray(self.x_star, float)
        self.u_star = np.asarray(self.u_star, float)
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def n(self) -> int:
        return self.a_d.shape[0]

    @property
    def n_u(self) -> int:
        return self.b_d.shape[1]

    @property
    def n_y(self) -> int:
        return self.c.shape[0]

    def step(self, x_dev, u_dev) -> np.ndarray:
        return self.a_d @ x_dev + self.b_d @ u_dev


def _fd_jacobian(fn, x0, eps_fn):
    x0 = np.asarray(x0, float)
    f0 = np.atleast_1d(np.asarray(fn(x0), float))
    jac = np.empty((f0.size, x0.size))
    for i in range(x0.size):
        step = eps_fn(x0[i])
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        jac[:, i] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2 * step)
    return jac


def linearize(sys: NonlinearSystem, x_star, u_star):
    """Continuous-time Jacobians (A_c, B_c, C_c, D_c) at an operating point.

    Analytic Jacobians if the system provides them, otherwise central
    differences with per-coordinate step max(1e-6, 1e-6*|coordinate|).
    """
    x_star = np.asarray(x_star, float)
    u_star = np.asarray(u_star, float)
    if not np.all(np.isfinite(sys.deriv(x_star, u_star))):
        raise LinearizationError("f is not finite at the operating point")

    if sys.jac_f is not None:
        a_c, b_c = (np.asarray(m, float) for m in sys.jac_f(x_star, u_star))
    else:
        eps = lambda v: max(1e-6, 1e-6 * abs(v))
        a_c = _fd_jacobian(lambda x: sys.deriv(x, u_star), x_star, eps)
        b_c = _fd_jacobian(lambda u: sys.deriv(x_star, u), u_star, eps)
    if sys.jac_h is not None:
        c_c, d_c = (np.asarray(m, float) for m in sys.jac_h(x_star, u_star))
    else:
        eps = lambda v: max(1e-6, 1e-6 * abs(v))
        c_c = _fd_jacobian(lambda x: sys.output(x, u_star), x_star, eps)
        d_c = _fd_jacobian(lambda u: sys.output(x_star, u), u_star, eps)
    for m in (a_c, b_c, c_c, d_c):
        if not np.all(np.isfinite(m)):
            raise LinearizationError("non-finite derivative in Jacobian")
    return a_c, b_c, c_c, d_c


def discretize_zoh(a_c: np.ndarray, b_c: np.ndarray, tau: float):
    """ZOH discretization via the block matrix exponential."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    a_c = np.atleast_2d(np.asarray(a_c, float))
    b_c = np.atleast_2d(np.asarray(b_c, float))
    n, m = a_c.shape[0], b_c.shape[1]
    block = np.zeros((n + m, n + m))
    block[:n, :n] = a_c
    block[:n, n:] = b_c
    exp = expm(block * tau)
    return exp[:n, :n], exp[:n, n:]


def linearize_and_discretize(sys: NonlinearSystem, x_star, u_star, tau: float
                             ) -> DiscreteLinearModel:
    a_c, b_c, c_c, d_c = linearize(sys, x_star, u_star)
    a_d, b_d = discretize_zoh(a_c, b_c, tau)
    return DiscreteLinearModel(a_d, b_d, c_c, d_c, tau,
                               np.asarray(x_star, float), np.asarray(u_star, float))


def _rk4_interval(sys, x, u, t0, dt, nsteps):
    """Integrate `nsteps` RK4 steps of size dt with u held constant."""
    t = t0
    for _ in range(nsteps):
        k1 = sys.deriv(x, u)
        k2 = sys.deriv(x + 0.5 * dt * k1, u)
        k3 = sys.deriv(x + 0.5 * dt * k2, u)
        k4 = sys.deriv(x + dt * k3, u)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_LIMIT:
            raise DivergenceError(t)
    return x


def simulate_nonlinear(sys: NonlinearSystem, x0, inputs, horizon: float,
                       step: float):
    """Fixed-step RK4 simulation with the input held on a ZOH grid.

    `inputs` is None (zero input), a callable t -> u, or an array of shape
    (K, n_u) holding u constant on each of K equal segments of the horizon.
    `step` must divide the horizon (and each ZOH segment) evenly.

    Returns (times, states, outputs) with times of length K_total+1.
    """
    if horizon <= 0 or step <= 0:
        raise ValueError("horizon and step must be positive")
    total = int(round(horizon / step))
    if abs(total * step - horizon) > 1e-9 * horizon:
        raise ValueError("step must divide horizon")

    if inputs is None:
        u_of_seg = lambda k: np.zeros(sys.n_u)
        segments, per_seg = 1, total
    elif callable(inputs):
        u_of_seg = lambda k: np.atleast_1d(np.asarray(inputs(k * step), float))
        segments, per_seg = total, 1
    else:
        arr = np.asarray(inputs, float)
        if arr.ndim == 1:
            arr = arr[:, None]
        segments = arr.shape[0]
        if total % segments:
            raise ValueError("step must divide each input segment")
        per_seg = total // segments
        u_of_seg = lambda k: arr[k]

    x = np.asarray(x0, float).copy()
    states = np.empty((total + 1, sys.n))
    states[0] = x
    idx = 1
    for k in range(segments):
        u = u_of_seg(k)
        for j in range(per_seg):
            x = _rk4_interval(sys, x, u, (idx - 1) * step, step, 1)
            states[idx] = x
            idx += 1
    times = np.arange(total + 1) * step
    seg_len = total // segments
    outputs = np.empty((total + 1, sys.n_y))
    for i in range(total + 1):
        k = min(i // seg_len, segments - 1) if inputs is not None else 0
        outputs[i] = sys.output(states[i], u_of_seg(k))
    return times, states, outputs


def simulate_closed_loop_nonlinear(sys: NonlinearSystem,
                                   model: DiscreteLinearModel,
                                   gain: np.ndarray,
                                   disturbance: np.ndarray,
                                   x0_dev=None,
                                   substeps: int = 20):
    """Sampled-data loop u = u* - K*(x - x*) + d(k), RK4 inside each interval.

    Returns deviation trajectories (states (K+1, n), inputs (K, n_u),
    outputs (K+1, n_y)); the final output is evaluated with the last input.
    """
    dist = np.atleast_2d(np.asarray(disturbance, float))
    steps = dist.shape[0]
    gain = np.atleast_2d(np.asarray(gain, float))
    x = model.x_star + (np.zeros(sys.n) if x0_dev is None else np.asarray(x0_dev, float))
    y_star = sys.output(model.x_star, model.u_star)
    dt = model.tau / substeps

    xs = np.empty((steps + 1, sys.n))
    us = np.empty((steps, sys.n_u))
    ys = np.empty((steps + 1, sys.n_y))
    xs[0] = x - model.x_star
    for k in range(steps):
        u_dev = -gain @ xs[k] + dist[k]
        u = model.u_star + u_dev
        ys[k] = sys.output(x, u) - y_star
        x = _rk4_interval(sys, x, u, k * model.tau, dt, substeps)
        xs[k + 1] = x - model.x_star
        us[k] = u_dev
    ys[steps] = sys.output(x, model.u_star + us[-1]) - y_star
    return xs, us, ys


def lqr_state_feedback(a_d: np.ndarray, b_d: np.ndarray, q: np.ndarray,
                       r: np.ndarray, tol: float = 1e-10,
                       max_iter: int = 100_000) -> np.ndarray:
    """Discrete LQR gain via Riccati difference iteration.

    Iterates P until successive change < tol; raises StabilizabilityError on
    non-convergence or an unstable closed loop.
    """
    a = np.atleast_2d(np.asarray(a_d, float))
    b = np.atleast_2d(np.asarray(b_d, float))
    q = np.atleast_2d(np.asarray(q, float))
    r = np.atleast_2d(np.asarray(r, float))
    p = q.copy()
    for _ in range(max_iter):
        btp = b.T @ p
        k = np.linalg.solve(r + btp @ b, btp @ a)
        p_next = q + a.T @ p @ (a - b @ k)
        p_next = 0.5 * (p_next + p_next.T)
        if not np.all(np.isfinite(p_next)):
            raise StabilizabilityError("Riccati iteration diverged")
        if np.max(np.abs(p_next - p)) < tol:
            p = p_next
            break
        p = p_next
    else:
        raise StabilizabilityError(
            f"Riccati iteration did not converge in {max_iter} iterations"
        )
    btp = b.T @ p
    k = np.linalg.solve(r + btp @ b, btp @ a)
    radius = max(abs(np.linalg.eigvals(a - b @ k)))
    if radius >= 1.0:
        raise StabilizabilityError(
            f"closed-loop spectral radius {radius:.6g} >= 1"
        )
    return k
