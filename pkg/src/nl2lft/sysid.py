"""Monomial bases, one-step discrepancy data, sparse regression, PNLSS models.

Each state (and optionally output) equation gets its own monomial block; the
coefficients are fitted independently per equation by a FISTA LASSO solver on
column-standardized regressors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (DiscreteLinearModel, DivergenceError, NonlinearSystem,
                       simulate_nonlinear)
from .envelope import Hyperrectangle, halton_sample

__all__ = [
    "BasisSpec",
    "MonomialBasis",
    "PnlssModel",
    "ConvergenceError",
    "build_basis",
    "generate_discrepancy_data",
    "fit_coefficients",
    "pareto_sweep",
    "assemble_pnlss",
    "evaluate_pnlss",
    "identify",
]


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, gap: float = float("nan")):
        super().__init__(message)
        self.gap = gap


@dataclass
class BasisSpec:
    """Constraints for per-equation monomial enumeration.

    degree_max is the maximum total degree p (minimum is always 2);
    variable_caps caps the per-variable degree (None = no cap); equation_vars
    lists, per state equation, the z-bar coordinate indices allowed to appear;
    output_equation_vars does the same per output equation (default: none,
    i.e. linear outputs).
    """

    degree_max: int
    equation_vars: list
    variable_caps: dict | None = None
    output_equation_vars: list | None = None

    def __post_init__(self):
        if self.degree_max < 2:
            raise ValueError("degree_max must be at least 2")
        if self.variable_caps:
            if any(c < 0 for c in self.variable_caps.values()):
                raise ValueError("variable caps must be nonnegative")


@dataclass
class MonomialBasis:
    """Exponent blocks over z-bar = (x-bar, u-bar), one block per equation."""

    n: int
    n_u: int
    state_blocks: list  # list of (n_pk, n+n_u) int arrays
    output_blocks: list = field(default_factory=list)

    @property
    def n_z(self) -> int:
        return self.n + self.n_u

    @property
    def block_sizes(self) -> list:
        return [b.shape[0] for b in self.state_blocks]

    def eval_block(self, exponents: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Monomial values for one block; z is (n_z,) or (N, n_z)."""
        z = np.asarray(z, float)
        if exponents.shape[0] == 0:
            shape = (0,) if z.ndim == 1 else (z.shape[0], 0)
            return np.zeros(shape)
        if z.ndim == 1:
            return np.prod(z[None, :] ** exponents, axis=1)
        return np.prod(z[:, None, :] ** exponents[None, :, :], axis=2)

    def eval_state(self, z: np.ndarray) -> np.ndarray:
        """Concatenated zeta(x, u) over the state blocks."""
        parts = [self.eval_block(b, z) for b in self.state_blocks]
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts, axis=-1)


def _enumerate_exponents(n_z, allowed, degree_max, caps):
    """All exponent vectors with support in `allowed`, degree in [2, p], caps."""
    rows = []
    allowed = sorted(allowed)
    for total in range(2, degree_max + 1):
        # compositions of `total` over the allowed variables
        def rec(pos, remaining, current):
            if pos == len(allowed) - 1:
                cap = caps.get(allowed[pos], remaining)
                if remaining <= cap:
                    vec = [0] * n_z
                    for idx, val in current:
                        vec[idx] = val
                    vec[allowed[pos]] = remaining
                    rows.append(vec)
                return
            cap = min(caps.get(allowed[pos], remaining), remaining)
            for d in range(cap + 1):
                rec(pos + 1, remaining - d, current + [(allowed[pos], d)])

        if allowed:
            rec(0, total, [])
    if not rows:
        return np.zeros((0, n_z), dtype=int)
    arr = np.array(rows, dtype=int)
    # graded lexicographic: by total degree, then earlier variables first
    order = sorted(
        range(arr.shape[0]),
        key=lambda i: (int(arr[i].sum()), tuple(-arr[i])),
    )
    return arr[order]


def build_basis(n: int, n_u: int, spec: BasisSpec) -> MonomialBasis:
    """Enumerate per-equation exponent blocks, graded-lex sorted."""
    n_z = n + n_u
    caps = dict(spec.variable_caps or {})
    if len(spec.equation_vars) != n:
        raise ValueError("equation_vars must list one subset per state equation")
    state_blocks = []
    for k, allowed in enumerate(spec.equation_vars):
        block = _enumerate_exponents(n_z, allowed, spec.degree_max, caps)
        state_blocks.append(block)
    output_blocks = []
    for allowed in spec.output_equation_vars or []:
        output_blocks.append(
            _enumerate_exponents(n_z, allowed, spec.degree_max, caps)
        )
    return MonomialBasis(n, n_u, state_blocks, output_blocks)


@dataclass
class DiscrepancyData:
    """Halton samples and per-equation one-step discrepancy targets."""

    samples: np.ndarray        # (s, n+n_u) deviations
    targets: np.ndarray        # (s, n) delta-x
    output_targets: np.ndarray  # (s, n_y) delta-y (zero when outputs linear)
    dropped: list              # sample indices that diverged


def generate_discrepancy_data(sys: NonlinearSystem, lin: DiscreteLinearModel,
                              box: Hyperrectangle, s: int, skip: int = 1,
                              substeps: int = 20) -> DiscrepancyData:
    """Sample the envelope and record the one-step nonlinear/LTI discrepancy.

    Each sample is integrated over one sampling interval with constant input;
    diverging samples are dropped (recorded in `dropped`).
    """
    if s < 1:
        raise ValueError("need at least one sample")
    n, n_u = sys.n, sys.n_u
    pts = halton_sample(box.dim, s, box, skip=skip)
    samples, targets, out_targets, dropped = [], [], [], []
    y_star = sys.output(lin.x_star, lin.u_star)
    for i in range(s):
        p_x, p_u = pts[i, :n], pts[i, n:]
        u_abs = lin.u_star + p_u
        try:
            _, states, _ = simulate_nonlinear(
                sys, lin.x_star + p_x, np.array([u_abs]),
                lin.tau, lin.tau / substeps,
            )
        except DivergenceError:
            dropped.append(i)
            continue
        x_next_dev = states[-1] - lin.x_star
        delta = x_next_dev - lin.step(p_x, p_u)
        samples.append(pts[i])
        targets.append(delta)
        y_dev = sys.output(lin.x_star + p_x, u_abs) - y_star
        out_targets.append(y_dev - (lin.c @ p_x + lin.d @ p_u))
    return DiscrepancyData(
        np.array(samples).reshape(len(samples), box.dim),
        np.array(targets).reshape(len(targets), n),
        np.array(out_targets).reshape(len(out_targets), sys.n_y),
        dropped,
    )


def regressor_matrix(basis: MonomialBasis, block: np.ndarray,
                     samples: np.ndarray) -> np.ndarray:
    return basis.eval_block(block, samples)


@dataclass
class FitResult:
    coef: np.ndarray
    sigma: float
    objective: float
    iterations: int
    fit_error: float  # ||y - Theta coef||_2


def _power_iteration_lmax(gram: np.ndarray, tol: float = 1e-12,
                          max_iter: int = 500) -> float:
    p = gram.shape[0]
    v = np.ones(p) / np.sqrt(p)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v_new = w / norm
        if abs(norm - lam) <= tol * max(1.0, norm):
            return norm
        lam, v = norm, v_new
    return lam


def _soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def fit_coefficients(theta: np.ndarray, y: np.ndarray, sigma: float,
                     x0: np.ndarray | None = None,
                     max_iter: int = 100_000,
                     rel_tol: float = 1e-10) -> FitResult:
    """LASSO solve min 0.5||y - Theta E||^2 + sigma*||E||_1 by FISTA.

    Columns are scaled to unit norm internally (sigma acts on that scale) and
    the coefficients are mapped back; entries below 1e-10 in the standardized
    space are truncated to zero.
    """
    theta = np.atleast_2d(np.asarray(theta, float))
    y = np.asarray(y, float).ravel()
    if theta.shape[0] < 1 or theta.shape[0] != y.size:
        raise ValueError("theta must have one row per target entry")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    m, p = theta.shape
    if p == 0:
        return FitResult(np.zeros(0), sigma, 0.5 * float(y @ y), 0,
                         float(np.linalg.norm(y)))

    scale = np.linalg.norm(theta, axis=0)
    scale[scale == 0.0] = 1.0
    th = theta / scale

    gram = th.T @ th
    lmax = _power_iteration_lmax(gram)
    if lmax <= 0.0:
        coef = np.zeros(p)
        return FitResult(coef, sigma, 0.5 * float(y @ y), 0,
                         float(np.linalg.norm(y)))
    step = 1.0 / (lmax * (1.0 + 1e-9))

    thty = th.T @ y

    def objective(e):
        resid = y - th @ e
        return 0.5 * float(resid @ resid) + sigma * float(np.abs(e).sum())

    e = np.zeros(p) if x0 is None else np.asarray(x0, float) * scale
    z = e.copy()
    t_mom = 1.0
    obj = objective(e)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad = gram @ z - thty
        e_next = _soft_threshold(z - step * grad, sigma * step)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom**2))
        z = e_next + ((t_mom - 1.0) / t_next) * (e_next - e)
        e, t_mom = e_next, t_next
        obj_next = objective(e)
        if abs(obj - obj_next) <= rel_tol * max(1.0, abs(obj)):
            obj = obj_next
            break
        obj = obj_next
    else:
        raise ConvergenceError(
            f"FISTA did not converge in {max_iter} iterations",
            gap=abs(obj - objective(e)),
        )
    e[np.abs(e) < 1e-10] = 0.0
    coef = e / scale
    fit_err = float(np.linalg.norm(y - theta @ coef))
    return FitResult(coef, sigma, objective(e), iterations, fit_err)


@dataclass
class ParetoRow:
    sigma: float
    fit_error: float
    l1_norm: float
    support: int
    val_error: float


@dataclass
class ParetoTable:
    rows: list
    selected: int  # index into rows

    def coefficients(self, fits):
        return fits[self.selected]


def pareto_sweep(theta: np.ndarray, y: np.ndarray, sigma_grid,
                 theta_val: np.ndarray | None = None,
                 y_val: np.ndarray | None = None):
    """Warm-started LASSO path over an ascending sigma grid.

    Returns (ParetoTable, fits).  Selection: the largest sigma whose
    validation fit error stays within 1.1x of the smallest-sigma error (the
    sparsest model within 10% of the best achievable fit).
    """
    sigma_grid = list(sigma_grid)
    if not sigma_grid:
        raise ValueError("sigma grid must be nonempty")
    if sorted(sigma_grid) != sigma_grid:
        raise ValueError("sigma grid must be sorted ascending")
    if theta_val is None:
        theta_val, y_val = theta, y
    y_val = np.asarray(y_val, float).ravel()

    rows, fits = [], []
    warm = None
    for sigma in sigma_grid:
        fit = fit_coefficients(theta, y, sigma, x0=warm)
        warm = fit.coef
        val_err = float(np.linalg.norm(y_val - theta_val @ fit.coef))
        rows.append(ParetoRow(float(sigma), float(fit.fit_error),
                              float(np.abs(fit.coef).sum()),
                              int(np.count_nonzero(fit.coef)), val_err))
        fits.append(fit)
    budget = 1.1 * rows[0].val_error
    selected = 0
    for i, row in enumerate(rows):
        if row.val_error <= budget + 1e-15:
            selected = i
    return ParetoTable(rows, selected), fits


@dataclass
class PnlssModel:
    """Discrete linear model plus block-diagonal polynomial residual."""

    lin: DiscreteLinearModel
    basis: MonomialBasis
    e_blocks: list                 # per state equation, (n_pk,) coefficients
    box: Hyperrectangle
    f_blocks: list = field(default_factory=list)  # per output equation
    sigma: list = field(default_factory=list)     # selected sigma per equation

    def __post_init__(self):
        sizes = self.basis.block_sizes
        got = [np.asarray(e, float).size for e in self.e_blocks]
        if got != sizes:
            raise ValueError(f"coefficient blocks {got} do not match basis {sizes}")
        self.e_blocks = [np.asarray(e, float) for e in self.e_blocks]
        self.f_blocks = [np.asarray(f, float) for f in self.f_blocks]

    def residual_state(self, z) -> np.ndarray:
        """E^T zeta(x, u); z is (n_z,) or (N, n_z)."""
        z = np.asarray(z, float)
        single = z.ndim == 1
        zz = z[None, :] if single else z
        out = np.zeros((zz.shape[0], self.lin.n))
        for k, (block, coefs) in enumerate(zip(self.basis.state_blocks,
                                               self.e_blocks)):
            if block.shape[0]:
                out[:, k] = self.basis.eval_block(block, zz) @ coefs
        return out[0] if single else out

    def residual_output(self, z) -> np.ndarray:
        z = np.asarray(z, float)
        single = z.ndim == 1
        zz = z[None, :] if single else z
        out = np.zeros((zz.shape[0], self.lin.n_y))
        for k, (block, coefs) in enumerate(zip(self.basis.output_blocks,
                                               self.f_blocks)):
            if block.shape[0]:
                out[:, k] = self.basis.eval_block(block, zz) @ coefs
        return out[0] if single else out

    def to_json(self) -> dict:
        return {
            "kind": "pnlss",
            "tau": self.lin.tau,
            "operating_point": {"x": self.lin.x_star.tolist(),
                                "u": self.lin.u_star.tolist()},
            "a_d": self.lin.a_d.tolist(),
            "b_d": self.lin.b_d.tolist(),
            "c": self.lin.c.tolist(),
            "d": self.lin.d.tolist(),
            "envelope": {"lower": self.box.lower.tolist(),
                         "upper": self.box.upper.tolist(),
                         "labels": list(self.box.labels)},
            "state_blocks": [
                {"exponents": b.tolist(), "coefficients": e.tolist()}
                for b, e in zip(self.basis.state_blocks, self.e_blocks)
            ],
            "output_blocks": [
                {"exponents": b.tolist(), "coefficients": f.tolist()}
                for b, f in zip(self.basis.output_blocks, self.f_blocks)
            ],
            "sigma": list(self.sigma),
        }

    @classmethod
    def from_json(cls, data: dict) -> "PnlssModel":
        op = data["operating_point"]
        lin = DiscreteLinearModel(
            np.array(data["a_d"]), np.array(data["b_d"]),
            np.array(data["c"]), np.array(data["d"]),
            data["tau"], np.array(op["x"]), np.array(op["u"]),
        )
        env = data["envelope"]
        box = Hyperrectangle(np.array(env["lower"]), np.array(env["upper"]),
                             tuple(env["labels"]))
        n_z = lin.n + lin.n_u
        state_blocks, e_blocks = [], []
        for blk in data["state_blocks"]:
            state_blocks.append(np.array(blk["exponents"], dtype=int).reshape(-1, n_z))
            e_blocks.append(np.array(blk["coefficients"], dtype=float))
        output_blocks, f_blocks = [], []
        for blk in data.get("output_blocks", []):
            output_blocks.append(np.array(blk["exponents"], dtype=int).reshape(-1, n_z))
            f_blocks.append(np.array(blk["coefficients"], dtype=float))
        basis = MonomialBasis(lin.n, lin.n_u, state_blocks, output_blocks)
        return cls(lin, basis, e_blocks, box, f_blocks,
                   list(data.get("sigma", [])))


def assemble_pnlss(lin: DiscreteLinearModel, basis: MonomialBasis,
                   e_blocks, box: Hyperrectangle, f_blocks=None,
                   sigma=None) -> PnlssModel:
    return PnlssModel(lin, basis, list(e_blocks), box,
                      list(f_blocks or []), list(sigma or []))


def evaluate_pnlss(model: PnlssModel, x_dev, u_dev) -> np.ndarray:
    """One PNLSS step: A_d x + B_d u + E^T zeta(x, u)."""
    x_dev = np.asarray(x_dev, float)
    u_dev = np.asarray(u_dev, float)
    z = np.concatenate([x_dev, u_dev])
    return model.lin.step(x_dev, u_dev) + model.residual_state(z)


def pnlss_output(model: PnlssModel, x_dev, u_dev) -> np.ndarray:
    z = np.concatenate([np.asarray(x_dev, float), np.asarray(u_dev, float)])
    return model.lin.c @ x_dev + model.lin.d @ u_dev + model.residual_output(z)


def identify(sys: NonlinearSystem, lin: DiscreteLinearModel,
             box: Hyperrectangle, spec: BasisSpec, sigma_factors,
             n_train: int, n_val: int):
    """End-to-end identification: data, per-equation Pareto sweeps, assembly.

    sigma_factors scale ||Theta~^T y||_inf per equation to build each sigma
    grid.  Returns (PnlssModel, per-equation ParetoTable list).
    """
    basis = build_basis(sys.n, sys.n_u, spec)
    train = generate_discrepancy_data(sys, lin, box, n_train, skip=1)
    val = generate_discrepancy_data(sys, lin, box, n_val, skip=1 + n_train)
    factors = sorted(float(f) for f in sigma_factors)

    def sweep_blocks(blocks, targets_tr, targets_va):
        coefs, tables = [], []
        for k, block in enumerate(blocks):
            if block.shape[0] == 0:
                coefs.append(np.zeros(0))
                tables.append(None)
                continue
            th_tr = basis.eval_block(block, train.samples)
            th_va = basis.eval_block(block, val.samples)
            y_tr = targets_tr[:, k]
            y_va = targets_va[:, k]
            scale = np.linalg.norm(th_tr, axis=0)
            scale[scale == 0.0] = 1.0
            ref = float(np.abs((th_tr / scale).T @ y_tr).max())
            grid = [f * ref for f in factors] if ref > 0 else [0.0]
            table, fits = pareto_sweep(th_tr, y_tr, grid, th_va, y_va)
            coefs.append(fits[table.selected].coef)
            tables.append(table)
        return coefs, tables

    e_blocks, e_tables = sweep_blocks(basis.state_blocks, train.targets,
                                      val.targets)
    f_blocks, f_tables = sweep_blocks(basis.output_blocks,
                                      train.output_targets,
                                      val.output_targets)
    sel_sigma = [t.rows[t.selected].sigma if t else 0.0 for t in e_tables]
    model = assemble_pnlss(lin, basis, e_blocks, box, f_blocks, sel_sigma)
    return model, e_tables + [t for t in f_tables if t is not None]
