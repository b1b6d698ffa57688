"""Guided simulation by simulated annealing over a declared search space.

The optimizer maximizes a scalar objective over box-normalized coordinates;
the two applications are the dynamic-uncertainty norm bound (worst-case
error-to-input ratio between two closed loops) and coverage-driven training
data generation (spread objective plus greedy ML2 run selection).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cfnn import TrainingSet
from .envelope import Hyperrectangle, ml2_discrepancy, normalize_to_unit

__all__ = [
    "ScalarDim",
    "SignalDim",
    "SearchSpace",
    "SaConfig",
    "FalsificationTask",
    "OracleFailure",
    "CoverageError",
    "EvalRecord",
    "OptResult",
    "optimize",
    "bound_dynamic_uncertainty",
    "generate_coverage_data",
]


class OracleFailure(RuntimeError):
    """Raised by oracles to skip a point; the budget is still consumed."""


class CoverageError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScalarDim:
    name: str
    lower: float
    upper: float


@dataclass(frozen=True)
class SignalDim:
    """Per-channel signal parameterized by control points over the horizon."""

    name: str
    control_points: int
    lower: float
    upper: float
    interpolation: str = "zoh"  # or "linear"

    def __post_init__(self):
        if self.control_points < 1:
            raise ValueError("need at least one control point")
        if self.interpolation not in ("zoh", "linear"):
            raise ValueError("interpolation must be 'zoh' or 'linear'")


@dataclass
class SearchSpace:
    scalars: list
    signals: list
    horizon: float
    tau: float

    def __post_init__(self):
        for s in self.scalars:
            if not np.isfinite([s.lower, s.upper]).all() or s.lower > s.upper:
                raise ValueError(f"bad scalar bounds for {s.name}")
        for s in self.signals:
            if not np.isfinite([s.lower, s.upper]).all() or s.lower > s.upper:
                raise ValueError(f"bad signal bounds for {s.name}")
        if self.horizon <= 0 or self.tau <= 0:
            raise ValueError("horizon and tau must be positive")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.tau))

    @property
    def dim(self) -> int:
        return len(self.scalars) + sum(s.control_points for s in self.signals)

    def decode(self, point01: np.ndarray):
        """Map a unit-cube point to (scalar values, signal array (K, n_sig))."""
        p = np.asarray(point01, float)
        scalars = np.empty(len(self.scalars))
        for i, s in enumerate(self.scalars):
            scalars[i] = s.lower + p[i] * (s.upper - s.lower)
        offset = len(self.scalars)
        steps = self.steps
        signals = np.empty((steps, len(self.signals)))
        for j, s in enumerate(self.signals):
            cps = s.lower + (s.upper - s.lower) * \
                p[offset:offset + s.control_points]
            offset += s.control_points
            if s.control_points == 1:
                signals[:, j] = cps[0]
            elif s.interpolation == "zoh":
                seg = np.minimum(
                    (np.arange(steps) * s.control_points) // steps,
                    s.control_points - 1,
                )
                signals[:, j] = cps[seg]
            else:
                t_cp = np.linspace(0.0, steps - 1, s.control_points)
                signals[:, j] = np.interp(np.arange(steps), t_cp, cps)
        return scalars, signals


@dataclass
class SaConfig:
    segments: int = 5          # uniform restart every budget/segments evals
    step_start: float = 0.3
    step_end: float = 0.01
    temp_start: float = 0.1
    temp_end: float = 1e-4


@dataclass
class FalsificationTask:
    space: SearchSpace
    oracle: object             # decoded point -> float, may raise OracleFailure
    budget: int = 200
    seed: int = 0
    sa: SaConfig = field(default_factory=SaConfig)


@dataclass
class EvalRecord:
    point01: np.ndarray
    value: float               # nan when the oracle failed
    accepted: bool
    restart: int


@dataclass
class OptResult:
    best_point01: np.ndarray
    best_value: float
    log: list

    def best_decoded(self, space: SearchSpace):
        return space.decode(self.best_point01)


def optimize(task: FalsificationTask) -> OptResult:
    """Simulated annealing maximization; deterministic per seed.

    Gaussian proposals in the unit cube with geometrically decaying step scale
    and temperature per restart segment; failed oracle points consume budget.
    The log always has exactly `budget` entries.
    """
    if task.budget < 1:
        raise ValueError("budget must be at least 1")
    space = task.space
    rng = np.random.default_rng(task.seed)
    dim = space.dim
    seg_len = max(1, int(np.ceil(task.budget / task.sa.segments)))
    cfg = task.sa

    log = []
    best_val = -np.inf
    best_point = None
    current = None
    current_val = -np.inf
    evals = 0
    restart = -1
    while evals < task.budget:
        restart += 1
        current = rng.uniform(0.0, 1.0, size=dim)
        remaining = min(seg_len, task.budget - evals)
        decay_step = (cfg.step_end / cfg.step_start) ** (1.0 / max(remaining - 1, 1))
        decay_temp = (cfg.temp_end / cfg.temp_start) ** (1.0 / max(remaining - 1, 1))
        step = cfg.step_start
        temp = cfg.temp_start
        current_val = -np.inf
        for i in range(remaining):
            if i == 0:
                candidate = current
            else:
                candidate = np.clip(
                    current + rng.normal(0.0, step, size=dim), 0.0, 1.0)
            try:
                value = float(task.oracle(space.decode(candidate)))
            except OracleFailure:
                log.append(EvalRecord(candidate.copy(), float("nan"), False,
                                      restart))
                evals += 1
                step *= decay_step
                temp *= decay_temp
                continue
            accept = value > current_val or \
                rng.uniform() < np.exp(min((value - current_val) / temp, 0.0))
            if accept:
                current = candidate
                current_val = value
            if value > best_val:
                best_val = value
                best_point = candidate.copy()
            log.append(EvalRecord(candidate.copy(), value, bool(accept),
                                  restart))
            evals += 1
            step *= decay_step
            temp *= decay_temp
    if best_point is None:  # every point failed
        best_point = log[-1].point01
    return OptResult(best_point, best_val, log)


@dataclass
class BoundResult:
    bound: float              # max ratio * safety factor
    max_ratio: float
    safety_factor: float
    best_point01: np.ndarray
    log: list


def bound_dynamic_uncertainty(simulate_original, simulate_reduced,
                              space: SearchSpace, budget: int = 200,
                              safety_factor: float = 1.25,
                              seed: int = 0,
                              sa: SaConfig | None = None) -> BoundResult:
    """Falsified norm bound on the error between two closed loops.

    Both simulators map (scalars, disturbance signals) to an output trajectory
    from zero initial conditions; the oracle is ||y_orig - y_red||_2 /
    ||d||_2 over the horizon, and the returned bound inflates the maximum
    ratio found by the safety factor.
    """

    def oracle(decoded):
        scalars, signals = decoded
        d_norm = float(np.linalg.norm(signals))
        if d_norm == 0.0:
            raise OracleFailure("zero-input point: ratio undefined")
        y_orig = np.asarray(simulate_original(scalars, signals), float)
        y_red = np.asarray(simulate_reduced(scalars, signals), float)
        return float(np.linalg.norm(y_orig - y_red)) / d_norm

    task = FalsificationTask(space, oracle, budget=budget, seed=seed,
                             sa=sa or SaConfig())
    result = optimize(task)
    max_ratio = max(result.best_value, 0.0)
    return BoundResult(max_ratio * safety_factor, max_ratio, safety_factor,
                       result.best_point01, result.log)


@dataclass
class CoverageReport:
    selected_runs: list        # run ids in greedy order
    ml2_history: list
    database_size: int
    rejected: int


def generate_coverage_data(simulate_run, space: SearchSpace, budget: int,
                           l_v: float, target_n: int, box: Hyperrectangle,
                           n_states: int, seed: int = 0, thin: int = 1,
                           sa: SaConfig | None = None):
    """Spread-maximizing runs plus greedy ML2 selection into a TrainingSet.

    `simulate_run` maps (scalars, signals) to sample rows (K, n+n_u) in
    deviation coordinates.  Out-of-envelope samples are dropped before the
    spread objective V = sum over in-envelope samples of the squared states;
    runs with V < l_v are rejected.  Accepted runs enter a database and whole
    runs are added greedily while the ML2 discrepancy of the accumulated
    normalized cloud keeps decreasing (or until target_n samples).
    """
    database = []  # (run id, samples (K', n+n_u))

    def oracle(decoded):
        samples = np.asarray(simulate_run(*decoded), float)
        inside = box.contains(samples)
        kept = samples[inside]
        spread = float(np.sum(kept[:, :n_states] ** 2))
        if spread >= l_v and kept.shape[0] >= 1:
            database.append(kept[::thin])
        return spread

    task = FalsificationTask(space, oracle, budget=budget, seed=seed,
                             sa=sa or SaConfig())
    optimize(task)
    if not database:
        raise CoverageError(
            f"no run reached the spread threshold L_v={l_v:g}; lower L_v"
        )

    # greedy ML2 selection over whole runs with cached pairwise cross sums
    unit_runs = [normalize_to_unit(run, box) for run in database]
    d = box.dim
    sizes = np.array([r.shape[0] for r in unit_runs])
    s1 = np.array([np.prod((3.0 - r**2) / 2.0, axis=1).sum()
                   for r in unit_runs])
    n_runs = len(unit_runs)
    cross = np.zeros((n_runs, n_runs))
    for a in range(n_runs):
        for b in range(a, n_runs):
            pa, pb = unit_runs[a], unit_runs[b]
            val = np.prod(
                2.0 - np.maximum(pa[:, None, :], pb[None, :, :]), axis=2
            ).sum()
            cross[a, b] = cross[b, a] = val

    const = (4.0 / 3.0) ** d

    def ml2_of(selected):
        n_tot = sizes[selected].sum()
        t2 = 2.0 * s1[selected].sum() / n_tot
        t3 = cross[np.ix_(selected, selected)].sum() / n_tot**2
        return float(np.sqrt(max(const - t2 + t3, 0.0)))

    remaining = list(range(n_runs))
    selected = []
    current = np.inf
    history = []
    while remaining and sizes[selected].sum() < target_n:
        scores = [(ml2_of(selected + [rid]), rid) for rid in remaining]
        best_score, best_rid = min(scores)
        if best_score >= current:
            break
        selected.append(best_rid)
        remaining.remove(best_rid)
        current = best_score
        history.append(best_score)

    cols = np.vstack([database[rid] for rid in selected]).T
    ids = np.concatenate([
        np.full(database[rid].shape[0], rid) for rid in selected
    ])
    report = CoverageReport(selected, history, n_runs,
                            budget - n_runs)
    return TrainingSet(cols, ids), report
