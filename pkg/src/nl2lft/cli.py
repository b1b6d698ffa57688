"""Pipeline orchestration: config, stages, artifact persistence, reporting.

Every stage reads its inputs from files written by earlier stages and writes
its outputs back to the run directory, so stages can be rerun, diffed, and
tested in isolation.  All artifacts except the manifest (which holds wall
times and timestamps) are byte-deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .analysis import tradeoff_report
from .cfnn import (Cfnn, TrainConfig, TrainingSet, export_maps, init_cfnn,
                   mu_parameter_set, train)
from .dynamics import (DivergenceError, linearize_and_discretize,
                       lqr_state_feedback, simulate_closed_loop_nonlinear)
from .envelope import Hyperrectangle, ParameterSet
from .falsify import (OracleFailure, ScalarDim, SearchSpace, SignalDim,
                      bound_dynamic_uncertainty, generate_coverage_data)
from .lpvlft import (LftSystem, LpvModel, default_priority, factorize,
                     lft_close_state_feedback, lft_realize, reduced_lpv,
                     simulate_closed_loop_lpv)
from .sysid import BasisSpec, PnlssModel, evaluate_pnlss, identify
from .systems import make_system

__all__ = ["DependencyError", "load_config", "run_stage", "main"]

STAGES = ["identify", "lpvify", "lftize", "gendata", "reduce", "bound",
          "analyze", "validate"]

_SEED_OFFSETS = {"gendata": 11, "reduce": 23, "bound": 37}


class DependencyError(RuntimeError):
    def __init__(self, path: Path):
        super().__init__(f"missing upstream artifact: {path}")
        self.path = path


# ---------------------------------------------------------------- config --

DEFAULTS = {
    "system": {"name": "pendulum", "params": {}, "plugin_command": []},
    "envelope": {"operating_x": None, "operating_u": None},
    "identify": {
        "degree_max": 3, "n_train": 400, "n_val": 200,
        "sigma_factors": [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 0.3, 1.0],
        "variable_caps": {}, "equation_vars": None,
    },
    "lpvify": {"priority": None},
    "controller": {"q_diag": None, "r_diag": None},
    "gendata": {
        "budget": 30, "l_v": 20.0, "target_n": 4000, "horizon": 10.0,
        "thin": 5, "ic_fraction": 0.8, "disturbance_fraction": 0.5,
        "control_points": 10, "val_fraction": 0.25,
    },
    "reduce": {
        "m_values": [0, 1], "n_e": 2, "width": None, "max_epochs": 400,
        "patience": 50, "minibatch": 128, "reg": 1e-6, "learning_rate": 1e-3,
    },
    "bound": {
        "budget": 60, "horizon": 10.0, "control_points": 10,
        "safety_factor": 1.25, "disturbance_fraction": 0.5,
    },
    "analyze": {"grid": 256, "tol": 1e-2, "hinf_grid": 512, "hinf_tol": 1e-3,
                "within": 0.15},
    "run": {"seed": 0, "out": "runs/out"},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | Path) -> dict:
    """Parse a TOML config and fill in the documented defaults."""
    raw = tomllib.loads(Path(path).read_text())
    cfg = {k: _merge(DEFAULTS.get(k, {}), raw.get(k, {}))
           for k in set(DEFAULTS) | set(raw)}
    if "envelope" not in raw:
        raise ValueError("config must declare an [envelope] section")
    for key in ("state_lower", "state_upper", "input_lower", "input_upper",
                "tau"):
        if key not in cfg["envelope"]:
            raise ValueError(f"[envelope] missing {key}")
    return cfg


# --------------------------------------------------------------- context --

class RunContext:
    """Everything derivable from config alone (no artifacts)."""

    def __init__(self, cfg: dict, out: Path, seed: int):
        self.cfg = cfg
        self.out = Path(out)
        self.seed = seed
        sysc = cfg["system"]
        self.bundle, self.closer = make_system(
            sysc["name"], sysc.get("params"), sysc.get("plugin_command"))
        env = cfg["envelope"]
        lower = list(env["state_lower"]) + list(env["input_lower"])
        upper = list(env["state_upper"]) + list(env["input_upper"])
        self.box = Hyperrectangle(np.array(lower), np.array(upper),
                                  self.bundle.labels)
        self.tau = float(env["tau"])
        n, n_u = self.bundle.system.n, self.bundle.system.n_u
        x_star = np.array(env["operating_x"] or [0.0] * n, float)
        u_star = np.array(env["operating_u"] or [0.0] * n_u, float)
        self.lin = linearize_and_discretize(self.bundle.system, x_star,
                                            u_star, self.tau)
        q_diag = cfg["controller"]["q_diag"] or [1.0] * n
        r_diag = cfg["controller"]["r_diag"] or [0.1] * n_u
        self.gain = lqr_state_feedback(self.lin.a_d, self.lin.b_d,
                                       np.diag(q_diag), np.diag(r_diag))

    def close(self):
        if self.closer:
            self.closer()

    def stage_seed(self, stage: str, extra: int = 0) -> int:
        return self.seed * 1009 + _SEED_OFFSETS.get(stage, 0) + extra


# ------------------------------------------------------------- artifacts --

def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_artifact(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def load_artifact_json(path: Path) -> dict:
    if not path.exists():
        raise DependencyError(path)
    return json.loads(path.read_text())


def write_training_csv(path: Path, ts: TrainingSet, labels):
    lines = ["traj_id," + ",".join(labels)]
    samples = ts.samples()
    for tid, row in zip(ts.trajectory_ids, samples):
        lines.append(str(int(tid)) + "," + ",".join(repr(v) for v in row))
    write_artifact(path, "\n".join(lines) + "\n")


def read_training_csv(path: Path, val_fraction: float) -> TrainingSet:
    if not path.exists():
        raise DependencyError(path)
    lines = path.read_text().strip().split("\n")
    ids, rows = [], []
    for line in lines[1:]:
        parts = line.split(",")
        ids.append(int(parts[0]))
        rows.append([float(v) for v in parts[1:]])
    return TrainingSet(np.array(rows).T, np.array(ids), val_fraction)


def write_eval_log_csv(path: Path, log):
    if log:
        dim = log[0].point01.size
        header = ",".join(f"p{i}" for i in range(dim)) + ",value,accepted"
    else:
        header = "value,accepted"
    lines = [header]
    for rec in log:
        coords = ",".join(repr(v) for v in rec.point01)
        lines.append(f"{coords},{rec.value!r},{int(rec.accepted)}")
    write_artifact(path, "\n".join(lines) + "\n")


class Manifest:
    def __init__(self, out: Path, cfg: dict, seed: int):
        self.path = out / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"stages": {}, "artifacts": {}}
        self.data["config"] = cfg
        self.data["seed"] = seed
        self.data["versions"] = {
            "nl2lft": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        }

    def record(self, stage: str, wall: float, artifacts, notes=None):
        self.data["stages"][stage] = {
            "wall_time_s": wall,
            "completed_at": datetime.datetime.now(
                datetime.timezone.utc).isoformat(),
            "notes": notes or [],
        }
        for name, path in artifacts.items():
            self.data["artifacts"][name] = str(path)
        write_artifact(self.path, dump_json(self.data))


# ---------------------------------------------------------------- stages --

def stage_identify(ctx: RunContext, manifest: Manifest):
    cfg = ctx.cfg["identify"]
    eq_vars = cfg["equation_vars"] or ctx.bundle.equation_vars
    caps = {int(k): int(v) for k, v in (cfg["variable_caps"] or {}).items()}
    spec = BasisSpec(int(cfg["degree_max"]),
                     [tuple(v) for v in eq_vars],
                     caps or None)
    start = time.perf_counter()
    model, tables = identify(ctx.bundle.system, ctx.lin, ctx.box, spec,
                             cfg["sigma_factors"], int(cfg["n_train"]),
                             int(cfg["n_val"]))
    artifacts = {"pnlss": ctx.out / "pnlss.json"}
    write_artifact(artifacts["pnlss"], dump_json(model.to_json()))
    for k, table in enumerate(tables):
        if table is None:
            continue
        lines = ["sigma,fit_error,l1_norm,support,val_error"]
        for row in table.rows:
            lines.append(f"{row.sigma!r},{row.fit_error!r},{row.l1_norm!r},"
                         f"{row.support},{row.val_error!r}")
        path = ctx.out / f"pareto_eq{k}.csv"
        write_artifact(path, "\n".join(lines) + "\n")
        artifacts[f"pareto_eq{k}"] = path
    manifest.record("identify", time.perf_counter() - start, artifacts)
    return model


def _load_pnlss(ctx) -> PnlssModel:
    return PnlssModel.from_json(load_artifact_json(ctx.out / "pnlss.json"))


def stage_lpvify(ctx: RunContext, manifest: Manifest):
    pnlss = _load_pnlss(ctx)
    priority = ctx.cfg["lpvify"]["priority"]
    if priority is not None:
        priority = [int(v) for v in priority]
        missing = [v for v in range(ctx.box.dim) if v not in priority]
        priority = priority + missing
    else:
        priority = default_priority(pnlss.basis, ctx.box)
    start = time.perf_counter()
    lpv = factorize(pnlss, priority)
    path = ctx.out / "lpv.json"
    write_artifact(path, dump_json(lpv.to_json()))
    manifest.record("lpvify", time.perf_counter() - start, {"lpv": path},
                    notes=[f"priority={priority}",
                           f"parameters={list(lpv.param_names)}"])
    return lpv


def _load_lpv(ctx) -> LpvModel:
    return LpvModel.from_json(load_artifact_json(ctx.out / "lpv.json"))


def stage_lftize(ctx: RunContext, manifest: Manifest):
    lpv = _load_lpv(ctx)
    start = time.perf_counter()
    lft = lft_realize(lpv)
    path = ctx.out / "lft.json"
    write_artifact(path, dump_json(lft.to_json()))
    manifest.record("lftize", time.perf_counter() - start, {"lft": path},
                    notes=[f"delta_dim={lft.delta_dim}"])
    return lft


def _gendata_space(ctx, section) -> SearchSpace:
    n = ctx.bundle.system.n
    env = ctx.box
    scalars = [
        ScalarDim(f"x0_{env.labels[i]}",
                  section["ic_fraction"] * env.lower[i],
                  section["ic_fraction"] * env.upper[i])
        for i in range(n)
    ]
    signals = _disturbance_signals(ctx, section)
    return SearchSpace(scalars, signals, float(section["horizon"]), ctx.tau)


def _disturbance_signals(ctx, section):
    n = ctx.bundle.system.n
    frac = section["disturbance_fraction"]
    return [
        SignalDim(f"d_{ctx.box.labels[n + j]}", int(section["control_points"]),
                  frac * ctx.box.lower[n + j], frac * ctx.box.upper[n + j])
        for j in range(ctx.bundle.system.n_u)
    ]


def stage_gendata(ctx: RunContext, manifest: Manifest):
    _load_pnlss(ctx)  # dependency: identified model must exist
    section = ctx.cfg["gendata"]
    space = _gendata_space(ctx, section)

    def simulate_run(scalars, signals):
        try:
            xs, us, _ = simulate_closed_loop_nonlinear(
                ctx.bundle.system, ctx.lin, ctx.gain, signals,
                x0_dev=scalars)
        except DivergenceError as exc:
            raise OracleFailure(str(exc)) from exc
        return np.hstack([xs[:-1], us])

    start = time.perf_counter()
    ts, report = generate_coverage_data(
        simulate_run, space, int(section["budget"]), float(section["l_v"]),
        int(section["target_n"]), ctx.box, ctx.bundle.system.n,
        seed=ctx.stage_seed("gendata"), thin=int(section["thin"]))
    ts.val_fraction = float(section["val_fraction"])
    csv_path = ctx.out / "training_data.csv"
    write_training_csv(csv_path, ts, ctx.box.labels)
    prov_path = ctx.out / "training_data.json"
    write_artifact(prov_path, dump_json({
        "selected_runs": [int(v) for v in report.selected_runs],
        "ml2_history": report.ml2_history,
        "database_size": report.database_size,
        "rejected": report.rejected,
        "val_fraction": ts.val_fraction,
        "n_samples": ts.n_samples,
    }))
    manifest.record("gendata", time.perf_counter() - start,
                    {"training_data": csv_path, "provenance": prov_path},
                    notes=[f"samples={ts.n_samples}",
                           f"runs={len(report.selected_runs)}"])
    return ts


def _candidate_dir(ctx, m) -> Path:
    return ctx.out / "candidates" / f"m{m}"


def _selection_matrix(lpv: LpvModel) -> np.ndarray:
    sel = np.zeros((lpv.l, lpv.n + lpv.n_u))
    for i, src in enumerate(lpv.sources):
        sel[i, src] = 1.0
    return sel


def stage_reduce(ctx: RunContext, manifest: Manifest, m_override=None):
    lpv = _load_lpv(ctx)
    section = ctx.cfg["reduce"]
    l = lpv.l
    requested = m_override if m_override is not None else section["m_values"]
    m_values = sorted({min(max(int(m), 0), l) for m in requested})
    notes = [f"l={l}", f"m_values={m_values}"]
    start = time.perf_counter()
    index = {}
    ts = None
    for m in m_values:
        cdir = _candidate_dir(ctx, m)
        if m == 0:
            cand = LpvModel(lpv.base.copy(), lpv.n, lpv.n_u, lpv.n_y, [],
                            _empty_params(), (), None)
        elif m == l:
            cand = lpv
        else:
            if ts is None:
                ts = read_training_csv(ctx.out / "training_data.csv",
                                       ctx.cfg["gendata"]["val_fraction"])
            cand = _train_candidate(ctx, lpv, ts, m, section, cdir, notes)
        lft = lft_realize(cand)
        write_artifact(cdir / "lpv.json", dump_json(cand.to_json()))
        write_artifact(cdir / "lft.json", dump_json(lft.to_json()))
        index[str(m)] = {"dir": f"candidates/m{m}", "delta_dim": lft.delta_dim,
                         "trained": bool(0 < m < l)}
    index_path = ctx.out / "candidates" / "index.json"
    write_artifact(index_path, dump_json(index))
    manifest.record("reduce", time.perf_counter() - start,
                    {"candidates": index_path}, notes=notes)
    return index


def _empty_params():
    return ParameterSet(np.zeros((0, 2)), np.zeros((0, 2)))


def _train_candidate(ctx, lpv, ts, m, section, cdir, notes):
    sel = _selection_matrix(lpv)
    seed = ctx.stage_seed("reduce", m)
    net = init_cfnn(sel, m, n_e=int(section["n_e"]),
                    width=section["width"] and int(section["width"]),
                    seed=seed)
    n_train = int((1.0 - ts.val_fraction) * ts.n_samples)
    minibatch = min(int(section["minibatch"]), max(1, n_train // 2))
    if minibatch != int(section["minibatch"]):
        notes.append(f"m={m}: minibatch reduced to {minibatch}")
    cfg = TrainConfig(
        learning_rate=float(section["learning_rate"]),
        minibatch=minibatch, reg=float(section["reg"]),
        max_epochs=int(section["max_epochs"]),
        patience=int(section["patience"]), seed=seed,
    )
    result = train(net, lpv, ts, cfg)
    notes.append(f"m={m}: best_val={result.best_val:.3e} "
                 f"epoch={result.best_epoch}")
    write_artifact(cdir / "cfnn.json", dump_json(
        result.net.to_json(result.train_history, result.val_history)))
    eta, (w_dec, b_dec) = export_maps(result.net)
    mu_set = mu_parameter_set(result.net, lpv.params, ts)
    return reduced_lpv(lpv, w_dec, b_dec, mu_set)


def _load_candidates(ctx):
    index_path = ctx.out / "candidates" / "index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text())
        out = []
        for m_str in sorted(index, key=int):
            cdir = ctx.out / index[m_str]["dir"]
            lpv = LpvModel.from_json(load_artifact_json(cdir / "lpv.json"))
            lft = LftSystem.from_json(load_artifact_json(cdir / "lft.json"))
            cfnn_path = cdir / "cfnn.json"
            net = Cfnn.from_json(json.loads(cfnn_path.read_text())) \
                if cfnn_path.exists() else None
            out.append((int(m_str), lpv, lft, net))
        return out
    # fall back to the original realized model
    lft = LftSystem.from_json(load_artifact_json(ctx.out / "lft.json"))
    lpv = _load_lpv(ctx)
    return [(lpv.l, lpv, lft, None)]


def _candidate_schedule(original_lpv, cand_lpv, net):
    sources = list(original_lpv.sources or [])
    if cand_lpv.l == 0:
        return lambda w: np.zeros(0)
    if net is None:
        return lambda w: w[sources]
    eta, _ = export_maps(net)
    return lambda w: eta(w[sources])


def stage_bound(ctx: RunContext, manifest: Manifest, m_override=None):
    original = _load_lpv(ctx)
    section = ctx.cfg["bound"]
    candidates = _load_candidates(ctx)
    if m_override is not None:
        wanted = {int(m) for m in m_override}
        candidates = [c for c in candidates if c[0] in wanted]
    space = SearchSpace([], _disturbance_signals(ctx, section),
                        float(section["horizon"]), ctx.tau)

    def simulate_original(scalars, signals):
        try:
            _, _, ys = simulate_closed_loop_nonlinear(
                ctx.bundle.system, ctx.lin, ctx.gain, signals)
        except DivergenceError as exc:
            raise OracleFailure(str(exc)) from exc
        return ys[:-1]

    start = time.perf_counter()
    bounds = {}
    artifacts = {}
    for m, cand_lpv, cand_lft, net in candidates:
        schedule = _candidate_schedule(original, cand_lpv, net)

        def simulate_reduced(scalars, signals, _lpv=cand_lpv, _sch=schedule):
            _, _, ys = simulate_closed_loop_lpv(_lpv, ctx.gain, signals, _sch)
            if not np.all(np.isfinite(ys)):
                raise OracleFailure("reduced closed loop diverged")
            return ys

        result = bound_dynamic_uncertainty(
            simulate_original, simulate_reduced, space,
            budget=int(section["budget"]),
            safety_factor=float(section["safety_factor"]),
            seed=ctx.stage_seed("bound", m))
        bounds[str(m)] = {
            "bound": result.bound,
            "max_ratio": result.max_ratio,
            "safety_factor": result.safety_factor,
            "budget": int(section["budget"]),
            "horizon": float(section["horizon"]),
        }
        log_path = ctx.out / f"bound_m{m}.csv"
        write_eval_log_csv(log_path, result.log)
        artifacts[f"bound_log_m{m}"] = log_path
    bounds_path = ctx.out / "bounds.json"
    write_artifact(bounds_path, dump_json(bounds))
    artifacts["bounds"] = bounds_path
    manifest.record("bound", time.perf_counter() - start, artifacts,
                    notes=[f"m={m}: b={v['bound']:.4g}"
                           for m, v in sorted(bounds.items(), key=lambda kv:
                                              int(kv[0]))])
    return bounds


def stage_analyze(ctx: RunContext, manifest: Manifest, m_override=None):
    section = ctx.cfg["analyze"]
    candidates = _load_candidates(ctx)
    if m_override is not None:
        wanted = {int(m) for m in m_override}
        candidates = [c for c in candidates if c[0] in wanted]
    bounds_path = ctx.out / "bounds.json"
    bounds = json.loads(bounds_path.read_text()) if bounds_path.exists() \
        else {}
    entries = []
    for m, _, lft, _ in candidates:
        closed = lft_close_state_feedback(lft, ctx.gain)
        closed.dynamic_bound = float(bounds.get(str(m), {}).get("bound", 0.0))
        entries.append((f"m{m}", m, closed))
    start = time.perf_counter()
    report = tradeoff_report(entries, ctx.tau, tol=float(section["tol"]),
                             grid=int(section["grid"]),
                             within=float(section["within"]))
    csv_path = ctx.out / "gain_report.csv"
    write_artifact(csv_path, report.to_csv())
    txt_path = ctx.out / "gain_report.txt"
    write_artifact(txt_path, report.to_text())
    svg_path = ctx.out / "gain_report.svg"
    write_artifact(svg_path, report.to_svg())
    manifest.record(
        "analyze", time.perf_counter() - start,
        {"gain_report_csv": csv_path, "gain_report_txt": txt_path,
         "gain_report_svg": svg_path},
        notes=[f"{r.label}: gamma_with={r.gamma_with:.4g} "
               f"gamma_without={r.gamma_without:.4g} "
               f"wall={r.wall_time:.2f}s" for r in report.rows] +
              [f"selected={report.rows[report.selected].label}"])
    return report


def stage_validate(ctx: RunContext, manifest: Manifest):
    """Invariant suite over stored artifacts; returns list of failures."""
    failures = []
    rng = np.random.default_rng(0)

    def check(name, ok):
        if not ok:
            failures.append(name)

    pnlss_path = ctx.out / "pnlss.json"
    pnlss = None
    if pnlss_path.exists():
        raw = json.loads(pnlss_path.read_text())
        pnlss = PnlssModel.from_json(raw)
        check("pnlss-roundtrip", dump_json(pnlss.to_json()) ==
              dump_json(raw))
        zero = evaluate_pnlss(pnlss, np.zeros(pnlss.lin.n),
                              np.zeros(pnlss.lin.n_u))
        check("pnlss-linear-at-zero", np.all(zero == 0.0))
    lpv_path = ctx.out / "lpv.json"
    lpv = None
    if lpv_path.exists():
        raw = json.loads(lpv_path.read_text())
        lpv = LpvModel.from_json(raw)
        check("lpv-roundtrip", dump_json(lpv.to_json()) == dump_json(raw))
        if pnlss is not None:
            pts = rng.uniform(ctx.box.lower, ctx.box.upper, (200, ctx.box.dim))
            err = 0.0
            for z in pts:
                rho = z[list(lpv.sources)] if lpv.sources else np.zeros(0)
                resid = lpv.residual_matrix(rho) @ z
                direct = np.concatenate([
                    pnlss.residual_state(z), pnlss.residual_output(z)])
                err = max(err, float(np.max(np.abs(resid - direct))))
            check("factorization-exact(<1e-12)", err < 1e-12)
    lft_path = ctx.out / "lft.json"
    if lft_path.exists():
        raw = json.loads(lft_path.read_text())
        lft = LftSystem.from_json(raw)
        check("lft-roundtrip", dump_json(lft.to_json()) == dump_json(raw))
        if lpv is not None and lpv.l:
            from .lpvlft import evaluate_lft
            vb = lpv.params.value_bounds
            err = 0.0
            for _ in range(200):
                rho = rng.uniform(vb[:, 0], vb[:, 1])
                err = max(err, float(np.max(np.abs(
                    evaluate_lft(lft, rho) - lpv.combined(rho)))))
            check("lft-evaluation-exact(<1e-10)", err < 1e-10)
    index_path = ctx.out / "candidates" / "index.json"
    if index_path.exists():
        from .lpvlft import evaluate_lft
        index = json.loads(index_path.read_text())
        for m_str in sorted(index, key=int):
            cdir = ctx.out / index[m_str]["dir"]
            clpv = LpvModel.from_json(json.loads(
                (cdir / "lpv.json").read_text()))
            clft = LftSystem.from_json(json.loads(
                (cdir / "lft.json").read_text()))
            err = 0.0
            if clpv.l:
                vb = clpv.params.value_bounds
                for _ in range(100):
                    rho = rng.uniform(vb[:, 0], vb[:, 1])
                    err = max(err, float(np.max(np.abs(
                        evaluate_lft(clft, rho) - clpv.combined(rho)))))
            check(f"candidate-m{m_str}-lft-exact(<1e-10)", err < 1e-10)
    manifest.record("validate", 0.0, {}, notes=failures or ["all passed"])
    return failures


# ------------------------------------------------------------------ main --

def run_stage(stage: str, cfg: dict, out: Path, seed: int, m_override=None):
    ctx = RunContext(cfg, out, seed)
    manifest = Manifest(ctx.out, cfg, seed)
    try:
        if stage == "identify":
            stage_identify(ctx, manifest)
        elif stage == "lpvify":
            stage_lpvify(ctx, manifest)
        elif stage == "lftize":
            stage_lftize(ctx, manifest)
        elif stage == "gendata":
            stage_gendata(ctx, manifest)
        elif stage == "reduce":
            stage_reduce(ctx, manifest, m_override)
        elif stage == "bound":
            stage_bound(ctx, manifest, m_override)
        elif stage == "analyze":
            stage_analyze(ctx, manifest, m_override)
        elif stage == "validate":
            failures = stage_validate(ctx, manifest)
            if failures:
                for f in failures:
                    print(f"validate FAILED: {f}", file=sys.stderr)
                return 1
        else:
            raise ValueError(f"unknown stage {stage!r}")
    finally:
        ctx.close()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nl2lft",
        description="Nonlinear system to uncertain LFT pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ["pipeline", "run"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--m", default=None,
                       help="comma-separated candidate m values")
        if name == "run":
            p.add_argument("--stage", required=True, choices=STAGES)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg["run"]["out"])
    seed = args.seed if args.seed is not None else int(cfg["run"]["seed"])
    m_override = [int(v) for v in args.m.split(",")] if args.m else None

    command = args.command
    stages = [command]
    if command == "pipeline":
        stages = ["identify", "lpvify", "lftize", "gendata", "reduce",
                  "bound", "analyze", "validate"]
    elif command == "run":
        stages = [args.stage]

    for stage in stages:
        try:
            code = run_stage(stage, cfg, out, seed, m_override)
        except DependencyError as exc:
            print(f"dependency error: {exc}", file=sys.stderr)
            return 2
        except (RuntimeError, ValueError) as exc:
            print(f"{stage} failed: {exc}", file=sys.stderr)
            return 1
        if code != 0:
            return code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
