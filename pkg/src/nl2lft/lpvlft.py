"""LPV factorization of PNLSS residuals and exact LFT realization.

The factorization pulls one variable out of every residual monomial (priority
ordered), turning E^T zeta into Delta-A(rho) x + Delta-B(rho) u without
approximation.  The LFT realization groups residual terms by monomial word,
rank-factorizes each word's coefficient matrix, and shares chain channels
through a trie keyed on (input functional, applied letters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envelope import Hyperrectangle, ParameterSet
from .sysid import PnlssModel

__all__ = [
    "PolyTerm",
    "LpvModel",
    "UncertaintyBlock",
    "LftSystem",
    "AlgebraicLoopError",
    "default_priority",
    "factorize",
    "lft_realize",
    "evaluate_lft",
    "reduced_lpv",
    "simulate_lpv",
    "simulate_lft",
    "simulate_closed_loop_lpv",
    "lft_close_state_feedback",
]


class AlgebraicLoopError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"singular (I - Delta*G11) loop matrix at step {step}")
        self.step = step


@dataclass(frozen=True)
class PolyTerm:
    """coef * rho^expo addressed at combined-matrix entry (row, col)."""

    coef: float
    row: int
    col: int
    expo: tuple


@dataclass
class LpvModel:
    """Base LTI matrices plus polynomial residual terms over rho.

    `base` stacks [[A_d, B_d], [C, D]] with rows (state eqs, output eqs) and
    columns (x, u).  `sources` gives, for each scheduling parameter, the
    z-bar coordinate it equals; None for reduced models whose parameters come
    from an encoder.
    """

    base: np.ndarray
    n: int
    n_u: int
    n_y: int
    terms: list
    params: ParameterSet
    param_names: tuple
    sources: tuple | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.base = np.asarray(self.base, float)
        if self.base.shape != (self.n + self.n_y, self.n + self.n_u):
            raise ValueError("base shape does not match declared dimensions")
        if len(self.param_names) != self.params.size:
            raise ValueError("one name per scheduling parameter required")

    @property
    def l(self) -> int:
        return self.params.size

    def term_arrays(self):
        """(coefs, rows, cols, expos, row_scatter) cached for vector math."""
        if "terms" not in self._cache:
            t = self.terms
            coefs = np.array([x.coef for x in t], float)
            rows = np.array([x.row for x in t], int)
            cols = np.array([x.col for x in t], int)
            expos = np.array([x.expo for x in t], int).reshape(len(t), self.l)
            scatter = np.zeros((len(t), self.n + self.n_y))
            scatter[np.arange(len(t)), rows] = 1.0
            self._cache["terms"] = (coefs, rows, cols, expos, scatter)
        return self._cache["terms"]

    def residual_matrix(self, rho) -> np.ndarray:
        """Delta-M(rho): the parameter-dependent part of the combined matrix."""
        rho = np.asarray(rho, float)
        out = np.zeros_like(self.base)
        for t in self.terms:
            out[t.row, t.col] += t.coef * np.prod(rho ** np.array(t.expo))
        return out

    def combined(self, rho) -> np.ndarray:
        return self.base + self.residual_matrix(rho)

    def matrices(self, rho):
        m = self.combined(rho)
        return (m[:self.n, :self.n], m[:self.n, self.n:],
                m[self.n:, :self.n], m[self.n:, self.n:])

    def residual_apply(self, rho_batch: np.ndarray, w_batch: np.ndarray
                       ) -> np.ndarray:
        """Delta-M(rho_i) w_i for a batch; (N, l) x (N, n+n_u) -> (N, n+n_y)."""
        if not self.terms:
            return np.zeros((np.atleast_2d(rho_batch).shape[0],
                             self.n + self.n_y))
        coefs, rows, cols, expos, scatter = self.term_arrays()
        rho = np.atleast_2d(np.asarray(rho_batch, float))
        w = np.atleast_2d(np.asarray(w_batch, float))
        monos = np.prod(rho[:, None, :] ** expos[None, :, :], axis=2)
        contrib = monos * coefs[None, :] * w[:, cols]
        return contrib @ scatter

    def to_json(self) -> dict:
        return {
            "kind": "lpv",
            "dims": {"n": self.n, "n_u": self.n_u, "n_y": self.n_y},
            "base": self.base.tolist(),
            "terms": [
                {"coef": t.coef, "row": t.row, "col": t.col,
                 "expo": list(t.expo)}
                for t in self.terms
            ],
            "params": {
                "names": list(self.param_names),
                "value_bounds": self.params.value_bounds.tolist(),
                "rate_bounds": self.params.rate_bounds.tolist(),
                "sources": list(self.sources) if self.sources is not None
                           else None,
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "LpvModel":
        dims = data["dims"]
        pp = data["params"]
        nparams = len(pp["names"])
        params = ParameterSet(
            np.array(pp["value_bounds"], float).reshape(nparams, 2),
            np.array(pp["rate_bounds"], float).reshape(nparams, 2),
        )
        terms = [
            PolyTerm(float(t["coef"]), int(t["row"]), int(t["col"]),
                     tuple(int(e) for e in t["expo"]))
            for t in data["terms"]
        ]
        sources = pp.get("sources")
        return cls(np.array(data["base"], float), dims["n"], dims["n_u"],
                   dims["n_y"], terms, params, tuple(pp["names"]),
                   tuple(sources) if sources is not None else None)

    def residual_sensitivity(self, rho_batch: np.ndarray, w_batch: np.ndarray
                             ) -> np.ndarray:
        """d[Delta-M(rho) w]/d rho_j, batched: (N, n+n_y, l)."""
        rho = np.atleast_2d(np.asarray(rho_batch, float))
        w = np.atleast_2d(np.asarray(w_batch, float))
        out = np.zeros((rho.shape[0], self.n + self.n_y, self.l))
        if not self.terms:
            return out
        coefs, rows, cols, expos, scatter = self.term_arrays()
        for j in range(self.l):
            e = expos[:, j]
            active = e > 0
            if not np.any(active):
                continue
            dexpo = expos[active].copy()
            dexpo[:, j] -= 1
            monos = np.prod(rho[:, None, :] ** dexpo[None, :, :], axis=2)
            contrib = monos * (coefs[active] * e[active])[None, :] \
                * w[:, cols[active]]
            out[:, :, j] = contrib @ scatter[active]
        return out


def default_priority(basis, box: Hyperrectangle) -> list:
    """Variable order for factorization.

    Sort keys: descending fraction of containing monomials where the variable
    has degree exactly 1, then descending containing count, then ascending
    normalized envelope half-width, then index.
    """
    blocks = list(basis.state_blocks) + list(basis.output_blocks)
    n_z = basis.n_z
    containing = np.zeros(n_z, int)
    deg_one = np.zeros(n_z, int)
    for block in blocks:
        for row in block:
            for v in range(n_z):
                if row[v] >= 1:
                    containing[v] += 1
                    if row[v] == 1:
                        deg_one[v] += 1
    half = 0.5 * box.widths
    half_norm = half / half.max() if half.max() > 0 else half
    fraction = np.where(containing > 0, deg_one / np.maximum(containing, 1), 0.0)
    order = sorted(
        range(n_z),
        key=lambda v: (-fraction[v], -containing[v], half_norm[v], v),
    )
    return order


def factorize(pnlss: PnlssModel, priority=None) -> LpvModel:
    """Exact LPV model from the PNLSS residual via single-variable pull-out.

    Each monomial is divided by its highest-priority contained variable, which
    becomes the column target; the quotient's variables become scheduling
    parameters.
    """
    basis = pnlss.basis
    box = pnlss.box
    n, n_u, n_y = pnlss.lin.n, pnlss.lin.n_u, pnlss.lin.c.shape[0]
    n_z = basis.n_z
    if priority is None:
        priority = default_priority(basis, box)
    rank = {v: i for i, v in enumerate(priority)}

    raw = []  # (row, col, residual exponent vector over z-bar, coef)
    def process(block, coefs, row):
        for j in range(block.shape[0]):
            coef = float(coefs[j])
            if coef == 0.0:
                continue
            expo = block[j]
            present = [v for v in range(n_z) if expo[v] >= 1]
            ind = min(present, key=lambda v: rank[v])
            resid = expo.copy()
            resid[ind] -= 1
            raw.append((row, ind, tuple(int(e) for e in resid), coef))

    for k, (block, coefs) in enumerate(zip(basis.state_blocks, pnlss.e_blocks)):
        process(block, coefs, k)
    for k, (block, coefs) in enumerate(zip(basis.output_blocks, pnlss.f_blocks)):
        process(block, coefs, n + k)

    used = sorted({v for (_, _, resid, _) in raw
                   for v in range(n_z) if resid[v] >= 1})
    pos = {v: i for i, v in enumerate(used)}
    terms = []
    for row, col, resid, coef in raw:
        expo = [0] * len(used)
        for v in range(n_z):
            if resid[v]:
                expo[pos[v]] = resid[v]
        terms.append(PolyTerm(coef, row, col, tuple(expo)))

    base = np.block([[pnlss.lin.a_d, pnlss.lin.b_d],
                     [pnlss.lin.c, pnlss.lin.d]])
    params = ParameterSet.from_box(box, used) if used else ParameterSet(
        np.zeros((0, 2)), np.zeros((0, 2)))
    names = tuple(box.labels[v] for v in used)
    return LpvModel(base, n, n_u, n_y, _merge_terms(terms), params, names,
                    tuple(used))


def _merge_terms(terms):
    merged = {}
    for t in terms:
        key = (t.row, t.col, t.expo)
        merged[key] = merged.get(key, 0.0) + t.coef
    out = [PolyTerm(c, r, col, e) for (r, col, e), c in sorted(merged.items())
           if c != 0.0]
    return out


@dataclass(frozen=True)
class UncertaintyBlock:
    name: str
    repeats: int
    value_bounds: tuple  # (lo, hi)
    rate_bounds: tuple   # (lo, hi)


@dataclass
class LftSystem:
    """Partitioned nominal matrix G with a repeated-scalar block descriptor.

    Rows of g: (x_next, phi, y); columns: (x, theta, u).  `dynamic_bound` is
    the norm bound on the optional full dynamic uncertainty mapping the n_u
    external inputs to the n_y outputs (0 = absent).
    """

    g: np.ndarray
    n: int
    n_u: int
    n_y: int
    blocks: list
    dynamic_bound: float = 0.0

    def __post_init__(self):
        self.g = np.asarray(self.g, float)
        r = self.delta_dim
        if self.g.shape != (self.n + r + self.n_y, self.n + r + self.n_u):
            raise ValueError("G shape inconsistent with block repetitions")

    @property
    def delta_dim(self) -> int:
        return sum(b.repeats for b in self.blocks)

    # partition views
    @property
    def a_ss(self):
        return self.g[:self.n, :self.n]

    @property
    def a_sp(self):
        return self.g[:self.n, self.n:self.n + self.delta_dim]

    @property
    def b_s(self):
        return self.g[:self.n, self.n + self.delta_dim:]

    @property
    def a_ps(self):
        return self.g[self.n:self.n + self.delta_dim, :self.n]

    @property
    def a_pp(self):
        r = self.delta_dim
        return self.g[self.n:self.n + r, self.n:self.n + r]

    @property
    def b_p(self):
        r = self.delta_dim
        return self.g[self.n:self.n + r, self.n + r:]

    @property
    def c_s(self):
        return self.g[self.n + self.delta_dim:, :self.n]

    @property
    def c_p(self):
        r = self.delta_dim
        return self.g[self.n + r:, self.n:self.n + r]

    @property
    def d(self):
        r = self.delta_dim
        return self.g[self.n + r:, self.n + r:]

    def delta_vector(self, rho) -> np.ndarray:
        """Expand per-block parameter values to the repeated channel vector."""
        rho = np.atleast_1d(np.asarray(rho, float))
        if rho.size != len(self.blocks):
            raise ValueError("one value per uncertainty block required")
        return np.repeat(rho, [b.repeats for b in self.blocks])

    def to_json(self) -> dict:
        return {
            "kind": "lft",
            "dims": {"n": self.n, "n_u": self.n_u, "n_y": self.n_y,
                     "delta": self.delta_dim},
            "g": self.g.tolist(),
            "blocks": [
                {"name": b.name, "repeats": b.repeats,
                 "value_bounds": list(b.value_bounds),
                 "rate_bounds": list(b.rate_bounds)}
                for b in self.blocks
            ],
            "dynamic_bound": self.dynamic_bound,
        }

    @classmethod
    def from_json(cls, data: dict) -> "LftSystem":
        dims = data["dims"]
        blocks = [
            UncertaintyBlock(b["name"], int(b["repeats"]),
                             tuple(b["value_bounds"]), tuple(b["rate_bounds"]))
            for b in data["blocks"]
        ]
        return cls(np.array(data["g"], float), dims["n"], dims["n_u"],
                   dims["n_y"], blocks, float(data.get("dynamic_bound", 0.0)))


def lft_realize(lpv: LpvModel) -> LftSystem:
    """Exact LFT realization of a polynomial LPV model.

    Terms are grouped by monomial word; each word's coefficient matrix is
    rank-factorized (SVD) and realized as chains of repeated-scalar channels.
    Chains share trie nodes keyed on (input functional, applied letters), so
    common monomial tails on the same functional reuse channels.
    """
    n, n_u, n_y, l = lpv.n, lpv.n_u, lpv.n_y, lpv.l
    terms = _merge_terms(lpv.terms)
    base = lpv.base.copy()
    words = {}
    for t in terms:
        if all(e == 0 for e in t.expo):
            base[t.row, t.col] += t.coef
            continue
        words.setdefault(t.expo, []).append(t)

    channels = []   # dicts: param, parent ("input", functional) | ("chan", id)
    node_map = {}
    out_contrib = []  # (row, channel id, value)

    for expo in sorted(words):
        mw = np.zeros((n + n_y, n + n_u))
        for t in words[expo]:
            mw[t.row, t.col] += t.coef
        u, s, vt = np.linalg.svd(mw)
        if s.size == 0 or s[0] <= 0.0:
            continue
        kept = int(np.sum(s > 1e-12 * s[0]))
        letters = []
        for i, e in enumerate(expo):
            letters.extend([i] * e)
        for q in range(kept):
            func = vt[q].copy()
            left = u[:, q] * s[q]
            lead = int(np.argmax(np.abs(func) > 1e-14))
            if func[lead] < 0.0:
                func = -func
                left = -left
            parent = ("input", func.tobytes())
            parent_obj = ("input", func)
            applied = ()
            for letter in reversed(letters):
                applied = applied + (letter,)
                key = (func.tobytes(), applied)
                if key in node_map:
                    ch = node_map[key]
                else:
                    ch = len(channels)
                    channels.append({"param": letter, "parent": parent,
                                     "functional": parent_obj})
                    node_map[key] = ch
                parent = ("chan", ch)
                parent_obj = ("chan", ch)
            final = parent[1]
            for row in range(n + n_y):
                if left[row] != 0.0:
                    out_contrib.append((row, final, float(left[row])))

    # order channels grouped by parameter, stable within a group
    order = sorted(range(len(channels)), key=lambda i: (channels[i]["param"], i))
    new_index = {old: new for new, old in enumerate(order)}
    r = len(channels)

    g = np.zeros((n + r + n_y, n + r + n_u))
    g[:n, :n] = base[:n, :n]
    g[:n, n + r:] = base[:n, n:]
    g[n + r:, :n] = base[n:, :n]
    g[n + r:, n + r:] = base[n:, n:]

    for old_id, ch in enumerate(channels):
        q = new_index[old_id]
        kind, payload = ch["functional"]
        if kind == "input":
            g[n + q, :n] = payload[:n]
            g[n + q, n + r:] = payload[n:]
        else:
            g[n + q, n + new_index[payload]] = 1.0
    for row, old_id, value in out_contrib:
        q = new_index[old_id]
        if row < n:
            g[row, n + q] += value
        else:
            g[n + r + row - n, n + q] += value

    blocks = []
    for p in range(l):
        reps = sum(1 for ch in channels if ch["param"] == p)
        if reps:
            blocks.append(UncertaintyBlock(
                lpv.param_names[p], reps,
                tuple(float(v) for v in lpv.params.value_bounds[p]),
                tuple(float(v) for v in lpv.params.rate_bounds[p]),
            ))
    return LftSystem(g, n, n_u, n_y, blocks)


def evaluate_lft(lft: LftSystem, rho) -> np.ndarray:
    """Close the parameter loop: G22 + G21 Delta (I - G11 Delta)^{-1} G12."""
    r = lft.delta_dim
    g22 = np.block([[lft.a_ss, lft.b_s], [lft.c_s, lft.d]])
    if r == 0:
        return g22
    delta = np.diag(lft.delta_vector(rho))
    g11 = lft.a_pp
    g12 = np.hstack([lft.a_ps, lft.b_p])
    g21 = np.vstack([lft.a_sp, lft.c_p])
    loop = np.eye(r) - g11 @ delta
    try:
        inner = np.linalg.solve(loop, g12)
    except np.linalg.LinAlgError as exc:
        raise AlgebraicLoopError(0) from exc
    return g22 + g21 @ delta @ inner


def reduced_lpv(lpv: LpvModel, w_dec: np.ndarray, b_dec: np.ndarray,
                mu_set: ParameterSet, names=None) -> LpvModel:
    """Substitute the affine decoder rho = W mu + b and expand over mu.

    The result is polynomial in mu with the same total degree; constant parts
    fold into the base matrices.
    """
    w_dec = np.atleast_2d(np.asarray(w_dec, float))
    b_dec = np.atleast_1d(np.asarray(b_dec, float))
    l, m = w_dec.shape
    if l != lpv.l or b_dec.size != l:
        raise ValueError("decoder dimensions do not match the parameter count")
    if mu_set.size != m:
        raise ValueError("mu bounds must match the decoder input dimension")

    zero = tuple([0] * m)
    accum = {}
    for t in lpv.terms:
        poly = {zero: t.coef}
        for i, e in enumerate(t.expo):
            for _ in range(e):
                nxt = {}
                for expo, c in poly.items():
                    if b_dec[i] != 0.0:
                        nxt[expo] = nxt.get(expo, 0.0) + c * b_dec[i]
                    for j in range(m):
                        if w_dec[i, j] != 0.0:
                            up = list(expo)
                            up[j] += 1
                            key = tuple(up)
                            nxt[key] = nxt.get(key, 0.0) + c * w_dec[i, j]
                poly = nxt
        for expo, c in poly.items():
            key = (t.row, t.col, expo)
            accum[key] = accum.get(key, 0.0) + c

    base = lpv.base.copy()
    terms = []
    for (row, col, expo), c in sorted(accum.items()):
        if c == 0.0:
            continue
        if all(e == 0 for e in expo):
            base[row, col] += c
        else:
            terms.append(PolyTerm(c, row, col, expo))
    names = tuple(names) if names else tuple(f"mu{j}" for j in range(m))
    return LpvModel(base, lpv.n, lpv.n_u, lpv.n_y, terms, mu_set, names, None)


def simulate_lpv(lpv: LpvModel, rho_traj: np.ndarray, u_traj: np.ndarray,
                 x0=None):
    """Direct LPV recursion on an explicit parameter trajectory."""
    rho_traj = np.atleast_2d(np.asarray(rho_traj, float))
    u_traj = np.atleast_2d(np.asarray(u_traj, float))
    steps = u_traj.shape[0]
    x = np.zeros(lpv.n) if x0 is None else np.asarray(x0, float).copy()
    states = np.empty((steps + 1, lpv.n))
    outputs = np.empty((steps, lpv.n_y))
    states[0] = x
    for k in range(steps):
        m = lpv.combined(rho_traj[k])
        zk = np.concatenate([x, u_traj[k]])
        xy = m @ zk
        x = xy[:lpv.n]
        outputs[k] = xy[lpv.n:]
        states[k + 1] = x
    return states, outputs


def simulate_lft(lft: LftSystem, rho_traj: np.ndarray, u_traj: np.ndarray,
                 x0=None):
    """Step the LFT closing theta = Delta phi exactly at every sample."""
    rho_traj = np.atleast_2d(np.asarray(rho_traj, float))
    u_traj = np.atleast_2d(np.asarray(u_traj, float))
    steps = u_traj.shape[0]
    r = lft.delta_dim
    x = np.zeros(lft.n) if x0 is None else np.asarray(x0, float).copy()
    states = np.empty((steps + 1, lft.n))
    outputs = np.empty((steps, lft.n_y))
    states[0] = x
    for k in range(steps):
        u = u_traj[k]
        if r:
            dvec = lft.delta_vector(rho_traj[k])
            rhs = dvec * (lft.a_ps @ x + lft.b_p @ u)
            loop = np.eye(r) - dvec[:, None] * lft.a_pp
            try:
                theta = np.linalg.solve(loop, rhs)
            except np.linalg.LinAlgError as exc:
                raise AlgebraicLoopError(k) from exc
            if not np.all(np.isfinite(theta)):
                raise AlgebraicLoopError(k)
        else:
            theta = np.zeros(0)
        outputs[k] = lft.c_s @ x + lft.c_p @ theta + lft.d @ u
        x = lft.a_ss @ x + lft.a_sp @ theta + lft.b_s @ u
        states[k + 1] = x
    return states, outputs


def simulate_closed_loop_lpv(lpv: LpvModel, gain: np.ndarray,
                             disturbance: np.ndarray, schedule,
                             x0=None):
    """Self-scheduled closed loop u = -K x + d with rho(k) = schedule(w(k)).

    Returns deviation trajectories (states (K+1, n), inputs (K, n_u),
    outputs (K, n_y)).
    """
    dist = np.atleast_2d(np.asarray(disturbance, float))
    steps = dist.shape[0]
    gain = np.atleast_2d(np.asarray(gain, float))
    x = np.zeros(lpv.n) if x0 is None else np.asarray(x0, float).copy()
    states = np.empty((steps + 1, lpv.n))
    inputs = np.empty((steps, lpv.n_u))
    outputs = np.empty((steps, lpv.n_y))
    states[0] = x
    for k in range(steps):
        u = -gain @ x + dist[k]
        w = np.concatenate([x, u])
        rho = np.atleast_1d(np.asarray(schedule(w), float))
        m = lpv.combined(rho)
        xy = m @ w
        outputs[k] = xy[lpv.n:]
        x = xy[:lpv.n]
        inputs[k] = u
        states[k + 1] = x
    return states, inputs, outputs


def lft_close_state_feedback(lft: LftSystem, gain: np.ndarray) -> LftSystem:
    """Substitute u = -K x + d, keeping the uncertainty channels intact."""
    gain = np.atleast_2d(np.asarray(gain, float))
    g = lft.g.copy()
    r = lft.delta_dim
    ucols = slice(lft.n + r, lft.n + r + lft.n_u)
    g[:, :lft.n] = g[:, :lft.n] - g[:, ucols] @ gain
    return LftSystem(g, lft.n, lft.n_u, lft.n_y, list(lft.blocks),
                     lft.dynamic_bound)
