"""Cascade feedforward network for scheduling-parameter reduction.

The first layer is a fixed selection of state/input coordinates (the known
scheduling parameters); tanh encoder layers compress to the reduced parameter;
an affine decoder reconstructs.  Training minimizes the system-matrix error
||(M(rho) - M(rho_hat)) w||^2 with analytic gradients through the polynomial
terms, plus Frobenius regularization on the trainable weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envelope import Hyperrectangle, ParameterSet, halton_sample
from .lpvlft import LpvModel

__all__ = [
    "Cfnn",
    "TrainingSet",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "init_cfnn",
    "forward",
    "loss_batch",
    "gradients",
    "train",
    "export_maps",
    "mu_parameter_set",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Cfnn:
    """Selection layer + tanh encoder + affine decoder.

    `weights`/`biases` hold the trainable layers in order: the encoder layers
    (the last one outputs the reduced parameter mu) followed by the decoder.
    """

    selection: np.ndarray        # (l, n+n_u), unit selector rows
    weights: list
    biases: list
    seed: int = 0

    def __post_init__(self):
        self.selection = np.asarray(self.selection, float)
        if len(self.weights) < 2:
            raise ValueError("need at least one encoder layer and a decoder")
        rows_ok = np.all(np.isin(self.selection, (0.0, 1.0))) and np.all(
            self.selection.sum(axis=1) == 1.0
        )
        if not rows_ok:
            raise ValueError("selection rows must be unit coordinate selectors")
        l = self.selection.shape[0]
        m = self.weights[-2].shape[0]
        if self.weights[-1].shape != (l, m):
            raise ValueError("decoder must map the bottleneck back to l outputs")
        if m > l:
            raise ValueError("bottleneck must not exceed the parameter count")

    @property
    def l(self) -> int:
        return self.selection.shape[0]

    @property
    def m(self) -> int:
        return self.weights[-2].shape[0]

    def clone(self) -> "Cfnn":
        return Cfnn(self.selection.copy(),
                    [w.copy() for w in self.weights],
                    [b.copy() for b in self.biases], self.seed)

    def to_json(self, train_history=None, val_history=None) -> dict:
        layers = [
            {"weights": w.tolist(), "bias": b.tolist(),
             "activation": "tanh" if i < len(self.weights) - 1 else "linear"}
            for i, (w, b) in enumerate(zip(self.weights, self.biases))
        ]
        return {
            "kind": "cfnn",
            "selection": self.selection.tolist(),
            "layers": layers,
            "seed": self.seed,
            "train_history": list(train_history or []),
            "val_history": list(val_history or []),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Cfnn":
        weights = [np.array(l["weights"], float) for l in data["layers"]]
        biases = [np.array(l["bias"], float) for l in data["layers"]]
        return cls(np.array(data["selection"], float), weights, biases,
                   int(data.get("seed", 0)))


def init_cfnn(selection: np.ndarray, m: int, n_e: int = 2,
              width: int | None = None, seed: int = 0) -> Cfnn:
    """Glorot-uniform weights, zero biases.

    n_e = 2 gives a single nonlinear encoding layer straight to the
    bottleneck; deeper encoders insert (n_e - 2) hidden layers of `width`
    (default 4m).
    """
    selection = np.asarray(selection, float)
    l = selection.shape[0]
    if not 1 <= m <= l:
        raise ValueError("need 1 <= m <= l")
    if n_e < 2:
        raise ValueError("need at least one encoding layer (n_e >= 2)")
    width = width or 4 * m
    dims = [l] + [width] * (n_e - 2) + [m]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    limit = np.sqrt(6.0 / (m + l))
    weights.append(rng.uniform(-limit, limit, size=(l, m)))
    biases.append(np.zeros(l))
    return Cfnn(selection, weights, biases, seed)


def forward(net: Cfnn, w_batch: np.ndarray):
    """Forward pass; returns (upsilon, mu, rho_hat, activations).

    `activations` holds the encoder layer outputs (tanh values) needed by the
    backward pass; the network output is the cascade (w, rho_hat).
    """
    w = np.atleast_2d(np.asarray(w_batch, float))
    upsilon = w @ net.selection.T
    c = upsilon
    acts = [c]
    for wgt, bia in zip(net.weights[:-1], net.biases[:-1]):
        c = np.tanh(c @ wgt.T + bia)
        acts.append(c)
    mu = c
    rho_hat = mu @ net.weights[-1].T + net.biases[-1]
    return upsilon, mu, rho_hat, acts


def loss_batch(net: Cfnn, lpv: LpvModel, w_batch: np.ndarray,
               reg: float = 0.0):
    """Per-sample system-error losses and the regularized batch objective."""
    w = np.atleast_2d(np.asarray(w_batch, float))
    upsilon, _, rho_hat, _ = forward(net, w)
    err = lpv.residual_apply(upsilon, w) - lpv.residual_apply(rho_hat, w)
    per_sample = np.sum(err**2, axis=1)
    objective = float(per_sample.mean())
    if reg:
        objective += reg * sum(float(np.sum(wgt**2)) for wgt in net.weights)
    return per_sample, objective


def gradients(net: Cfnn, lpv: LpvModel, w_batch: np.ndarray,
              reg: float = 0.0):
    """Analytic gradients of the batch objective w.r.t. weights and biases."""
    w = np.atleast_2d(np.asarray(w_batch, float))
    n_batch = w.shape[0]
    upsilon, mu, rho_hat, acts = forward(net, w)
    err = lpv.residual_apply(upsilon, w) - lpv.residual_apply(rho_hat, w)
    jac = lpv.residual_sensitivity(rho_hat, w)     # (N, n+n_y, l)
    g_rho = -(2.0 / n_batch) * np.einsum("nol,no->nl", jac, err)

    gw = [np.zeros_like(wgt) for wgt in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    # decoder
    gw[-1] = g_rho.T @ mu
    gb[-1] = g_rho.sum(axis=0)
    gc = g_rho @ net.weights[-1]
    # encoder layers in reverse
    for i in range(len(net.weights) - 2, -1, -1):
        gz = gc * (1.0 - acts[i + 1] ** 2)
        gw[i] = gz.T @ acts[i]
        gb[i] = gz.sum(axis=0)
        gc = gz @ net.weights[i]
    if reg:
        for i, wgt in enumerate(net.weights):
            gw[i] = gw[i] + 2.0 * reg * wgt
    return gw, gb


@dataclass
class TrainingSet:
    """Columns of state/input samples with per-column trajectory provenance."""

    data: np.ndarray             # (n+n_u, N)
    trajectory_ids: np.ndarray   # (N,)
    val_fraction: float = 0.25

    def __post_init__(self):
        self.data = np.asarray(self.data, float)
        self.trajectory_ids = np.asarray(self.trajectory_ids, int)
        if self.data.shape[1] != self.trajectory_ids.size:
            raise ValueError("one trajectory id per column required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def samples(self) -> np.ndarray:
        return self.data.T

    def split(self, seed: int = 0):
        """Whole-trajectory train/validation split, deterministic per seed."""
        ids = np.unique(self.trajectory_ids)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(ids)
        n_val = int(round(self.val_fraction * ids.size))
        if self.val_fraction > 0 and n_val == 0 and ids.size > 1:
            n_val = 1
        val_ids = set(perm[:n_val].tolist())
        mask = np.array([tid in val_ids for tid in self.trajectory_ids])
        return np.where(~mask)[0], np.where(mask)[0]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    minibatch: int = 128
    reg: float = 1e-6
    max_epochs: int = 5000
    patience: int = 50
    seed: int = 0


@dataclass
class TrainResult:
    net: Cfnn
    train_history: list
    val_history: list
    best_epoch: int

    @property
    def best_val(self) -> float:
        return self.val_history[self.best_epoch]


def train(net: Cfnn, lpv: LpvModel, ts: TrainingSet,
          cfg: TrainConfig | None = None) -> TrainResult:
    """Adam training with whole-trajectory validation and early stopping.

    Returns the best-validation snapshot; histories are per-epoch mean losses
    without the regularization term.
    """
    cfg = cfg or TrainConfig()
    samples = ts.samples()
    train_idx, val_idx = ts.split(cfg.seed)
    if val_idx.size == 0:
        val_idx = train_idx
    w_train = samples[train_idx]
    w_val = samples[val_idx]
    if w_train.shape[0] < 2 * cfg.minibatch:
        raise ValueError("need at least two minibatches of training data")

    rng = np.random.default_rng(cfg.seed)
    net = net.clone()
    m_state = [np.zeros_like(w) for w in net.weights] + \
              [np.zeros_like(b) for b in net.biases]
    v_state = [np.zeros_like(a) for a in m_state]
    t_step = 0

    def adam_update(params, grads):
        nonlocal t_step
        t_step += 1
        c1 = 1.0 - cfg.beta1**t_step
        c2 = 1.0 - cfg.beta2**t_step
        for i, (p, g) in enumerate(zip(params, grads)):
            m_state[i] = cfg.beta1 * m_state[i] + (1 - cfg.beta1) * g
            v_state[i] = cfg.beta2 * v_state[i] + (1 - cfg.beta2) * g**2
            p -= cfg.learning_rate * (m_state[i] / c1) / (
                np.sqrt(v_state[i] / c2) + cfg.eps)

    train_hist, val_hist = [], []
    best_val = np.inf
    best_epoch = 0
    best_net = net.clone()
    n_train = w_train.shape[0]
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, cfg.minibatch):
            batch = w_train[order[start:start + cfg.minibatch]]
            gw, gb = gradients(net, lpv, batch, cfg.reg)
            adam_update(net.weights + net.biases, gw + gb)
        t_loss = float(loss_batch(net, lpv, w_train)[0].mean())
        v_loss = float(loss_batch(net, lpv, w_val)[0].mean())
        if not (np.isfinite(t_loss) and np.isfinite(v_loss)):
            raise TrainingDivergedError(epoch)
        train_hist.append(t_loss)
        val_hist.append(v_loss)
        if v_loss < best_val:
            best_val = v_loss
            best_epoch = epoch
            best_net = net.clone()
        if epoch - best_epoch >= cfg.patience:
            break
    return TrainResult(best_net, train_hist, val_hist, best_epoch)


def export_maps(net: Cfnn):
    """(encoder rho -> mu, affine decoder (W, b)) of a trained network."""

    def eta(rho):
        c = np.atleast_2d(np.asarray(rho, float))
        single = np.asarray(rho).ndim == 1
        for wgt, bia in zip(net.weights[:-1], net.biases[:-1]):
            c = np.tanh(c @ wgt.T + bia)
        return c[0] if single else c

    return eta, (net.weights[-1].copy(), net.biases[-1].copy())


def mu_parameter_set(net: Cfnn, gamma: ParameterSet, ts: TrainingSet,
                     inflate: float = 0.05, n_samples: int = 100_000
                     ) -> ParameterSet:
    """Estimate bounds on the reduced parameter.

    Value bounds: Halton samples of the original parameter box pushed through
    the encoder, min/max inflated by `inflate` about the interval center.
    Rate bounds: consecutive-sample increments of the encoded training
    trajectories, inflated likewise and clipped to the value range.
    """
    eta, _ = export_maps(net)
    box = Hyperrectangle(gamma.value_bounds[:, 0], gamma.value_bounds[:, 1])
    rho_samples = halton_sample(box.dim, n_samples, box)
    mu = np.atleast_2d(eta(rho_samples))
    lo, hi = mu.min(axis=0), mu.max(axis=0)
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * (1.0 + inflate)
    half = np.maximum(half, 1e-12)
    value = np.column_stack([center - half, center + half])

    increments = []
    rho_all = ts.samples() @ net.selection.T
    mu_all = np.atleast_2d(eta(rho_all))
    for tid in np.unique(ts.trajectory_ids):
        seg = mu_all[ts.trajectory_ids == tid]
        if seg.shape[0] >= 2:
            increments.append(np.diff(seg, axis=0))
    if increments:
        inc = np.vstack(increments)
        rlo, rhi = inc.min(axis=0), inc.max(axis=0)
        rc, rh = 0.5 * (rlo + rhi), 0.5 * (rhi - rlo) * (1.0 + inflate)
        rate = np.column_stack([rc - rh, rc + rh])
    else:
        rate = np.column_stack([-2 * half, 2 * half])
    width = value[:, 1] - value[:, 0]
    rate = np.clip(rate, -width[:, None], width[:, None])
    return ParameterSet(value, rate)
