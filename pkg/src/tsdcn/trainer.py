"""Constrained gradient training of network weights.

The loss is the negative log-likelihood of the true-class posterior at the
last time step.  Layer-4 coefficients ``Wp`` are updated by plain gradient
descent.  Each projection block ``W[u]`` moves along the direction ``d``
obtained from the KKT system

    [[I, Jh^T], [Jh, 0]] [d; lam] = [-grad J; -h],

where ``h`` collects the orthonormality residuals of ``V`` and ``Jh`` their
Jacobian.  A polar-factor restoration removes the second-order constraint
drift left by the linearized step, and a halving line search on the learning
rate keeps the loss non-increasing.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateMatrix, NumericalError, RankDeficient, StepFailure
from .forward import batch_forward
from .model import ModelTopology, NetworkWeights, TimeSeriesSample

log = logging.getLogger(__name__)

POSTERIOR_FLOOR = 1e-300
MAX_HALVINGS = 30
ATTRACTOR_CAP = 1e3


@dataclass
class TrainingConfig:
    learning_rate: float = 0.01
    max_iter: int = 500
    loss_tol: float = 1e-6
    orth_tol: float = 1e-8
    backtrack: bool = True
    terminal_attractor: bool = False
    seed: int = 0
    # keep V fixed (only mu' and Wp train); used by the reduced-input baselines
    freeze_projection: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_tol <= 0 or self.orth_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    iteration: int
    J: float
    h_inf: float
    gamma: float
    backtracks: int


@dataclass
class TrainState:
    iteration: int = 0
    J: Optional[float] = None


def teacher_vector(label: int, C: int) -> np.ndarray:
    """One-hot teacher vector for a 1-based label."""
    if not 1 <= label <= C:
        raise ValueError(f"label {label} outside 1..{C}")
    Q = np.zeros(C)
    Q[label - 1] = 1.0
    return Q


# -- dataset plumbing ---------------------------------------------------------

def _as_batches(dataset) -> list:
    """Group a dataset into ``(x, y)`` stacks of equal length.

    Accepts an object with ``.samples``, a sequence of labelled
    ``TimeSeriesSample`` or a sequence of ``(sample, teacher_vector)`` pairs.
    ``y`` holds 0-based class indices.
    """
    if hasattr(dataset, "samples"):
        dataset = dataset.samples
    groups: dict = {}
    for item in dataset:
        if isinstance(item, TimeSeriesSample):
            sample, label = item, item.label
        else:
            sample, Q = item
            label = int(np.argmax(Q)) + 1
        if label is None:
            raise ValueError("training samples need labels")
        groups.setdefault(sample.series.shape, []).append((sample.series.T, label - 1))
    return [(np.stack([s for s, _ in g]), np.array([y for _, y in g]))
            for _, g in sorted(groups.items())]


def _nll(weights: NetworkWeights, batches) -> float:
    J = 0.0
    for x, y in batches:
        o7 = batch_forward(weights, x).o7[:, -1]
        J -= np.sum(np.log(np.maximum(o7[np.arange(len(y)), y], POSTERIOR_FLOOR)))
    return float(J)


def negative_log_likelihood(weights: NetworkWeights, dataset) -> float:
    return _nll(weights, _as_batches(dataset))


def _grad_batch(weights: NetworkWeights, x: np.ndarray, y: np.ndarray):
    top = weights.topology
    fw = batch_forward(weights, x)
    N, T = fw.z6.shape
    rows = np.arange(N)

    # dJ/dO6 at the final step
    p_true = np.maximum(fw.o7[rows, -1, y], POSTERIOR_FLOOR)
    g_a = -(top.state_class[None, :] == y[:, None]).astype(float) / p_true[:, None]

    g_i5 = np.empty_like(fw.i5)
    for t in range(T - 1, -1, -1):
        a = fw.o6[:, t]
        g_i6 = (g_a - np.sum(g_a * a, axis=1, keepdims=True)) / fw.z6[:, t, None]
        g_o5 = g_i6[:, top.pair_to]
        prev = fw.o6[:, t - 1] if t > 0 else np.ones_like(a)
        g_i5[:, t] = g_o5 * prev[:, top.pair_from]
        if t > 0:
            g_a = (g_o5 * fw.i5[:, t]) @ top.pair_from_state

    g_a4 = (g_i5 @ top.sum_over_m.T) * fw.e4               # (N, T, P)
    Xq_units = fw.Xq[:, :, top.unit_comp, :]               # (N, T, P, H)
    g_Wp = np.einsum("ntp,ntph->ph", g_a4, Xq_units)

    g_Xq = np.einsum("ntp,ph,pu->ntuh", g_a4, weights.Wp, top.unit_to_comp)
    Dp = top.Dp
    iu, ju = np.triu_indices(Dp)
    G = np.zeros(g_Xq.shape[:3] + (Dp, Dp))
    G[..., iu, ju] = g_Xq[..., 1:]
    G = G + np.swapaxes(G, -1, -2)
    g_xp = np.einsum("ntuij,ntuj->ntui", G, fw.xp)
    g_W = np.einsum("ntd,ntuj->udj", fw.X, g_xp)
    return g_W, g_Wp


def _grad(weights: NetworkWeights, batches):
    g_W = np.zeros_like(weights.W)
    g_Wp = np.zeros_like(weights.Wp)
    for x, y in batches:
        gw, gwp = _grad_batch(weights, x, y)
        g_W += gw
        g_Wp += gwp
    if not (np.all(np.isfinite(g_W)) and np.all(np.isfinite(g_Wp))):
        raise NumericalError("non-finite gradient")
    return g_W, g_Wp


def grad_weights(weights: NetworkWeights, dataset):
    """Exact gradients of the loss with respect to ``W`` and ``Wp``.

    Backpropagates through time across the layer-6 feedback, including the
    per-step normalization.
    """
    return _grad(weights, _as_batches(dataset))


# -- orthonormality constraints -----------------------------------------------

def constraint_pairs(Dp: int) -> tuple:
    """0-based ``(j, l)`` for constraint ``i = (l-1)l/2 + j`` (1-based), j <= l."""
    j = [jj for l in range(Dp) for jj in range(l + 1)]
    l = [l for l in range(Dp) for _ in range(l + 1)]
    return np.array(j, dtype=int), np.array(l, dtype=int)


def constraint_values(W_single: np.ndarray) -> np.ndarray:
    """``h_i = v_j . v_l - delta_jl`` for every constraint, works batched."""
    W_single = np.asarray(W_single, dtype=float)
    V = W_single[..., 1:, :]
    j, l = constraint_pairs(V.shape[-1])
    G = np.einsum("...dj,...dl->...jl", V, V)
    return G[..., j, l] - (j == l)


def constraint_jacobian(W_single: np.ndarray) -> np.ndarray:
    """Jacobian of ``constraint_values`` w.r.t. the row-major flattened ``W``.

    Shape ``(..., N_const, (D+1)*Dp)``; the ``mu'`` row block is zero.
    """
    W_single = np.asarray(W_single, dtype=float)
    lead = W_single.shape[:-2]
    D1, Dp = W_single.shape[-2:]
    V = W_single[..., 1:, :]
    j, l = constraint_pairs(Dp)
    jac = np.zeros(lead + (len(j), D1, Dp))
    for i, (jj, ll) in enumerate(zip(j, l)):
        jac[..., i, 1:, jj] += V[..., ll]
        jac[..., i, 1:, ll] += V[..., jj]
    return jac.reshape(lead + (len(j), D1 * Dp))


def solve_kkt(grad_J: np.ndarray, jac: np.ndarray, h: np.ndarray, rcond: float = 1e-12):
    """Solve the equality-constrained step system by Schur-complement elimination.

    With ``d = -g - Jh^T lam`` and ``Jh d = -h`` the multipliers satisfy
    ``(Jh Jh^T) lam = h - Jh g``.  Leading axes are treated as a batch.
    Returns ``(d, lam)``.
    """
    grad_J = np.asarray(grad_J, dtype=float)
    jac = np.asarray(jac, dtype=float)
    h = np.asarray(h, dtype=float)
    S = jac @ np.swapaxes(jac, -1, -2)
    sv = np.linalg.svd(S, compute_uv=False)
    if np.any(sv[..., -1] <= rcond * np.maximum(sv[..., 0], np.finfo(float).tiny)):
        raise RankDeficient("constraint Jacobian is rank deficient; re-orthonormalize V")
    rhs = h - np.einsum("...ij,...j->...i", jac, grad_J)
    lam = np.linalg.solve(S, rhs[..., None])[..., 0]
    d = -grad_J - np.einsum("...ij,...i->...j", jac, lam)
    return d, lam


def restore_orthogonality(W_single: np.ndarray, orth_tol: Optional[float] = None) -> np.ndarray:
    """Replace ``V`` by its polar factor ``V (V^T V)^{-1/2}``; ``mu'`` row untouched.

    Works batched over leading axes.  Raises ``DegenerateMatrix`` when ``V``
    is rank deficient, or when the result misses ``orth_tol``.
    """
    W_new = np.array(W_single, dtype=float, copy=True)
    V = W_new[..., 1:, :]
    G = np.swapaxes(V, -1, -2) @ V
    w, Q = np.linalg.eigh(G)
    if np.any(w[..., 0] <= 1e-12 * np.maximum(w[..., -1], np.finfo(float).tiny)):
        raise DegenerateMatrix("projection matrix is rank deficient")
    inv_sqrt = (Q / np.sqrt(w)[..., None, :]) @ np.swapaxes(Q, -1, -2)
    W_new[..., 1:, :] = V @ inv_sqrt
    if orth_tol is not None:
        resid = np.abs(constraint_values(W_new)).max()
        if resid > orth_tol:
            raise DegenerateMatrix(f"restoration left residual {resid:.3g} > {orth_tol:.3g}")
    return W_new


# -- training -----------------------------------------------------------------

def init_weights(topology: ModelTopology, seed: int) -> NetworkWeights:
    """Feasible random starting point.

    Each ``V`` is the orthonormal factor of a Gaussian matrix, ``mu'`` is zero
    and ``Wp`` encodes unit covariances with uniform transitions and mixtures,
    plus N(0, 0.01^2) jitter on the bias entry.
    """
    rng = np.random.default_rng(seed)
    D, Dp = topology.D, topology.Dp
    W = np.zeros((topology.U, D + 1, Dp))
    for u in range(topology.U):
        q, r = np.linalg.qr(rng.standard_normal((D, Dp)))
        W[u, 1:] = q * np.sign(np.diag(r))
    W = restore_orthogonality(W)

    iu, ju = np.triu_indices(Dp)
    quad = np.where(iu == ju, -0.5, 0.0)
    Wp = np.empty((topology.P, topology.H))
    for p, (c, kp, k, m) in enumerate(topology.units):
        Wp[p, 0] = (-np.log(topology.K[c]) - np.log(topology.M[c][k])
                    - 0.5 * Dp * np.log(2 * np.pi))
        Wp[p, 1:] = quad
    Wp[:, 0] += 0.01 * rng.standard_normal(topology.P)
    return NetworkWeights(topology, W, Wp)


def _effective_rate(config: TrainingConfig, J: float) -> float:
    if config.terminal_attractor:
        return config.learning_rate * min(np.sqrt(max(J, 0.0)), ATTRACTOR_CAP)
    return config.learning_rate


def _step_direction(weights: NetworkWeights, g_W: np.ndarray, freeze: bool) -> np.ndarray:
    if freeze:
        d = np.zeros_like(g_W)
        d[:, 0, :] = -g_W[:, 0, :]
        return d
    top = weights.topology
    flat = g_W.reshape(top.U, -1)
    d, _ = solve_kkt(flat, constraint_jacobian(weights.W), constraint_values(weights.W))
    return d.reshape(g_W.shape)


def _update(weights, batches, config, state):
    if state.J is None:
        state.J = _nll(weights, batches)
    J0 = state.J
    g_W, g_Wp = _grad(weights, batches)
    d = _step_direction(weights, g_W, config.freeze_projection)
    rate = _effective_rate(config, J0)
    slack = 1e-12 * (1.0 + abs(J0))
    halvings = MAX_HALVINGS if config.backtrack else 0
    for b in range(halvings + 1):
        W_new = weights.W + rate * d
        if not config.freeze_projection:
            try:
                W_new = restore_orthogonality(W_new)
            except DegenerateMatrix:
                rate *= 0.5
                continue
        trial = NetworkWeights(weights.topology, W_new, weights.Wp - rate * g_Wp)
        try:
            J1 = _nll(trial, batches)
        except NumericalError:
            J1 = np.inf
        if np.isfinite(J1) and (J1 <= J0 + slack or not config.backtrack):
            state.iteration += 1
            state.J = J1
            rec = TrainRecord(state.iteration, J1, trial.orth_residual(), rate, b)
            return trial, rec
        rate *= 0.5
    raise StepFailure(f"no decrease after {halvings} halvings", iteration=state.iteration + 1)


def update_step(weights: NetworkWeights, dataset, config: TrainingConfig,
                state: Optional[TrainState] = None):
    """One constrained descent step.  Returns ``(new_weights, TrainRecord)``."""
    return _update(weights, _as_batches(dataset), config, state or TrainState())


def train(weights0: NetworkWeights, dataset, config: TrainingConfig, callback=None):
    """Iterate ``update_step`` until ``|dJ| < loss_tol`` or ``max_iter``.

    Returns ``(weights, records)``.
    """
    if not config.freeze_projection and weights0.orth_residual() > config.orth_tol:
        raise ValueError("initial weights violate the orthonormality constraints")
    batches = _as_batches(dataset)
    state = TrainState()
    weights = weights0
    records = []
    for _ in range(config.max_iter):
        J_prev = state.J if state.J is not None else _nll(weights, batches)
        state.J = J_prev
        weights, rec = _update(weights, batches, config, state)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if abs(J_prev - rec.J) < config.loss_tol:
            break
    log.debug("trained %d iterations, J=%.6g", len(records), records[-1].J if records else float("nan"))
    return weights, records


def write_train_log(records: Sequence[TrainRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "J", "h_inf", "gamma", "backtracks"])
        for r in records:
            w.writerow([r.iteration, repr(r.J), repr(r.h_inf), repr(r.gamma), r.backtracks])
