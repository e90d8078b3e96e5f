"""Seven-layer recurrent forward pass.

Layer-4 pre-activations are shifted by their maximum over all units at each
time step before exponentiation.  The shift is common to every unit, so it
cancels in the layer-6 normalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .model import NetworkWeights, TimeSeriesSample, quadratic_expand


@dataclass
class ForwardTrace:
    """Per-step layer-6 and layer-7 outputs of one series.

    ``o6`` has shape ``(T, S)`` with states in ``topology.states`` order and
    ``o7`` has shape ``(T, C)``.
    """

    o6: np.ndarray
    o7: np.ndarray

    @property
    def final_posterior(self) -> np.ndarray:
        return self.o7[-1]


def layer4_inputs(weights: NetworkWeights, x: np.ndarray) -> np.ndarray:
    """Layers 1-4 (pre-exponential) for inputs with trailing axis D.

    ``x`` may carry any leading batch shape; the result has that shape
    followed by ``P``.
    """
    top = weights.topology
    x = np.asarray(x, dtype=float)
    X = np.concatenate([np.ones(x.shape[:-1] + (1,)), x], axis=-1)
    xp = np.einsum("...d,udj->...uj", X, weights.W)
    Xq = quadratic_expand(xp)
    return np.einsum("...ph,ph->...p", Xq[..., top.unit_comp, :], weights.Wp)


def forward_step(weights: NetworkWeights, prev_o6, x):
    """Advance the recurrence by one time step.

    Returns ``(o6, o7)``: normalized state outputs (length S) and class
    posteriors (length C).
    """
    top = weights.topology
    prev_o6 = np.asarray(prev_o6, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        a4 = layer4_inputs(weights, x)
        e4 = np.exp(a4 - a4.max())
    i5 = e4 @ top.sum_over_m
    o5 = prev_o6[top.pair_from] * i5
    i6 = o5 @ top.pair_to_state
    total = i6.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise NumericalError("layer-6 normalizer is zero or non-finite")
    o6 = i6 / total
    return o6, o6 @ top.state_to_class


def forward_posterior(weights: NetworkWeights, sample: TimeSeriesSample) -> ForwardTrace:
    top = weights.topology
    if sample.D != top.D:
        raise ValueError(f"sample dimension {sample.D} does not match topology D={top.D}")
    o6 = np.ones(top.S)
    o6_trace = np.empty((sample.T, top.S))
    o7_trace = np.empty((sample.T, top.C))
    for t in range(sample.T):
        try:
            o6, o7 = forward_step(weights, o6, sample.series[:, t])
        except NumericalError as exc:
            raise NumericalError(str(exc), t=t + 1) from None
        o6_trace[t] = o6
        o7_trace[t] = o7
    return ForwardTrace(o6_trace, o7_trace)


def classify(weights: NetworkWeights, sample: TimeSeriesSample) -> int:
    """1-based index of the most probable class; ties go to the lowest index."""
    return int(np.argmax(forward_posterior(weights, sample).final_posterior)) + 1


@dataclass
class BatchForward:
    """Intermediates of a vectorized forward pass, kept for backpropagation."""

    X: np.ndarray       # (N, T, D+1) augmented inputs
    xp: np.ndarray      # (N, T, U, Dp) layer-2 outputs
    Xq: np.ndarray      # (N, T, U, H) layer-3 outputs
    e4: np.ndarray      # (N, T, P) shifted layer-4 outputs
    i5: np.ndarray      # (N, T, Q) layer-5 inputs
    o6: np.ndarray      # (N, T, S)
    z6: np.ndarray      # (N, T) layer-6 normalizers
    o7: np.ndarray      # (N, T, C)


def batch_forward(weights: NetworkWeights, x: np.ndarray) -> BatchForward:
    """Forward pass for a stack of equal-length series ``x`` of shape (N, T, D)."""
    top = weights.topology
    x = np.asarray(x, dtype=float)
    N, T, _ = x.shape
    X = np.concatenate([np.ones((N, T, 1)), x], axis=-1)
    xp = np.einsum("ntd,udj->ntuj", X, weights.W)
    Xq = quadratic_expand(xp)
    # non-finite values are caught by the normalizer check below
    with np.errstate(over="ignore", invalid="ignore"):
        a4 = np.einsum("ntph,ph->ntp", Xq[:, :, top.unit_comp, :], weights.Wp)
        e4 = np.exp(a4 - a4.max(axis=2, keepdims=True))
    i5 = e4 @ top.sum_over_m
    o6 = np.empty((N, T, top.S))
    z6 = np.empty((N, T))
    prev = np.ones((N, top.S))
    for t in range(T):
        i6 = (prev[:, top.pair_from] * i5[:, t]) @ top.pair_to_state
        z = i6.sum(axis=1)
        if not np.all(np.isfinite(z)) or np.any(z <= 0.0):
            raise NumericalError("layer-6 normalizer is zero or non-finite", t=t + 1)
        prev = i6 / z[:, None]
        o6[:, t] = prev
        z6[:, t] = z
    return BatchForward(X, xp, Xq, e4, i5, o6, z6, o6 @ top.state_to_class)


def batch_posterior(weights: NetworkWeights, x: np.ndarray) -> np.ndarray:
    """Final-step class posteriors, shape (N, C)."""
    return batch_forward(weights, x).o7[:, -1]


def predict(weights: NetworkWeights, x: np.ndarray) -> np.ndarray:
    """1-based predicted labels for a stack of series."""
    return np.argmax(batch_posterior(weights, x), axis=1) + 1
