"""Network topology, weight containers and the quadratic feature map.

Class, state and component indices are 1-based at every public boundary
(``W_of``, ``Wp_of``, sample labels, ``classify``).  Internally the weights are
stacked into dense arrays:

* components ``u = (c, k, m)`` in lexicographic order, ``W`` has shape
  ``(U, D + 1, Dp)``;
* layer-4 units ``p = (c, k', k, m)`` in lexicographic order, ``Wp`` has shape
  ``(P, H)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ModelTopology:
    C: int
    K: tuple
    M: tuple
    D: int
    Dp: int

    def __post_init__(self):
        object.__setattr__(self, "K", tuple(int(k) for k in self.K))
        object.__setattr__(self, "M", tuple(tuple(int(m) for m in row) for row in self.M))
        if self.C < 2:
            raise ValueError("need at least two classes")
        if len(self.K) != self.C or len(self.M) != self.C:
            raise ValueError("K and M must have one entry per class")
        if any(k < 1 for k in self.K):
            raise ValueError("every class needs at least one state")
        for c, row in enumerate(self.M):
            if len(row) != self.K[c]:
                raise ValueError(f"M[{c}] must have K[{c}]={self.K[c]} entries")
            if any(m < 1 for m in row):
                raise ValueError("every state needs at least one component")
        if not 1 <= self.Dp <= self.D:
            raise ValueError("reduced dimension must satisfy 1 <= Dp <= D")

    @classmethod
    def uniform(cls, C: int, K: int, M: int, D: int, Dp: int) -> "ModelTopology":
        return cls(C, (K,) * C, ((M,) * K,) * C, D, Dp)

    @property
    def H(self) -> int:
        return 1 + self.Dp * (self.Dp + 1) // 2

    @property
    def n_const(self) -> int:
        return self.Dp * (self.Dp + 1) // 2

    # -- index maps (0-based) ------------------------------------------------

    @cached_property
    def components(self) -> list:
        return [(c, k, m) for c in range(self.C) for k in range(self.K[c])
                for m in range(self.M[c][k])]

    @cached_property
    def states(self) -> list:
        return [(c, k) for c in range(self.C) for k in range(self.K[c])]

    @cached_property
    def pairs(self) -> list:
        """State transitions ``(c, k', k)`` inside each class."""
        return [(c, kp, k) for c in range(self.C) for kp in range(self.K[c])
                for k in range(self.K[c])]

    @cached_property
    def units(self) -> list:
        """Layer-4 units ``(c, k', k, m)``."""
        return [(c, kp, k, m) for c in range(self.C) for kp in range(self.K[c])
                for k in range(self.K[c]) for m in range(self.M[c][k])]

    @property
    def U(self) -> int:
        return len(self.components)

    @property
    def S(self) -> int:
        return len(self.states)

    @property
    def P(self) -> int:
        return len(self.units)

    @cached_property
    def _comp_lookup(self) -> dict:
        return {key: i for i, key in enumerate(self.components)}

    @cached_property
    def _state_lookup(self) -> dict:
        return {key: i for i, key in enumerate(self.states)}

    @cached_property
    def _pair_lookup(self) -> dict:
        return {key: i for i, key in enumerate(self.pairs)}

    @cached_property
    def _unit_lookup(self) -> dict:
        return {key: i for i, key in enumerate(self.units)}

    def comp_index(self, c: int, k: int, m: int) -> int:
        """Flat component index for 1-based ``(c, k, m)``."""
        return self._comp_lookup[(c - 1, k - 1, m - 1)]

    def unit_index(self, c: int, kp: int, k: int, m: int) -> int:
        """Flat layer-4 unit index for 1-based ``(c, k', k, m)``."""
        return self._unit_lookup[(c - 1, kp - 1, k - 1, m - 1)]

    @cached_property
    def unit_comp(self) -> np.ndarray:
        return np.array([self._comp_lookup[(c, k, m)] for c, _, k, m in self.units])

    @cached_property
    def unit_pair(self) -> np.ndarray:
        return np.array([self._pair_lookup[(c, kp, k)] for c, kp, k, _ in self.units])

    @cached_property
    def pair_from(self) -> np.ndarray:
        return np.array([self._state_lookup[(c, kp)] for c, kp, _ in self.pairs])

    @cached_property
    def pair_to(self) -> np.ndarray:
        return np.array([self._state_lookup[(c, k)] for c, _, k in self.pairs])

    @cached_property
    def state_class(self) -> np.ndarray:
        return np.array([c for c, _ in self.states])

    @cached_property
    def comp_class(self) -> np.ndarray:
        return np.array([c for c, _, _ in self.components])

    # 0/1 aggregation matrices used by the vectorized passes
    @cached_property
    def sum_over_m(self) -> np.ndarray:
        A = np.zeros((self.P, len(self.pairs)))
        A[np.arange(self.P), self.unit_pair] = 1.0
        return A

    @cached_property
    def pair_to_state(self) -> np.ndarray:
        A = np.zeros((len(self.pairs), self.S))
        A[np.arange(len(self.pairs)), self.pair_to] = 1.0
        return A

    @cached_property
    def pair_from_state(self) -> np.ndarray:
        A = np.zeros((len(self.pairs), self.S))
        A[np.arange(len(self.pairs)), self.pair_from] = 1.0
        return A

    @cached_property
    def state_to_class(self) -> np.ndarray:
        A = np.zeros((self.S, self.C))
        A[np.arange(self.S), self.state_class] = 1.0
        return A

    @cached_property
    def unit_to_comp(self) -> np.ndarray:
        A = np.zeros((self.P, self.U))
        A[np.arange(self.P), self.unit_comp] = 1.0
        return A

    def to_dict(self) -> dict:
        return {"C": self.C, "K": list(self.K), "M": [list(r) for r in self.M],
                "D": self.D, "Dp": self.Dp}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelTopology":
        return cls(int(d["C"]), d["K"], d["M"], int(d["D"]), int(d["Dp"]))


@dataclass
class NetworkWeights:
    """All trainable coefficients of one network.

    ``W[u]`` is the ``(D+1) x Dp`` matrix whose row 0 holds ``-mu'`` and whose
    rows ``1..D`` hold the projection ``V``; ``Wp[p]`` is the length-``H``
    layer-4 coefficient vector.
    """

    topology: ModelTopology
    W: np.ndarray
    Wp: np.ndarray

    def __post_init__(self):
        top = self.topology
        self.W = np.asarray(self.W, dtype=float)
        self.Wp = np.asarray(self.Wp, dtype=float)
        if self.W.shape != (top.U, top.D + 1, top.Dp):
            raise ValueError(f"W has shape {self.W.shape}, expected {(top.U, top.D + 1, top.Dp)}")
        if self.Wp.shape != (top.P, top.H):
            raise ValueError(f"Wp has shape {self.Wp.shape}, expected {(top.P, top.H)}")

    def W_of(self, c: int, k: int, m: int) -> np.ndarray:
        return self.W[self.topology.comp_index(c, k, m)]

    def Wp_of(self, c: int, kp: int, k: int, m: int) -> np.ndarray:
        return self.Wp[self.topology.unit_index(c, kp, k, m)]

    @property
    def V(self) -> np.ndarray:
        return self.W[:, 1:, :]

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.topology, self.W.copy(), self.Wp.copy())

    def orth_residual(self) -> float:
        """Largest ``|V^T V - I|`` entry over all components."""
        V = self.V
        G = np.einsum("udi,udj->uij", V, V) - np.eye(self.topology.Dp)
        return float(np.abs(G).max())


@dataclass
class TimeSeriesSample:
    """One ``D x T`` series; column ``t`` is ``x(t)``."""

    series: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.series = np.atleast_2d(np.asarray(self.series, dtype=float))
        if self.series.ndim != 2 or self.series.shape[1] < 1:
            raise ValueError("series must be a D x T matrix with T >= 1")
        if not np.all(np.isfinite(self.series)):
            raise ValueError("series contains non-finite entries")
        if self.label is not None:
            self.label = int(self.label)

    @property
    def D(self) -> int:
        return self.series.shape[0]

    @property
    def T(self) -> int:
        return self.series.shape[1]


def quad_pairs(Dp: int) -> tuple:
    """0-based ``(j, j')`` index arrays, ``j <= j'``, in feature order."""
    return np.triu_indices(Dp)


def quadratic_expand(xp) -> np.ndarray:
    """Map ``x'`` (last axis of length Dp) to ``[1, x'_j x'_j' for j <= j']``.

    Works on any leading batch shape.
    """
    xp = np.asarray(xp, dtype=float)
    j, jp = quad_pairs(xp.shape[-1])
    out = np.empty(xp.shape[:-1] + (1 + len(j),))
    out[..., 0] = 1.0
    out[..., 1:] = xp[..., j] * xp[..., jp]
    return out


def stack_series(samples: Sequence[TimeSeriesSample]) -> np.ndarray:
    """Stack samples into an ``(N, T, D)`` array (time-major per sample)."""
    shapes = {s.series.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples must share (D, T); got {sorted(shapes)}")
    return np.stack([s.series.T for s in samples])
