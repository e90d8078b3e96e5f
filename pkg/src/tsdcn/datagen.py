"""Synthetic benchmark problems.

Every generator is a pure function of its arguments and seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import TimeSeriesSample, stack_series


@dataclass
class HmmSpec:
    """Generating HMM for each class (index 0-based in the lists).

    transition[c]  : (K, K) rows sum to 1
    initial[c]     : (K,)
    mixture[c]     : (K, M)
    means[c]       : (K, M, D)
    covs[c]        : (K, M, D, D)
    """

    transition: list
    initial: list
    mixture: list
    means: list
    covs: list

    @property
    def C(self) -> int:
        return len(self.transition)

    @property
    def D(self) -> int:
        return self.means[0].shape[-1]


@dataclass
class Dataset:
    samples: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])

    def arrays(self):
        """``(x, labels)`` with ``x`` of shape (N, T, D) and 1-based labels."""
        return stack_series(self.samples), self.labels

    def subset(self, idx) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], dict(self.meta))


def _prob_vector(rng, n: int) -> np.ndarray:
    v = rng.uniform(0.0, 1.0, size=n)
    return v / v.sum()


def sample_hmm_spec(C: int, D: int, seed: int, K: int = 2, M: int = 2,
                    cov_scale: float | None = None) -> HmmSpec:
    """Fully connected K-state, M-component HMM per class.

    Means are uniform in [-1, 1]; covariances are ``cov_scale * B B^T + 0.1 I``
    with ``B`` uniform in [-1, 1] and ``cov_scale`` defaulting to ``1 / D``;
    probability vectors are uniform draws normalized to sum to one.
    """
    if cov_scale is None:
        cov_scale = 1.0 / D
    if C < 2 or D < 1:
        raise ValueError("need C >= 2 and D >= 1")
    rng = np.random.default_rng(seed)
    transition, initial, mixture, means, covs = [], [], [], [], []
    for _ in range(C):
        transition.append(np.stack([_prob_vector(rng, K) for _ in range(K)]))
        initial.append(_prob_vector(rng, K))
        mixture.append(np.stack([_prob_vector(rng, M) for _ in range(K)]))
        means.append(rng.uniform(-1.0, 1.0, size=(K, M, D)))
        B = rng.uniform(-1.0, 1.0, size=(K, M, D, D))
        covs.append(cov_scale * B @ np.swapaxes(B, -1, -2) + 0.1 * np.eye(D))
    return HmmSpec(transition, initial, mixture, means, covs)


def sample_hmm_dataset(spec: HmmSpec, n_per_class: int, T: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    chol = [np.linalg.cholesky(cv) for cv in spec.covs]
    samples = []
    for c in range(spec.C):
        K = spec.transition[c].shape[0]
        M = spec.mixture[c].shape[1]
        for _ in range(n_per_class):
            x = np.empty((spec.D, T))
            k = rng.choice(K, p=spec.initial[c])
            for t in range(T):
                m = rng.choice(M, p=spec.mixture[c][k])
                x[:, t] = spec.means[c][k, m] + chol[c][k, m] @ rng.standard_normal(spec.D)
                k = rng.choice(K, p=spec.transition[c][k])
            samples.append(TimeSeriesSample(x, label=c + 1))
    meta = {"problem": "hmm", "seed": seed, "C": spec.C, "D": spec.D, "T": T,
            "n_per_class": n_per_class}
    return Dataset(samples, meta)


def gen_pca_problem(n_per_class: int, T: int, seed: int) -> Dataset:
    """Two-class sine problem whose largest-variance direction is pure noise.

    ``y(t) = +-0.5 sin(2 pi t / 100) + 0.5 eta(t)`` with ``eta = z (1, -1)``,
    ``z ~ N(0, 1)`` independently per time step.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(1, T + 1)
    wave = 0.5 * np.sin(2 * np.pi * t / 100)
    direction = np.array([1.0, -1.0])
    samples = []
    for label, sign in ((1, 1.0), (2, -1.0)):
        for _ in range(n_per_class):
            eta = direction[:, None] * rng.standard_normal(T)[None, :]
            samples.append(TimeSeriesSample(sign * wave[None, :] + 0.5 * eta, label=label))
    return Dataset(samples, {"problem": "pca", "seed": seed, "T": T, "n_per_class": n_per_class})


def xor_region(y: np.ndarray) -> np.ndarray:
    """Class (1 or 2) of each 2-D point in the XOR triangles, 0 outside."""
    y1, y2 = y[..., 0], y[..., 1]
    c1 = ((y1 > 0) & (y2 > 0) & (y1 + y2 < 1)) | ((y1 < 0) & (y2 < 0) & (y1 + y2 > -1))
    c2 = ((y1 < 0) & (y2 > 0) & (-y1 + y2 < 1)) | ((y1 > 0) & (y2 < 0) & (y1 - y2 < 1))
    return np.where(c1, 1, np.where(c2, 2, 0))


def _xor_points(rng, label: int, n: int) -> np.ndarray:
    # pick one of the class's two triangles per point, then rejection-sample
    # inside that triangle's quadrant of [-1, 1]^2
    signs = np.array({1: ((1, 1), (-1, -1)), 2: ((-1, 1), (1, -1))}[label], dtype=float)
    quadrant = signs[rng.integers(2, size=n)]
    out = np.empty((n, 2))
    todo = np.arange(n)
    while todo.size:
        y = quadrant[todo] * rng.uniform(0.0, 1.0, size=(todo.size, 2))
        ok = xor_region(y) == label
        out[todo[ok]] = y[ok]
        todo = todo[~ok]
    return out


def gen_xor_problem(n_per_class: int, T: int, seed: int) -> Dataset:
    """Two-class XOR triangles; each time step an independent uniform point."""
    rng = np.random.default_rng(seed)
    samples = []
    for label in (1, 2):
        for _ in range(n_per_class):
            samples.append(TimeSeriesSample(_xor_points(rng, label, T).T, label=label))
    return Dataset(samples, {"problem": "xor", "seed": seed, "T": T, "n_per_class": n_per_class})


def mix_noise(dataset: Dataset, a: float, seed: int) -> Dataset:
    """``y(t) = (1 - a) x(t) + a eta(t)`` with i.i.d. standard Gaussian ``eta``."""
    if not 0.0 <= a <= 1.0:
        raise ValueError("noise ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    samples = [TimeSeriesSample((1 - a) * s.series + a * rng.standard_normal(s.series.shape),
                                label=s.label) for s in dataset.samples]
    meta = dict(dataset.meta, noise_ratio=a, noise_seed=seed)
    return Dataset(samples, meta)
