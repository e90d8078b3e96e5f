"""Explicit TSDCA parameters, their log-linear encoding, and a direct
(non-network) posterior used as a cross-check of the forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParams, NumericalError
from .model import ModelTopology, NetworkWeights, TimeSeriesSample, quad_pairs

PROB_FLOOR = 1e-12


@dataclass
class TsdcaParams:
    """Per-class HMM/GMM parameters in nested-list form (0-based storage).

    gamma[c]        : (K_c, K_c) transition weights, row k' -> column k
    r[c][k]         : (M_ck,) mixture proportions
    mu[c][k][m]     : (D,) component mean
    V[c][k][m]      : (D, Dp) orthonormal projection
    cov[c][k][m]    : (Dp, Dp) reduced-space covariance
    """

    gamma: list
    r: list
    mu: list
    V: list
    cov: list

    @property
    def topology(self) -> ModelTopology:
        C = len(self.gamma)
        K = [g.shape[0] for g in self.gamma]
        M = [[len(rk) for rk in self.r[c]] for c in range(C)]
        D, Dp = self.V[0][0][0].shape
        return ModelTopology(C, K, M, D, Dp)

    def iter_components(self):
        for c in range(len(self.gamma)):
            for k in range(len(self.r[c])):
                for m in range(len(self.r[c][k])):
                    yield c, k, m


def encode_tsdca_params(params: TsdcaParams) -> NetworkWeights:
    """Log-linearize explicit parameters into network weights.

    Probabilities are floored at ``PROB_FLOOR`` before taking logs.
    """
    top = params.topology
    Dp = top.Dp
    iu, ju = quad_pairs(Dp)
    quad_scale = -0.5 * np.where(iu == ju, 1.0, 2.0)

    W = np.empty((top.U, top.D + 1, Dp))
    comp_const = np.empty(top.U)
    comp_quad = np.empty((top.U, top.H - 1))
    for u, (c, k, m) in enumerate(top.components):
        V = np.asarray(params.V[c][k][m], dtype=float)
        cov = np.asarray(params.cov[c][k][m], dtype=float)
        cov = 0.5 * (cov + cov.T)
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0.0:
            raise InvalidParams(f"covariance of component {(c + 1, k + 1, m + 1)} is not positive definite")
        prec = np.linalg.inv(cov)
        W[u, 0] = -(V.T @ np.asarray(params.mu[c][k][m], dtype=float))
        W[u, 1:] = V
        r = params.r[c][k][m]
        if r < 0:
            raise InvalidParams("negative mixture proportion")
        comp_const[u] = (np.log(max(r, PROB_FLOOR)) - 0.5 * Dp * np.log(2 * np.pi)
                         - 0.5 * np.sum(np.log(eig)))
        comp_quad[u] = quad_scale * prec[iu, ju]

    Wp = np.empty((top.P, top.H))
    for p, (c, kp, k, m) in enumerate(top.units):
        g = params.gamma[c][kp, k]
        if g < 0:
            raise InvalidParams("negative transition weight")
        u = top.unit_comp[p]
        Wp[p, 0] = np.log(max(g, PROB_FLOOR)) + comp_const[u]
        Wp[p, 1:] = comp_quad[u]
    return NetworkWeights(top, W, Wp)


def component_log_density(x: np.ndarray, mu, V, cov) -> np.ndarray:
    """Log of the reduced-space Gaussian density for rows of ``x``."""
    xr = (np.atleast_2d(x) - mu) @ V
    Dp = V.shape[1]
    _, logdet = np.linalg.slogdet(cov)
    maha = np.einsum("ti,ij,tj->t", xr, np.linalg.inv(cov), xr)
    return -0.5 * Dp * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * maha


def default_prior(params: TsdcaParams) -> list:
    """Initial-state weights implied by a network started at O6(0) = 1."""
    return [g.sum(axis=0) for g in params.gamma]


def tsdca_direct_posterior(params: TsdcaParams, sample: TimeSeriesSample, pi=None) -> np.ndarray:
    """Class posteriors from the unnormalized forward recursion, in log space.

    ``pi[c]`` holds the initial-state weights of class ``c``; only their
    ratios matter.  Defaults to ``default_prior(params)``.
    """
    if pi is None:
        pi = default_prior(params)
    C = len(params.gamma)
    x = sample.series.T
    log_alpha_T = []
    for c in range(C):
        Kc = params.gamma[c].shape[0]
        log_b = np.empty((Kc, x.shape[0]))
        for k in range(Kc):
            terms = [np.log(params.r[c][k][m]) + component_log_density(
                x, params.mu[c][k][m], params.V[c][k][m], params.cov[c][k][m])
                for m in range(len(params.r[c][k]))]
            log_b[k] = logsumexp(np.array(terms), axis=0)
        with np.errstate(divide="ignore"):
            log_gamma = np.log(params.gamma[c])
            log_a = np.log(np.asarray(pi[c], dtype=float)) + log_b[:, 0]
        for t in range(1, x.shape[0]):
            log_a = logsumexp(log_a[:, None] + log_gamma, axis=0) + log_b[:, t]
        log_alpha_T.append(log_a)
    flat = np.concatenate(log_alpha_T)
    total = logsumexp(flat)
    if not np.isfinite(total):
        raise NumericalError("forward variables underflowed to zero")
    return np.array([np.exp(logsumexp(la) - total) for la in log_alpha_T])


def random_tsdca_params(topology: ModelTopology, rng: np.random.Generator,
                        mean_scale: float = 1.0) -> TsdcaParams:
    """Random valid parameters for the given topology (used by tests and demos)."""
    D, Dp = topology.D, topology.Dp
    gamma, r, mu, V, cov = [], [], [], [], []
    for c in range(topology.C):
        Kc = topology.K[c]
        g = rng.uniform(0.05, 1.0, size=(Kc, Kc))
        gamma.append(g / g.sum(axis=1, keepdims=True))
        r_c, mu_c, V_c, cov_c = [], [], [], []
        for k in range(Kc):
            Mk = topology.M[c][k]
            rk = rng.uniform(0.1, 1.0, size=Mk)
            r_c.append(rk / rk.sum())
            mu_c.append([mean_scale * rng.uniform(-1, 1, size=D) for _ in range(Mk)])
            V_c.append([np.linalg.qr(rng.standard_normal((D, Dp)))[0] for _ in range(Mk)])
            covs = []
            for _ in range(Mk):
                B = rng.uniform(-1, 1, size=(Dp, Dp))
                covs.append(B @ B.T / Dp + 0.3 * np.eye(Dp))
            cov_c.append(covs)
        r.append(r_c)
        mu.append(mu_c)
        V.append(V_c)
        cov.append(cov_c)
    return TsdcaParams(gamma, r, mu, V, cov)
