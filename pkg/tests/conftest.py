import numpy as np
import pytest
from scipy.stats import multivariate_normal

from tsdcn.model import ModelTopology, TimeSeriesSample
from tsdcn.tsdca import random_tsdca_params


def random_topology(rng, C_max=3, D_max=4, Dp_max=2, K_max=2, M_max=2) -> ModelTopology:
    C = int(rng.integers(2, C_max + 1))
    D = int(rng.integers(1, D_max + 1))
    Dp = int(rng.integers(1, min(Dp_max, D) + 1))
    K = [int(rng.integers(1, K_max + 1)) for _ in range(C)]
    M = [[int(rng.integers(1, M_max + 1)) for _ in range(k)] for k in K]
    return ModelTopology(C, K, M, D, Dp)


def random_instance(rng, T_max=5, **kw):
    top = random_topology(rng, **kw)
    params = random_tsdca_params(top, rng)
    T = int(rng.integers(1, T_max + 1))
    sample = TimeSeriesSample(rng.uniform(-1.5, 1.5, size=(top.D, T)))
    return top, params, sample


def path_sum_posterior(params, sample):
    """Brute-force class posteriors: sum over every state path explicitly.

    Uses scipy densities on the reduced coordinates and the initial weights
    ``pi_k = sum_k' gamma_{k', k}``.  Exponential in T; only for tiny cases.
    """
    x = sample.series.T
    T = x.shape[0]
    scores = []
    for c, gamma in enumerate(params.gamma):
        K = gamma.shape[0]
        b = np.zeros((K, T))
        for k in range(K):
            for m, r in enumerate(params.r[c][k]):
                V = params.V[c][k][m]
                dist = multivariate_normal(V.T @ params.mu[c][k][m], params.cov[c][k][m])
                b[k] += r * np.atleast_1d(dist.pdf(x @ V))
        pi = gamma.sum(axis=0)
        total = 0.0
        for path in np.ndindex(*([K] * T)):
            p = pi[path[0]] * b[path[0], 0]
            for t in range(1, T):
                p *= gamma[path[t - 1], path[t]] * b[path[t], t]
            total += p
        scores.append(total)
    scores = np.array(scores)
    return scores / scores.sum()


def central_differences(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
