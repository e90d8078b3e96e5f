"""PCA / LDA reducers and the reduced-signal classification pipeline.

Both reducers pool every time step of every training sample into one point
cloud.  Reduced signals are classified by a network whose projection stage is
frozen to the identity, i.e. the reduction-free special case of the model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .datagen import Dataset
from .errors import DegenerateData
from .forward import predict
from .model import ModelTopology, NetworkWeights, TimeSeriesSample
from .trainer import TrainingConfig, init_weights, train

LDA_RIDGE = 1e-8


@dataclass
class LinearReducer:
    kind: str
    projection: np.ndarray   # (D, Dp)
    center: np.ndarray       # (D,)
    eigenvalues: Optional[np.ndarray] = None

    @property
    def D(self) -> int:
        return self.projection.shape[0]

    @property
    def Dp(self) -> int:
        return self.projection.shape[1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(),
                "projection": self.projection.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearReducer":
        return cls(d["kind"], np.array(d["projection"], dtype=float),
                   np.array(d["center"], dtype=float))


def _pooled(dataset: Dataset):
    points = np.concatenate([s.series.T for s in dataset.samples])
    labels = np.concatenate([np.full(s.T, s.label) for s in dataset.samples])
    return points, labels


def _fix_signs(P: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(P), axis=0)
    return P * np.sign(P[idx, np.arange(P.shape[1])])


def pca_fit(dataset: Dataset, Dp: int) -> LinearReducer:
    points, _ = _pooled(dataset)
    center = points.mean(axis=0)
    cov = np.cov(points - center, rowvar=False, bias=True).reshape(points.shape[1], -1)
    w, U = np.linalg.eigh(cov)
    w, U = w[::-1], U[:, ::-1]
    if np.sum(w > 1e-12 * max(w[0], np.finfo(float).tiny)) < Dp:
        raise DegenerateData(f"fewer than {Dp} directions with positive variance")
    return LinearReducer("PCA", _fix_signs(U[:, :Dp]), center, w)


def lda_fit(dataset: Dataset, Dp: int) -> LinearReducer:
    """Fisher discriminant directions of the pooled, class-labelled time points."""
    points, labels = _pooled(dataset)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateData("LDA needs at least two classes")
    if Dp > len(classes) - 1:
        raise DegenerateData(f"between-class scatter has rank <= {len(classes) - 1} < Dp={Dp}")
    center = points.mean(axis=0)
    D = points.shape[1]
    Sb = np.zeros((D, D))
    Sw = np.zeros((D, D))
    for c in classes:
        xc = points[labels == c]
        mc = xc.mean(axis=0)
        diff = (mc - center)[:, None]
        Sb += len(xc) * diff @ diff.T
        xc0 = xc - mc
        Sw += xc0.T @ xc0
    Sb /= len(points)
    Sw /= len(points)
    try:
        w, U = scipy.linalg.eigh(Sb, Sw + LDA_RIDGE * np.eye(D))
    except np.linalg.LinAlgError as exc:
        raise DegenerateData(str(exc)) from None
    w, U = w[::-1], U[:, ::-1]
    if np.sum(w > 1e-12 * max(w[0], np.finfo(float).tiny)) < Dp:
        raise DegenerateData("between-class scatter is degenerate")
    P = U[:, :Dp] / np.linalg.norm(U[:, :Dp], axis=0)
    return LinearReducer("LDA", _fix_signs(P), center, w)


def reduce(reducer: LinearReducer, dataset: Dataset) -> Dataset:
    """Map every column ``x`` to ``projection^T (x - center)``."""
    out = []
    for s in dataset.samples:
        if s.D != reducer.D:
            raise ValueError(f"sample dimension {s.D} does not match reducer D={reducer.D}")
        out.append(TimeSeriesSample(reducer.projection.T @ (s.series - reducer.center[:, None]),
                                    label=s.label))
    return Dataset(out, dict(dataset.meta, reducer=reducer.kind))


def identity_weights(topology: ModelTopology, seed: int) -> NetworkWeights:
    """Starting weights with every projection fixed to the identity."""
    if topology.Dp != topology.D:
        raise ValueError("identity projection needs Dp == D")
    w = init_weights(topology, seed)
    w.W[:, 1:, :] = np.eye(topology.D)
    return w


def classify_reduced(reducer: LinearReducer, train_set: Dataset, test_set: Dataset,
                     config: TrainingConfig, K: int = 2, M: int = 2, seed: int = 0):
    """Accuracy (percent) of the frozen-projection classifier on reduced data.

    Returns ``(accuracy, weights, records)``.
    """
    from .harness import accuracy

    rtrain = reduce(reducer, train_set)
    rtest = reduce(reducer, test_set)
    C = int(max(s.label for s in train_set.samples))
    top = ModelTopology.uniform(C, K, M, reducer.Dp, reducer.Dp)
    cfg = TrainingConfig(**dict(config.to_dict(), freeze_projection=True))
    weights, records = train(identity_weights(top, seed), rtrain, cfg)
    x, y = rtest.arrays()
    return accuracy(predict(weights, x), y), weights, records
