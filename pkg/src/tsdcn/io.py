"""File formats: model JSON, dataset JSON-lines with a manifest, reducer JSON."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .model import ModelTopology, NetworkWeights, TimeSeriesSample

FORMAT_VERSION = 1


def weights_to_dict(weights: NetworkWeights) -> dict:
    top = weights.topology
    return {
        "format_version": FORMAT_VERSION,
        "topology": top.to_dict(),
        "W": {"shape": list(weights.W.shape),
              "index": [[c + 1, k + 1, m + 1] for c, k, m in top.components],
              "data": weights.W.tolist()},
        "Wp": {"shape": list(weights.Wp.shape),
               "index": [[c + 1, kp + 1, k + 1, m + 1] for c, kp, k, m in top.units],
               "data": weights.Wp.tolist()},
    }


def weights_from_dict(d: dict) -> NetworkWeights:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version!r}")
    top = ModelTopology.from_dict(d["topology"])
    W = np.array(d["W"]["data"], dtype=float).reshape(d["W"]["shape"])
    Wp = np.array(d["Wp"]["data"], dtype=float).reshape(d["Wp"]["shape"])
    return NetworkWeights(top, W, Wp)


def save_model(weights: NetworkWeights, path) -> None:
    # json writes floats with repr(), which round-trips every double exactly
    Path(path).write_text(json.dumps(weights_to_dict(weights)))


def load_model(path) -> NetworkWeights:
    return weights_from_dict(json.loads(Path(path).read_text()))


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_dataset(dataset: Dataset, path) -> None:
    """One JSON object per line: ``{"label", "series"}`` with ``series`` as
    T rows of length D.  The manifest goes to ``<path>.manifest.json``."""
    path = Path(path)
    with path.open("w") as fh:
        for s in dataset.samples:
            fh.write(json.dumps({"label": s.label, "series": s.series.T.tolist()}))
            fh.write("\n")
    manifest = dict(dataset.meta, n_samples=len(dataset.samples))
    manifest_path(path).write_text(json.dumps(manifest, indent=2, default=_jsonable))


def load_dataset(path) -> Dataset:
    path = Path(path)
    samples = []
    with path.open() as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                samples.append(TimeSeriesSample(np.array(obj["series"], dtype=float).T,
                                                label=obj.get("label")))
    mpath = manifest_path(path)
    meta = json.loads(mpath.read_text()) if mpath.exists() else {}
    return Dataset(samples, meta)


def save_reducer(reducer, path) -> None:
    Path(path).write_text(json.dumps(reducer.to_dict()))


def load_reducer(path):
    from .baselines import LinearReducer
    return LinearReducer.from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")
