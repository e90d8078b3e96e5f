"""Experiment runner, metrics and CSV emission for the benchmark suites.

Experiment ids:

``A``             HMM data, optional grid over C or (D, Dp)
``B-proxy``       per-iteration cost scaling in D and Dp
``C-pca``         sine problem, network vs PCA pipeline
``C-lda``         XOR problem, network vs LDA pipeline
``C-noisy``       HMM data mixed with white noise, network vs PCA and LDA pipelines
``D-convergence`` noisy HMM data, loss traces
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines
from .datagen import (Dataset, gen_pca_problem, gen_xor_problem, mix_noise,
                      sample_hmm_dataset, sample_hmm_spec)
from .errors import EmptyInput, NumericalError, StepFailure
from .forward import predict
from .model import ModelTopology, NetworkWeights
from .trainer import TrainingConfig, _as_batches, _update, TrainState, init_weights, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("A", "B-proxy", "C-pca", "C-lda", "C-noisy", "D-convergence")
_METHODS = {"C-pca": ("TSDCN", "PCA"), "C-lda": ("TSDCN", "LDA"),
            "C-noisy": ("TSDCN", "PCA", "LDA")}


def accuracy(predictions, labels) -> float:
    """Percentage of predictions equal to their labels."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise EmptyInput("accuracy of an empty prediction set")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    return 100.0 * float(np.sum(predictions == labels)) / predictions.size


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts.

    Each part is reduced mod 2**64 and packed little-endian before hashing
    with blake2b, so derived seeds can themselves be fed back in.
    """
    payload = b"".join(struct.pack("<Q", int(p) % 2**64) for p in parts)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass
class ExperimentConfig:
    experiment: str = "A"
    C: int = 3
    D: int = 30
    Dp: int = 1
    K: int = 2
    M: int = 2
    T: int = 50
    n_train: int = 5
    n_test: int = 50
    n_datasets: int = 3
    n_inits: int = 3
    noise_ratio: float = 0.8
    master_seed: int = 0
    # each entry overrides topology fields for one condition, e.g. {"C": 5}
    grid: list = field(default_factory=list)
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(
        learning_rate=0.05, max_iter=1000))
    # B-proxy only
    scaling_D: list = field(default_factory=lambda: [10, 30, 50, 70, 90])
    scaling_Dp: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    scaling_iters: int = 20

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.n_datasets < 1 or self.n_inits < 1:
            raise ValueError("repeat counts must be at least 1")
        if isinstance(self.training, dict):
            self.training = TrainingConfig.from_dict(self.training)
        for cond in self.conditions():
            self.topology(cond)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def conditions(self) -> list:
        return [dict(g) for g in self.grid] or [{}]

    def topology(self, overrides: dict) -> ModelTopology:
        p = {k: overrides.get(k, getattr(self, k)) for k in ("C", "D", "Dp", "K", "M")}
        if self.experiment in ("C-pca", "C-lda"):
            p["C"], p["D"] = 2, 2
        return ModelTopology.uniform(p["C"], p["K"], p["M"], p["D"], p["Dp"])


def default_config(experiment: str) -> ExperimentConfig:
    """Desk-scale defaults for each experiment id."""
    if experiment in ("C-pca", "C-lda"):
        return ExperimentConfig(experiment=experiment, C=2, D=2, Dp=1, n_test=100)
    return ExperimentConfig(experiment=experiment)


@dataclass
class ResultRow:
    experiment: str
    condition: str
    dataset_index: int
    init_index: int
    accuracy: float
    J_final: float
    iterations: int
    wall_time: float
    seed_dataset: int
    seed_init: int
    failed: bool = False
    extra: dict = field(default_factory=dict)
    train_index: tuple = ()
    test_index: tuple = ()
    trace: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    summary: list
    scaling: Optional[dict] = None


def _condition_label(overrides: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in overrides.items()) or "default"


def _split(pool: Dataset, n_train: int):
    """Per class, the first ``n_train`` samples train and the rest test."""
    train_idx, test_idx = [], []
    seen: dict = {}
    for i, s in enumerate(pool.samples):
        n = seen.get(s.label, 0)
        (train_idx if n < n_train else test_idx).append(i)
        seen[s.label] = n + 1
    return tuple(train_idx), tuple(test_idx)


def make_dataset(config: ExperimentConfig, overrides: dict, seed: int) -> Dataset:
    """Pool of ``n_train + n_test`` samples per class for one dataset draw."""
    n = config.n_train + config.n_test
    top = config.topology(overrides)
    exp = config.experiment
    if exp == "C-pca":
        return gen_pca_problem(n, config.T, derive_seed(seed, 0))
    if exp == "C-lda":
        return gen_xor_problem(n, config.T, derive_seed(seed, 0))
    spec = sample_hmm_spec(top.C, top.D, derive_seed(seed, 0))
    pool = sample_hmm_dataset(spec, n, config.T, derive_seed(seed, 1))
    if exp in ("C-noisy", "D-convergence"):
        pool = mix_noise(pool, config.noise_ratio, derive_seed(seed, 2))
    return pool


def reduced_signal_stds(projection: np.ndarray, center, dataset: Dataset) -> dict:
    """Per-class mean of the per-sample std of a 1-D reduced signal."""
    out = {}
    for label in sorted({s.label for s in dataset.samples}):
        stds = [np.std(projection[:, 0] @ (s.series - np.asarray(center)[:, None]))
                for s in dataset.samples if s.label == label]
        out[label] = float(np.mean(stds))
    return out


def tsdcn_reducer(weights: NetworkWeights, component=(1, 1, 1)) -> baselines.LinearReducer:
    """Linear reducer given by one component's learned projection and mean."""
    W = weights.W_of(*component)
    V = W[1:]
    # x' = V^T x - mu', so center = V mu' for orthonormal V
    return baselines.LinearReducer("TSDCN", V.copy(), V @ -W[0])


def _train_tsdcn(top, train_set, test_set, training, seed):
    weights, records = train(init_weights(top, seed), train_set, training)
    x, y = test_set.arrays()
    return accuracy(predict(weights, x), y), weights, records


def _run_cell(config, overrides, label, i, j, seed_d, seed_i, pool, split, reducers):
    train_set, test_set = pool.subset(split[0]), pool.subset(split[1])
    top = config.topology(overrides)
    methods = _METHODS.get(config.experiment, ("TSDCN",))
    rows = []
    for method in methods:
        cond = label if method == "TSDCN" and len(methods) == 1 else (
            method if label == "default" else f"{method}:{label}")
        t0 = time.perf_counter()
        extra = {}
        try:
            if method == "TSDCN":
                acc, weights, records = _train_tsdcn(top, train_set, test_set, config.training, seed_i)
                if config.experiment == "C-lda":
                    r = tsdcn_reducer(weights)
                    stds = reduced_signal_stds(r.projection, r.center, test_set)
                    extra = {"std_class1": stds[1], "std_class2": stds[2]}
            else:
                reducer = reducers[method]
                acc, weights, records = baselines.classify_reduced(
                    reducer, train_set, test_set, config.training, K=top.K[0],
                    M=top.M[0][0], seed=seed_i)
                if config.experiment == "C-lda":
                    stds = reduced_signal_stds(reducer.projection, reducer.center, test_set)
                    extra = {"std_class1": stds[1], "std_class2": stds[2]}
        except (StepFailure, NumericalError) as exc:
            log.warning("cell %s d%d i%d failed: %s", cond, i, j, exc)
            rows.append(ResultRow(config.experiment, cond, i, j, float("nan"), float("nan"), 0,
                                  time.perf_counter() - t0, seed_d, seed_i, failed=True,
                                  train_index=split[0], test_index=split[1]))
            continue
        rows.append(ResultRow(config.experiment, cond, i, j, acc, records[-1].J, len(records),
                              time.perf_counter() - t0, seed_d, seed_i, extra=extra,
                              train_index=split[0], test_index=split[1],
                              trace=[r.J for r in records]))
    return rows


def summarize(rows) -> list:
    """Mean/std per condition over non-failed rows (sample std, ddof=1)."""
    out = []
    for cond in dict.fromkeys(r.condition for r in rows):
        group = [r for r in rows if r.condition == cond]
        ok = [r for r in group if not r.failed]
        entry = {"experiment": group[0].experiment, "condition": cond, "n": len(ok),
                 "n_failed": len(group) - len(ok)}
        cols = {"accuracy": [r.accuracy for r in ok], "J_final": [r.J_final for r in ok],
                "iterations": [r.iterations for r in ok], "wall_time": [r.wall_time for r in ok]}
        for key in sorted({k for r in ok for k in r.extra}):
            cols[key] = [r.extra[key] for r in ok if key in r.extra]
        for key, vals in cols.items():
            entry[f"mean_{key}"] = float(np.mean(vals)) if vals else float("nan")
            entry[f"std_{key}"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(entry)
    return out


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentResult:
    """Run every (condition, dataset, init) cell of an experiment.

    Dataset ``i`` uses seed ``derive_seed(master, i)`` and init ``j`` of that
    dataset uses ``derive_seed(master, i, j)``, shared across conditions.
    """
    if config.experiment == "B-proxy":
        scaling = scaling_probe(config.scaling_D, config.scaling_Dp, D_fixed=config.D,
                                Dp_fixed=config.Dp, n_iter=config.scaling_iters, C=config.C, K=config.K,
                                M=config.M, T=config.T, n_train=config.n_train,
                                seed=config.master_seed, training=config.training)
        return ExperimentResult(config, [], [], scaling)
    rows = []
    for overrides in config.conditions():
        label = _condition_label(overrides)
        for i in range(config.n_datasets):
            seed_d = derive_seed(config.master_seed, i)
            pool = make_dataset(config, overrides, seed_d)
            split = _split(pool, config.n_train)
            train_set = pool.subset(split[0])
            reducers = {}
            if config.experiment in _METHODS:
                Dp = config.topology(overrides).Dp
                if "PCA" in _METHODS[config.experiment]:
                    reducers["PCA"] = baselines.pca_fit(train_set, Dp)
                if "LDA" in _METHODS[config.experiment]:
                    reducers["LDA"] = baselines.lda_fit(train_set, Dp)
            for j in range(config.n_inits):
                seed_i = derive_seed(config.master_seed, i, j)
                cell = _run_cell(config, overrides, label, i, j, seed_d, seed_i, pool, split,
                                 reducers)
                rows.extend(cell)
                if progress is not None:
                    for r in cell:
                        progress(r)
    # order-stable: conditions in config order, then cell indices
    order = {c: n for n, c in enumerate(dict.fromkeys(r.condition for r in rows))}
    rows.sort(key=lambda r: (order[r.condition], r.dataset_index, r.init_index))
    return ExperimentResult(config, rows, summarize(rows))


# -- complexity probe -----------------------------------------------------------

def _loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def time_update_steps(topology: ModelTopology, n_iter: int, T: int, n_train: int, seed: int,
                      training: Optional[TrainingConfig] = None) -> float:
    """Median wall time of one training iteration on HMM data."""
    training = training or TrainingConfig(learning_rate=0.05)
    spec = sample_hmm_spec(topology.C, topology.D, derive_seed(seed, topology.D, 0))
    data = sample_hmm_dataset(spec, n_train, T, derive_seed(seed, topology.D, 1))
    batches = _as_batches(data)
    weights = init_weights(topology, derive_seed(seed, topology.D, topology.Dp))
    state = TrainState()
    times = []
    for _ in range(n_iter):
        t0 = time.perf_counter()
        try:
            weights, _ = _update(weights, batches, training, state)
        except StepFailure:
            break
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def scaling_probe(D_grid, Dp_grid, D_fixed: int = 30, Dp_fixed: int = 1, n_iter: int = 20,
                  C: int = 3, K: int = 2, M: int = 2, T: int = 50, n_train: int = 5,
                  seed: int = 0, training: Optional[TrainingConfig] = None) -> dict:
    """Median per-iteration time over a D grid (Dp fixed) and a Dp grid (D fixed),
    with the fitted log-log slopes."""
    if not D_grid or not Dp_grid:
        raise ValueError("grids must be nonempty")
    rows = []
    for D in D_grid:
        top = ModelTopology.uniform(C, K, M, D, Dp_fixed)
        rows.append({"sweep": "D", "D": D, "Dp": Dp_fixed,
                     "median_step_s": time_update_steps(top, n_iter, T, n_train, seed, training)})
    for Dp in Dp_grid:
        top = ModelTopology.uniform(C, K, M, D_fixed, Dp)
        rows.append({"sweep": "Dp", "D": D_fixed, "Dp": Dp,
                     "median_step_s": time_update_steps(top, n_iter, T, n_train, seed, training)})
    d_rows = [r for r in rows if r["sweep"] == "D"]
    p_rows = [r for r in rows if r["sweep"] == "Dp"]
    slope_D = _loglog_slope([r["D"] for r in d_rows], [r["median_step_s"] for r in d_rows]) \
        if len(d_rows) > 1 else float("nan")
    slope_Dp = _loglog_slope([r["Dp"] for r in p_rows], [r["median_step_s"] for r in p_rows]) \
        if len(p_rows) > 1 else float("nan")
    return {"rows": rows, "slope_D": slope_D, "slope_Dp": slope_Dp}


# -- CSV emission -----------------------------------------------------------------

_ROW_FIELDS = ["experiment", "condition", "dataset_index", "init_index", "accuracy", "J_final",
               "iterations", "wall_time", "seed_dataset", "seed_init", "failed"]


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _parse_condition(cond: str) -> dict:
    body = cond.split(":", 1)[-1]
    out = {}
    for part in body.split(","):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k] = int(v)
    return out


def emit_plot_data(results: ExperimentResult, path) -> list:
    """Write the result tables and one CSV per figure analog; returns paths."""
    if not results.rows and not results.scaling:
        raise ValueError("nothing to emit")
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if results.scaling:
        scal = results.scaling
        written.append(_write_csv(out_dir / "scaling.csv", ["sweep", "D", "Dp", "median_step_s"],
                                  [[r["sweep"], r["D"], r["Dp"], repr(r["median_step_s"])]
                                   for r in scal["rows"]]))
        written.append(_write_csv(out_dir / "time_vs_D_Dp.csv", ["D", "Dp", "median_step_s"],
                                  [[r["D"], r["Dp"], repr(r["median_step_s"])]
                                   for r in scal["rows"]]))
        written.append(_write_csv(out_dir / "scaling_slopes.csv", ["slope_D", "slope_Dp"],
                                  [[repr(scal["slope_D"]), repr(scal["slope_Dp"])]]))
    if not results.rows:
        return written

    extra_keys = sorted({k for r in results.rows for k in r.extra})
    written.append(_write_csv(
        out_dir / "results.csv", _ROW_FIELDS + extra_keys,
        [[getattr(r, f) if not isinstance(getattr(r, f), float) else repr(getattr(r, f))
          for f in _ROW_FIELDS] + [repr(r.extra.get(k, float("nan"))) for k in extra_keys]
         for r in results.rows]))
    summary_keys = list(dict.fromkeys(k for s in results.summary for k in s))
    written.append(_write_csv(out_dir / "summary.csv", summary_keys,
                              [[s.get(k, "") for k in summary_keys] for s in results.summary]))

    parsed = [(s, _parse_condition(s["condition"])) for s in results.summary]
    if any("C" in p for _, p in parsed):
        written.append(_write_csv(
            out_dir / "accuracy_vs_C.csv", ["C", "mean_accuracy", "std_accuracy", "n"],
            [[p["C"], s["mean_accuracy"], s["std_accuracy"], s["n"]] for s, p in parsed if "C" in p]))
    if any("D" in p or "Dp" in p for _, p in parsed):
        cfg = results.config
        written.append(_write_csv(
            out_dir / "time_vs_D_Dp.csv", ["D", "Dp", "mean_wall_time", "std_wall_time", "n"],
            [[p.get("D", cfg.D), p.get("Dp", cfg.Dp), s["mean_wall_time"], s["std_wall_time"], s["n"]]
             for s, p in parsed if "D" in p or "Dp" in p]))
    if results.config.experiment in _METHODS:
        written.append(_write_csv(
            out_dir / "method_comparison.csv",
            ["method", "mean_accuracy", "std_accuracy", "mean_wall_time", "std_wall_time"],
            [[s["condition"], s["mean_accuracy"], s["std_accuracy"], s["mean_wall_time"],
              s["std_wall_time"]] for s in results.summary]))
    if results.config.experiment == "D-convergence":
        for r in results.rows:
            if r.trace:
                written.append(_write_csv(
                    out_dir / f"j_trace_d{r.dataset_index}_i{r.init_index}.csv", ["iter", "J"],
                    [[k + 1, repr(J)] for k, J in enumerate(r.trace)]))
    return written
