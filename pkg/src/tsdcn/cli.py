"""Command-line entry point: ``tsdcn {generate,train,eval,experiment}``.

Exit status is 0 on success, 1 on usage or input errors and 2 on numerical
failure during training or evaluation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, io
from .datagen import (gen_pca_problem, gen_xor_problem, mix_noise, sample_hmm_dataset,
                      sample_hmm_spec)
from .errors import (DegenerateData, DegenerateMatrix, NumericalError, RankDeficient,
                     StepFailure, TsdcnError)
from .forward import predict
from .trainer import init_weights, train, write_train_log

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
_NUMERICAL = (NumericalError, StepFailure, RankDeficient, DegenerateMatrix, DegenerateData)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; that status is reserved here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def cmd_generate(args) -> int:
    n = args.n_train + args.n_test
    if args.problem in ("hmm", "noisy"):
        spec = sample_hmm_spec(args.classes, args.dims, harness.derive_seed(args.seed, 0))
        pool = sample_hmm_dataset(spec, n, args.length, harness.derive_seed(args.seed, 1))
        if args.problem == "noisy":
            pool = mix_noise(pool, args.noise_ratio, harness.derive_seed(args.seed, 2))
    elif args.problem == "pca":
        pool = gen_pca_problem(n, args.length, args.seed)
    else:
        pool = gen_xor_problem(n, args.length, args.seed)
    train_idx, test_idx = harness._split(pool, args.n_train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", train_idx), ("test", test_idx)):
        part = pool.subset(idx)
        part.meta.update(split=name, generator=args.problem)
        io.save_dataset(part, out / f"{name}.jsonl")
    print(json.dumps({"train": str(out / "train.jsonl"), "test": str(out / "test.jsonl"),
                      "n_train": len(train_idx), "n_test": len(test_idx)}))
    return EXIT_OK


def cmd_train(args) -> int:
    data = io.load_dataset(args.data)
    if not data.samples:
        raise UsageError(f"{args.data} holds no samples")
    raw = _read_json(args.config)
    raw.setdefault("experiment", "A")
    cfg = harness.ExperimentConfig.from_dict(raw)
    C = int(max(s.label for s in data.samples))
    top = cfg.topology({"C": C, "D": data.samples[0].D})
    weights, records = train(init_weights(top, cfg.training.seed), data, cfg.training)
    io.save_model(weights, args.model_out)
    if args.log_out:
        write_train_log(records, args.log_out)
    print(json.dumps({"iterations": len(records), "J_final": records[-1].J,
                      "h_inf": records[-1].h_inf}))
    return EXIT_OK


def cmd_eval(args) -> int:
    weights = io.load_model(args.model)
    data = io.load_dataset(args.data)
    if not data.samples:
        raise UsageError(f"{args.data} holds no samples")
    x, y = data.arrays()
    if x.shape[2] != weights.topology.D:
        raise UsageError(f"data dimension {x.shape[2]} does not match model D={weights.topology.D}")
    print(json.dumps({"accuracy": harness.accuracy(predict(weights, x), y), "n": len(y)}))
    return EXIT_OK


def cmd_experiment(args) -> int:
    raw = _read_json(args.config)
    if raw.get("experiment", args.id) != args.id:
        raise UsageError(f"config is for experiment {raw['experiment']!r}, not {args.id!r}")
    cfg = harness.default_config(args.id).to_dict()
    cfg.update(raw, experiment=args.id)
    config = harness.ExperimentConfig.from_dict(cfg)
    result = harness.run_experiment(
        config, progress=lambda r: logging.info("%s d%d i%d acc=%.1f", r.condition,
                                                r.dataset_index, r.init_index, r.accuracy))
    paths = harness.emit_plot_data(result, args.out_dir)
    (Path(args.out_dir) / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    out = {"files": [str(p) for p in paths], "summary": result.summary}
    if result.scaling:
        out.update(slope_D=result.scaling["slope_D"], slope_Dp=result.scaling["slope_Dp"])
    print(json.dumps(out, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsdcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic train/test split")
    g.add_argument("--problem", choices=["hmm", "pca", "xor", "noisy"], required=True)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--dims", type=int, default=30)
    g.add_argument("--length", type=int, default=50)
    g.add_argument("--n-train", type=int, default=5)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--noise-ratio", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a network on a dataset file")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON with Dp, K, M and a 'training' object")
    t.add_argument("--model-out", required=True)
    t.add_argument("--log-out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a saved model on a dataset file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a benchmark suite and write CSV tables")
    x.add_argument("--id", choices=list(harness.EXPERIMENTS), required=True)
    x.add_argument("--config")
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "generate":
            for name in ("classes", "dims", "length", "n_train", "n_test"):
                if getattr(args, name) < 1:
                    parser.error(f"--{name.replace('_', '-')} must be positive")
    except SystemExit as exc:      # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _NUMERICAL as exc:
        print(f"tsdcn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, OSError, TsdcnError) as exc:
        print(f"tsdcn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
