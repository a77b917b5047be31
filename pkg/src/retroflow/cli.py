"""Command-line entry point: ``gen-data``, ``train``, ``eval`` and ``ablate``.

Each subcommand takes an optional JSON config (``--config``) whose keys
mirror the flags; flags override the file. Unknown config keys are an
error. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError, DataConfig, ExperimentConfig, TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("retroflow")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from exc


def _str_list(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


def _add_data_args(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-valid", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--min-fragment", type=int)
    p.add_argument("--max-fragment", type=int)
    p.add_argument("--ring-prob", type=float)
    p.add_argument("--double-bond-prob", type=float)
    p.add_argument("--multi-answer-fraction", type=float)
    p.add_argument("--dummy-count", type=int)


def _add_train_args(p):
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--dummy-count", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-edge", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--samples-per-pair", type=int)
    p.add_argument("--conditionings", type=_str_list)
    p.add_argument("--max-reactions", type=int)


def _add_experiment_args(p):
    p.add_argument("--mode", choices=harness.MODES)
    p.add_argument("--T", "--steps", dest="T", type=int)
    p.add_argument("--N", "--samples", dest="N", type=int)
    p.add_argument("--K", "--particles", dest="K", type=int)
    p.add_argument("--lam", "--lambda", dest="lam", type=float)
    p.add_argument("--M", dest="M", type=int)
    p.add_argument("--budgets", type=_int_list)
    p.add_argument("--stepper", choices=("euler", "rk2"))
    p.add_argument("--dummy-count", type=int)
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--seed", type=int)
    p.add_argument("--resample-mode", choices=("every-step", "ess-threshold"))
    p.add_argument("--ess-fraction", type=float)
    p.add_argument("--estimate", choices=("mode", "sample"))
    p.add_argument("--ks", type=_int_list)
    p.add_argument("--max-products", type=int)
    p.add_argument("--dump-predictions", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retroflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic reaction dataset")
    p.add_argument("--config")
    p.add_argument("--output", help="dataset directory (default: $%s/data)" % harness.OUTPUT_ENV)
    _add_data_args(p)

    p = sub.add_parser("train", help="train the product- and synthon-conditioned denoisers")
    p.add_argument("--config")
    p.add_argument("--output", help="checkpoint path (default: $%s/model.json)" % harness.OUTPUT_ENV)
    _add_train_args(p)

    p = sub.add_parser("eval", help="sample, rank and score the test split")
    p.add_argument("--config")
    p.add_argument("--output", help="report directory (default: $%s/eval)" % harness.OUTPUT_ENV)
    _add_experiment_args(p)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("suite", choices=harness.ABLATIONS)
    p.add_argument("--config")
    p.add_argument("--output", help="table directory (default: $%s/ablations)" % harness.OUTPUT_ENV)
    _add_experiment_args(p)
    return parser


_NOT_CONFIG = {"command", "config", "verbose", "suite"}


def _merge(args, cls, default_output: Path):
    d = harness.load_json(args.config) if args.config else {}
    for k, v in vars(args).items():
        if k not in _NOT_CONFIG and v is not None:
            d[k] = v
    d.setdefault("output", str(default_output))
    return cls.from_dict(d)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"retroflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = harness.default_output_dir()
    try:
        if args.command == "gen-data":
            cfg = _merge(args, DataConfig, out / "data")
            data = harness.generate_data(cfg)
            print(f"wrote {sum(map(len, data.values()))} reactions to {cfg.output}")
        elif args.command == "train":
            cfg = _merge(args, TrainConfig, out / "model.json")
            if not cfg.dataset:
                raise ConfigError("train needs --dataset")
            harness.train_models(cfg)
            print(f"wrote model to {cfg.output}")
        elif args.command == "eval":
            cfg = _merge(args, ExperimentConfig, out / "eval")
            rep = harness.run_experiment(cfg)
            m = rep["metrics"]
            for k in cfg.ks:
                print(f"k={k:<3d} exact={m['exact'][str(k)]:.4f} round_trip={m['round_trip'][str(k)]:.4f} "
                      f"coverage={m['coverage'][str(k)]:.4f}")
        else:
            cfg = _merge(args, ExperimentConfig, out / "ablations")
            rows = harness.run_ablation_suite(args.suite, cfg.replace(output=None), output=cfg.output)
            for row in rows:
                print(", ".join(f"{k}={v}" for k, v in row.items()))
    except ConfigError as exc:
        print(f"retroflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"retroflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
