"""
Command-line interface for the KDE-AsHMM toolkit.

Exit codes: 0 success, 1 parse error, 2 invariant violation, 3 numerical failure.
"""

import argparse
import logging
import sys
from typing import List, Optional

from ashmm_toolkit import AsHmmToolkit, BenchmarkRequest, TrainRequest
from config import (EXIT_INVARIANT, EXIT_NUMERICAL, EXIT_OK, EXIT_PARSE, RunConfig, load_settings,
                    resolve_threads, setup_logging)
from errors import DataParseError, InvariantError, NumericalError
from synthetic_bench import ALL_VARIANTS, GAUSSIAN_HMM, KDE_VARIANTS

logger = logging.getLogger(__name__)

TRAIN_VARIANTS = KDE_VARIANTS + (GAUSSIAN_HMM,)


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors reported as parse errors (exit code 1)."""

    def error(self, message):
        raise DataParseError(f"{self.prog}: {message}")


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def seed_value(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def build_parser(defaults) -> CliParser:
    parser = CliParser(
        prog="kdeashmm",
        description="KDE-AsHMM toolkit - kernel-density asymmetric hidden Markov models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s synth sample_data/default_spec.json --length 1600 --seed 1 --out train.csv
  %(prog)s train train.csv --states 3 --pstar 1 --variant kde-as --out model.json
  %(prog)s eval model.json test.csv
  %(prog)s segment model.json test.csv --out states.csv
  %(prog)s benchmark sample_data/default_spec.json --out bench --plot-data
        """
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=seed_value, default=0, help="Random seed (default: 0)")
    common.add_argument("--threads", type=nonnegative_int, default=defaults.threads,
                        help="Worker threads, 0 = one per CPU (default: %(default)s)")
    common.add_argument("--log-level", default=defaults.log_level,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Log level for stderr")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    train = sub.add_parser("train", parents=[common], help="Fit a model to a CSV series")
    train.add_argument("data", help="Training CSV with a header row")
    train.add_argument("--states", type=positive_int, default=3, help="Number of hidden states")
    train.add_argument("--pstar", type=nonnegative_int, default=1, help="Maximum AR order P*")
    train.add_argument("--variant", choices=TRAIN_VARIANTS, default="kde-as", help="Model variant")
    train.add_argument("--graph", help="Fixed dependency graph (JSON)")
    train.add_argument("--labels", help="Label column for supervised omega initialisation")
    train.add_argument("--sem-rounds", type=nonnegative_int, default=1, help="Structural EM rounds")
    train.add_argument("--max-iter", type=nonnegative_int, default=100, help="EM iteration cap")
    train.add_argument("--tol", type=float, default=1e-6, help="Relative convergence tolerance")
    train.add_argument("--out", required=True, help="Output model JSON")

    evaluate = sub.add_parser("eval", parents=[common], help="Log-likelihood of a series")
    evaluate.add_argument("model")
    evaluate.add_argument("data")
    evaluate.add_argument("--out", help="JSON result file (default: <data stem>_eval.json)")
    evaluate.add_argument("--labels", help="Label column to drop before scoring")

    segment = sub.add_parser("segment", parents=[common], help="Viterbi state per instant")
    segment.add_argument("model")
    segment.add_argument("data")
    segment.add_argument("--out", required=True, help="Output CSV (t,state)")
    segment.add_argument("--labels", help="Label column to drop before decoding")

    classify = sub.add_parser("classify", parents=[common], help="Max-likelihood class of a series")
    classify.add_argument("model_dir", help="Directory with one model JSON per class")
    classify.add_argument("data")
    classify.add_argument("--out", help="Optional JSON result file")

    synth = sub.add_parser("synth", parents=[common], help="Generate synthetic data")
    synth.add_argument("spec")
    synth.add_argument("--length", type=positive_int, required=True)
    synth.add_argument("--out", required=True, help="Output CSV; states go to <out>_states.csv")

    bench = sub.add_parser("benchmark", parents=[common], help="Run the synthetic model comparison")
    bench.add_argument("spec")
    bench.add_argument("--train-lengths", type=positive_int, nargs="+", default=[350, 1050])
    bench.add_argument("--n-test", type=positive_int, default=20)
    bench.add_argument("--test-length", type=positive_int, default=400)
    bench.add_argument("--variants", nargs="+", choices=ALL_VARIANTS, default=list(ALL_VARIANTS))
    bench.add_argument("--sem-rounds", type=nonnegative_int, default=1)
    bench.add_argument("--max-iter", type=nonnegative_int, default=100)
    bench.add_argument("--tol", type=float, default=1e-6)
    bench.add_argument("--plot-data", action="store_true", help="Also write plot-ready CSVs")
    bench.add_argument("--out", default=defaults.output_dir, help="Output directory")
    return parser


def run_command(args, run: RunConfig, toolkit: AsHmmToolkit) -> None:
    if args.command == "train":
        request = TrainRequest(data_file=args.data, out=args.out, n_states=args.states, p_star=args.pstar,
                               variant=args.variant, graph_file=args.graph, label_column=args.labels,
                               sem_rounds=args.sem_rounds, max_iter=args.max_iter, rel_tol=args.tol,
                               seed=args.seed)
        result = toolkit.train(request, run)
        report = result["report"]
        final = report.loglik_per_datum[-1] if report.loglik_per_datum else float("nan")
        print(f"trained {args.variant}: {report.iterations} iterations, "
              f"loglik/datum {final:.6f}, {len(report.moves)} structure moves")
        print(f"model written to {args.out}")
    elif args.command == "eval":
        result = toolkit.evaluate(args.model, args.data, run, args.out, label_column=args.labels)
        print(f"loglik {result['loglik']!r}")
        print(f"n_scored {result['n_scored']}")
        print(f"loglik_per_datum {result['loglik_per_datum']!r}")
        print(f"result written to {result['files'][0]}")
    elif args.command == "segment":
        toolkit.segment(args.model, args.data, args.out, run, label_column=args.labels)
        print(f"states written to {args.out}")
    elif args.command == "classify":
        result = toolkit.classify(args.model_dir, args.data, run, args.out)
        for name, value in result["logliks"].items():
            print(f"{name} {value!r}")
        suffix = " (tie broken lexicographically)" if result["tie"] else ""
        print(f"predicted {result['predicted']}{suffix}")
    elif args.command == "synth":
        result = toolkit.synthesize(args.spec, args.length, args.seed, args.out, run)
        print("wrote " + ", ".join(result["files"]))
    elif args.command == "benchmark":
        request = BenchmarkRequest(spec_file=args.spec, out_dir=args.out, train_lengths=args.train_lengths,
                                   n_test=args.n_test, test_length=args.test_length, variants=args.variants,
                                   sem_rounds=args.sem_rounds, max_iter=args.max_iter, rel_tol=args.tol,
                                   seed=args.seed, plot_data=args.plot_data)
        result = toolkit.benchmark(request, run)
        for cell in result["report"].cells:
            print(f"T={cell.train_length} {cell.variant}: mean {cell.mean:.4f} std {cell.std:.4f}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI function; returns the process exit code."""
    try:
        settings = load_settings()
        args = build_parser(settings).parse_args(argv)
        setup_logging(args.log_level)
        threads = resolve_threads(args.threads)
        flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "log_level")}
        run = RunConfig(command=args.command, seed=args.seed, threads=threads, log_level=args.log_level,
                        flags=flags)
        run_command(args, run, AsHmmToolkit(settings, threads))
    except DataParseError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except InvariantError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except NumericalError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
