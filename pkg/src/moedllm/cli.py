"""Command-line entry point: ``moedllm {run,ablate,sweep,diff-traces}``.

Exit codes: 0 success, 1 traces differ, 2 config error, 3 decode stall,
4 trace schema mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys

from moedllm import experiments
from moedllm.config import OUTPUT_ENV, ExperimentConfigError, load_experiment_config
from moedllm.trace import SchemaMismatchError

EXIT_OK = 0
EXIT_DIFFERS = 1
EXIT_CONFIG = 2
EXIT_STALL = 3
EXIT_SCHEMA = 4


def _seed_list(text: str) -> list[int]:
    try:
        seeds = []
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-")
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r} (use e.g. 0,1,2 or 0-19)") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError("seeds must be non-negative integers")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moedllm", description="Toy MoE block-diffusion decoding experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-run progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment(name, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="experiment TOML file")
        s.add_argument("--out", help=f"output directory (default: [run] outputs, then ${OUTPUT_ENV}, then ./runs)")
        s.add_argument("--seeds", type=_seed_list, help="override [run] seeds, e.g. 0-19")
        s.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes for per-seed runs")
        return s

    experiment("run", "decode each variant for each seed")
    experiment("ablate", "cumulative strategy ablation and refresh-interval table")
    experiment("sweep", "hot-token (tau_hot, l_hot) sensitivity sweep")

    d = sub.add_parser("diff-traces", help="compare two trace files")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--mode", choices=("tokens", "full"), default="full")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "diff-traces":
        try:
            diff = experiments.diff_traces(args.a, args.b, args.mode)
        except SchemaMismatchError as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_SCHEMA
        except (OSError, ValueError, KeyError) as err:
            print(f"error: cannot read traces: {err}", file=sys.stderr)
            return EXIT_CONFIG
        sys.stdout.write(diff.report())
        return EXIT_OK if diff.identical else EXIT_DIFFERS

    if args.parallel < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_experiment_config(args.config, out=args.out, seeds=args.seeds)
        if args.command == "sweep" and not config.sweep_pairs:
            raise ExperimentConfigError(f"{args.config}:1: sweep requires [sweep] pairs = [[tau_hot, l_hot], ...]")
    except ExperimentConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            rows = experiments.run(config, args.parallel)
            print(f"wrote {len(rows)} summary rows to {config.outputs / 'summary.csv'}")
        elif args.command == "ablate":
            rows, refresh = experiments.ablate(config, args.parallel)
            print(f"wrote {config.outputs / 'ablation.csv'}")
            if refresh:
                print(f"wrote {config.outputs / 'refresh.csv'}")
        else:
            table = experiments.sweep(config, args.parallel)
            labels = [experiments.pair_label(*p) for p in config.sweep_pairs]
            for label in labels:
                print(f"{label}: apf {table[label]['apf']:.4f}")
            trend = experiments.apf_monotone_decreasing(table, labels)
            print(f"apf monotonically decreasing across pairs: {'yes' if trend else 'no'}")
            print(f"wrote {config.outputs / 'sweep.csv'}")
    except experiments.RunStalled as err:
        print(f"stall: {err}", file=sys.stderr)
        return EXIT_STALL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
