"""``fuzzpart`` command line: score, partition, campaign, simulate, replay.

Exit codes: 0 success, 1 validation error, 2 I/O error. Failures print one
``error: <code>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .callgraph import GraphError, load_graph, partition_subgraph, update_katz
from .coverage import CoverageMap, TraceError, compute_context_depth, load_trace, replay, retain_decision
from .orchestrator import CampaignConfig, CampaignError, emit_allowlists, read_allowlist, run_campaign
from .partitioning import ALGORITHMS, FENNEL_GAMMA, FENNEL_SLACK, HDRF_LAMBDA, PartitionError, partition, plan_metrics
from .scoring import EPSILON, ScoringError, apply_coverage_report, format_score_tsv, read_coverage_report, score
from .simharness import SimConfig, SimError, SimProgram, generate_program, run_comparison


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise CliError("usage", message)


def _graph_with_scores(args):
    g = load_graph(args.graph)
    if args.coverage:
        apply_coverage_report(g, read_coverage_report(args.coverage))
    update_katz(g)
    table = score(g, args.epsilon)
    return g, table


def cmd_score(args) -> int:
    _, table = _graph_with_scores(args)
    sys.stdout.write(format_score_tsv(table))
    return 0


def cmd_partition(args) -> int:
    if args.k < 1:
        raise CliError("invalid-k", f"--k must be >= 1, got {args.k}")
    g, table = _graph_with_scores(args)
    try:
        plan = partition(g, args.algo, args.k, table, gamma=args.gamma, slack=args.slack, lam=args.lam,
                         rng_seed=args.seed)
    except PartitionError as exc:
        raise CliError("invalid-k" if "k" in str(exc) else "invalid-partition", str(exc)) from exc
    emit_allowlists(plan, set(), g.entry, args.out, g)
    m = plan_metrics(plan, g)
    cut = "na" if plan.mode == "edge" else str(m.cut_edges)
    print(f"algo={args.algo} k={args.k} cut={cut} repl={m.replication_factor:.9g} imbalance={m.load_imbalance:.9g}")
    return 0


def cmd_replay(args) -> int:
    trace = load_trace(args.trace)
    allow = read_allowlist(args.allowlist)
    depth = args.depth
    if depth is None:
        if args.graph:
            g = load_graph(args.graph)
            depth = compute_context_depth(partition_subgraph(g, [g.index(n) for n in allow if n in g]))
        else:
            depth = 1
    cmap = CoverageMap(frozenset(allow), depth)
    bitmap = Path(args.bitmap) if args.bitmap else None
    if bitmap is not None and bitmap.exists():
        cmap.load(bitmap.read_bytes())
    result = replay(trace, cmap)
    if bitmap is not None:
        bitmap.write_bytes(cmap.dump())
    print(f"new_bits={result.new_bits} retain={'true' if retain_decision(result) else 'false'} depth={depth}")
    return 0


def cmd_campaign(args) -> int:
    if args.k < 2:
        raise CliError("invalid-k", "--k counts the monitor too and must be >= 2")
    out = Path(args.out)
    cfg = CampaignConfig(
        k_total=args.k, interval=args.interval, warmup=args.warmup, duration=args.duration, algo=args.algo,
        rng_seed=args.seed, graph_path=Path(args.graph), out_dir=out,
    )
    if args.backend == "sim":
        from .simharness import SimBackend

        doc = json.loads(Path(args.graph).read_text(encoding="utf-8"))
        backend = SimBackend(SimProgram.from_document(doc), args.seed)
        corpus = backend.initial_corpus()
    else:
        from .exec_backend import ExecBackend, load_corpus

        if not (args.fuzz_cmd and args.profile_cmd and args.coverage_cmd):
            raise CliError("missing-command", "--backend exec needs --fuzz-cmd, --profile-cmd and --coverage-cmd")
        if not args.corpus:
            raise CliError("missing-corpus", "--backend exec needs --corpus")
        backend = ExecBackend(out, args.fuzz_cmd, args.profile_cmd, args.coverage_cmd, args.function_list)
        corpus = load_corpus(args.corpus)
    report = run_campaign(cfg, backend, corpus)
    print(f"cycles={len(report.cycles)} queue={report.queue_size} union={report.final_union()} "
          f"partition_seconds={report.partition_seconds:.9g}")
    return 0


def cmd_simulate(args) -> int:
    program = generate_program(args.n, args.exponent, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    program.save(out / "program.json")
    cfg = SimConfig(k=args.k, ticks=args.ticks, interval_ticks=args.interval_ticks, algo=args.algo, rng_seed=args.seed)
    modes = ("partitioned", "shared") if args.mode == "both" else (args.mode,)
    report = run_comparison(program, cfg, modes)
    report.write(out)
    for mode, rep in report.reports.items():
        ov = rep.mean_overlap()
        print(f"mode={mode} union={rep.final_union()} overlap={'na' if ov is None else f'{ov:.9g}'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fuzzpart", description="Call-graph task partitioning for parallel fuzzing.")
    parser.add_argument("--config", help="JSON file with default values for any option")
    parser.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    parser.add_argument("--out", default=".", help="output directory (default .)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    # the same global options are accepted after the subcommand name too
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def scored(p):
        p.add_argument("--graph", required=True, help="graph file (JSON: entry, functions, edges)")
        p.add_argument("--coverage", help="TSV: function, covered, total[, covered_pre, stagnation]")
        p.add_argument("--epsilon", type=float, default=EPSILON)

    p = sub.add_parser("score", parents=[common], help="print the function score table as TSV")
    scored(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("partition", parents=[common], help="partition the graph and write one allowlist per partition")
    scored(p)
    p.add_argument("--algo", choices=ALGORITHMS, default="fennel")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--gamma", type=float, default=FENNEL_GAMMA)
    p.add_argument("--slack", type=float, default=FENNEL_SLACK)
    p.add_argument("--lambda", dest="lam", type=float, default=HDRF_LAMBDA)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("replay", parents=[common], help="replay a trace against an allowlist and report the retention decision")
    p.add_argument("--trace", required=True, help="trace file: 'E f', 'X f', 'B f <block>' lines")
    p.add_argument("--allowlist", required=True)
    p.add_argument("--depth", type=int, help="call-chain context depth (default: from --graph, else 1)")
    p.add_argument("--graph", help="graph file used to derive the depth from the allowlisted subgraph")
    p.add_argument("--bitmap", help="8192-byte bitmap file to load (if present) and update")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("campaign", parents=[common], help="run the periodic repartitioning loop")
    p.add_argument("--graph", required=True)
    p.add_argument("--corpus", help="initial seed directory (exec backend)")
    p.add_argument("--k", type=int, default=5, help="instances including the monitor")
    p.add_argument("--interval", type=int, default=7200, help="seconds (exec) or ticks (sim)")
    p.add_argument("--warmup", type=int, default=3600)
    p.add_argument("--duration", type=int, default=86400)
    p.add_argument("--algo", choices=ALGORITHMS, default="fennel")
    p.add_argument("--backend", choices=("sim", "exec"), default="sim")
    p.add_argument("--fuzz-cmd", help="worker command template ({seed}, {allowlist}, {dir})")
    p.add_argument("--profile-cmd", help="prints the call trace of {seed}")
    p.add_argument("--coverage-cmd", help="prints 'function<TAB>covered<TAB>total' for {seed}")
    p.add_argument("--function-list", help="file listing every function with at least one basic block")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("simulate", parents=[common], help="compare partitioned and shared fuzzing on a synthetic program")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--exponent", type=float, default=2.5)
    p.add_argument("--k", type=int, default=4, help="fuzzing workers (monitor excluded)")
    p.add_argument("--ticks", type=int, default=50_000)
    p.add_argument("--interval-ticks", type=int, default=10_000)
    p.add_argument("--algo", choices=ALGORITHMS, default="fennel")
    p.add_argument("--mode", choices=("partitioned", "shared", "both"), default="both")
    p.set_defaults(func=cmd_simulate)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError("io-error", f"{known.config}: {exc.strerror}", 2) from exc
    except json.JSONDecodeError as exc:
        raise CliError("invalid-config", f"{known.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise CliError("invalid-config", "config must be a JSON object")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    parser.set_defaults(**values)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**values)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            raise CliError("usage", "a subcommand is required")
        logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        code, msg, status = exc.code, str(exc), exc.status
    except (GraphError, TraceError, ScoringError, PartitionError, SimError, CampaignError, ValueError) as exc:
        if isinstance(exc.__cause__, OSError):
            code, msg, status = "io-error", str(exc), 2
        else:
            code, msg, status = "invalid-input", str(exc), 1
    except OSError as exc:
        code, msg, status = "io-error", f"{exc.filename or ''}: {exc.strerror or exc}", 2
    print(f"error: {code}: {' '.join(msg.split())}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
