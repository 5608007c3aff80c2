"""Command-line entry point: ``slmsearch <subcommand> ...``.

Machine-readable output goes to stdout (or ``--out``); logs go to stderr.

Exit codes: 0 success, 2 usage error, 3 missing input file, 4 invalid
config or input document, 5 a validation failed (e.g. an audit bound),
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from slmsearch import bench, engine, funcall, quantkit, weights_io
from slmsearch.archspace import (
    ArchConfig,
    SearchSpace,
    candidate_row,
    candidates_to_csv,
    count_params,
    enumerate_candidates,
)

log = logging.getLogger("slmsearch")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_BAD_INPUT, EXIT_FAILED = 0, 1, 2, 3, 4, 5


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is at emit time (keeps working under redirection)."""

    def emit(self, record):
        self.stream = sys.stderr
        super().emit(record)


def _setup_logging(verbose: int) -> None:
    log.handlers[:] = [h for h in log.handlers if not isinstance(h, _StderrHandler)]
    handler = _StderrHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.WARNING - 10 * min(verbose, 2))
    log.propagate = False


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_json(path: str | None) -> dict:
    if path is None:
        raise CliError("--config is required", EXIT_USAGE)
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}", EXIT_MISSING)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"cannot parse {path}: {exc}", EXIT_BAD_INPUT) from exc
    if not isinstance(doc, dict) or not doc:
        raise CliError(f"{path} must hold a nonempty JSON object", EXIT_BAD_INPUT)
    return doc


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _arch_from_args(args) -> ArchConfig:
    if args.config:
        doc = _read_json(args.config)
        doc = doc.get("model", doc)
        return ArchConfig.from_dict(doc)
    if args.hidden is None or args.intermediate is None or args.layers is None:
        raise CliError("give --config or all of --hidden/--intermediate/--layers", EXIT_USAGE)
    return ArchConfig(args.hidden, args.intermediate, args.layers, args.heads,
                      args.kv_heads if args.kv_heads is not None else args.heads,
                      args.activation, args.vocab_size, args.context_len, args.rope_theta)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return engine.default_threads()


def _plan(args, doc: dict | None = None) -> bench.BenchmarkPlan:
    base = dict((doc or {}).get("plan", {}))
    if args.prompt_lens:
        base["prompt_lengths"] = [int(x) for x in args.prompt_lens.split(",") if x.strip()]
    for flag, key in (("gen_tokens", "gen_tokens"), ("repeats", "repeats"),
                      ("warmup", "warmup_runs"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            base[key] = getattr(args, flag)
    base["threads"] = _threads(args)
    try:
        return bench.BenchmarkPlan(**base)
    except TypeError as exc:
        raise CliError(f"bad plan: {exc}", EXIT_BAD_INPUT) from exc


def _ranking(args) -> bench.Ranking:
    weight = args.weight if args.ranking == "weighted" else None
    if args.ranking == "weighted" and weight is None:
        weight = 0.5
    return bench.Ranking(args.ranking, weight, args.rank_prompt_len)


# ---------------------------------------------------------------- commands


def cmd_count_params(args) -> int:
    cfg = _arch_from_args(args)
    n = count_params(cfg)
    if args.format == "json":
        _emit(json.dumps({"params": n}) + "\n", args.out)
    else:
        _emit(f"{n}\n", args.out)
    return EXIT_OK


def cmd_enumerate(args) -> int:
    space = SearchSpace.from_json(_read_json(args.config))
    configs = enumerate_candidates(space, solve_intermediate=args.solve_intermediate)
    log.info("%d candidates", len(configs))
    if args.format == "json":
        _emit(json.dumps([candidate_row(c) for c in configs], indent=1) + "\n", args.out)
    else:
        _emit(candidates_to_csv(configs), args.out)
    return EXIT_OK


def _report_text(report: bench.ThroughputReport, fmt: str) -> str:
    rows = report.summary()
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=1) + "\n"
    cols = ["prompt_len", "prefill_tps_mean", "prefill_tps_std", "decode_tps_mean",
            "decode_tps_std", "runs", "prefill_tokens", "decode_tokens"]
    if fmt == "md":
        lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        lines += ["| " + " | ".join(bench._fmt(r[c]) for c in cols) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    if args.weights:
        if not Path(args.weights).is_file():
            raise CliError(f"weights file not found: {args.weights}", EXIT_MISSING)
        model = weights_io.load(args.weights)
        doc = None
    else:
        doc = _read_json(args.config) if args.config else None
        cfg = _arch_from_args(args)
        model = engine.init_random_weights(cfg, args.seed or 0, args.precision)
    plan = _plan(args, doc)
    report = bench.run_benchmark(model, plan)
    _emit(_report_text(report, args.format), args.out)
    return EXIT_OK


def cmd_search(args) -> int:
    ranking = _ranking(args)
    if args.from_raw:
        if not Path(args.from_raw).is_file():
            raise CliError(f"raw timings file not found: {args.from_raw}", EXIT_MISSING)
        raw = bench.RawSearchTimings.loads(Path(args.from_raw).read_text())
        result = bench.rank_timings(raw, ranking)
    else:
        doc = _read_json(args.config)
        space = SearchSpace.from_json(doc)
        plan = _plan(args, doc)
        result, raw = bench.run_search(space, plan, ranking, precision=args.precision,
                                       solve_intermediate=args.solve_intermediate)
        if args.raw_timings:
            Path(args.raw_timings).write_text(raw.dumps())
            log.info("raw timings saved to %s", args.raw_timings)
    text = bench.render_report(result, args.format)
    if args.format == "json":
        bench.validate_report(json.loads(text))
    _emit(text, args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _arch_from_args(args)
    if args.kind == "rope":
        report = quantkit.rope_audit(cfg.context_len, cfg.head_dim, cfg.rope_theta)
    else:
        report = quantkit.q4_audit(engine.iter_random_matrices(cfg, args.seed or 0))
    report["config"] = cfg.to_dict()
    _emit(json.dumps(report, indent=1) + "\n", args.out)
    if not report["passed"]:
        log.error("%s audit failed", args.kind)
        return EXIT_FAILED
    return EXIT_OK


def cmd_funcall_eval(args) -> int:
    for p in (args.samples, args.outputs):
        if not Path(p).is_file():
            raise CliError(f"file not found: {p}", EXIT_MISSING)
    samples = funcall.load_samples(args.samples)
    outputs = funcall.load_outputs(args.outputs)
    if len(samples) != len(outputs):
        raise CliError(f"{len(outputs)} outputs for {len(samples)} samples", EXIT_BAD_INPUT)
    report = funcall.evaluate(outputs, samples, average=args.average)
    if args.format == "md":
        _emit(report.table(), args.out)
    else:
        _emit(json.dumps(report.to_dict(), indent=1) + "\n", args.out)
        sys.stderr.write(report.table())
    return EXIT_OK


def cmd_weights(args) -> int:
    if args.action == "dump":
        cfg = _arch_from_args(args)
        if not args.out:
            raise CliError("weights dump needs --out", EXIT_USAGE)
        model = engine.init_random_weights(cfg, args.seed or 0, args.precision)
        weights_io.save(model, args.out)
        log.info("wrote %s", args.out)
        return EXIT_OK
    if not args.path or not Path(args.path).is_file():
        raise CliError(f"weights file not found: {args.path}", EXIT_MISSING)
    info = weights_io.inspect(args.path)
    text = json.dumps(info, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("architecture (instead of --config)")
    g.add_argument("--hidden", type=int)
    g.add_argument("--intermediate", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int, default=16)
    g.add_argument("--kv-heads", type=int)
    g.add_argument("--activation", choices=("relu", "silu"), default="relu")
    g.add_argument("--vocab-size", type=int, default=49152)
    g.add_argument("--context-len", type=int, default=2048)
    g.add_argument("--rope-theta", type=float, default=10000.0)


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompt-lens", help="comma-separated prompt lengths")
    p.add_argument("--gen-tokens", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--precision", choices=engine.PRECISIONS, default="q4")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int,
                        help=f"worker threads (default ${engine.THREADS_ENV} or 4)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="slmsearch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", parents=[common], help="exact parameter count")
    _add_arch_flags(p)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("enumerate", parents=[common], help="list candidates in the budget window")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--solve-intermediate", action="store_true")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("bench", parents=[common], help="throughput of one configuration")
    _add_arch_flags(p)
    _add_plan_flags(p)
    p.add_argument("--weights", help="benchmark a saved weights file instead of random weights")
    p.add_argument("--format", choices=("csv", "json", "md"), default="json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("search", parents=[common], help="enumerate, benchmark and rank")
    _add_plan_flags(p)
    p.add_argument("--format", choices=("csv", "json", "md"), default="csv")
    p.add_argument("--ranking", choices=bench.RANKINGS, default="prefill")
    p.add_argument("--weight", type=float, help="prefill weight for --ranking weighted")
    p.add_argument("--rank-prompt-len", type=int, default=64)
    p.add_argument("--raw-timings", help="save per-repeat timings to this JSON file")
    p.add_argument("--from-raw", help="re-rank saved timings without measuring")
    p.add_argument("--solve-intermediate", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("audit", parents=[common], help="exhaustive quantization error audit")
    _add_arch_flags(p)
    p.add_argument("--kind", choices=("rope", "q4"), required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("funcall-eval", parents=[common], help="Accuracy / Soft Accuracy")
    p.add_argument("--samples", required=True, help="JSON-lines samples")
    p.add_argument("--outputs", required=True, help="model outputs (.jsonl or plain text)")
    p.add_argument("--format", choices=("json", "md"), default="json")
    p.add_argument("--average", choices=funcall.AVERAGING, default="sample")
    p.set_defaults(func=cmd_funcall_eval)

    p = sub.add_parser("weights", parents=[common], help="dump or inspect weights files")
    p.add_argument("action", choices=("dump", "inspect"))
    p.add_argument("path", nargs="?", help="file to inspect")
    _add_arch_flags(p)
    p.add_argument("--precision", choices=engine.PRECISIONS, default="q4")
    p.set_defaults(func=cmd_weights)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    # numba complains about an old TBB at first parallel launch; the omp/workqueue fallback is fine
    warnings.filterwarnings("ignore", message=".*TBB threading layer.*")
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except ValueError as exc:
        # ConfigError, BenchmarkError, WeightsFormatError and bad sample files
        log.error("%s", exc)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
