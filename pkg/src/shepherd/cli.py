"""``shep``: command-line front end for the rewriting pipeline.

Exit codes: 0 success, 1 unreadable or malformed input, 2 analysis error,
3 rewrite phase error, 4 verification divergence, 5 attack outcome differs
from the scenario's expectation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from .analyzer import analyze, graph_json, load_symbols
from .corpus import generate, spec_for_index
from .emulator.sandbox import ProgramInputs, run_equivalence
from .emulator.scenarios import ScenarioSetupError, load_scenario, run_scenario
from .monitor import PolicyConfig, Reaction
from .pe import PeError, emit_pe, parse_pe
from .rewriter import RewriteError, RewriteOptions, RewriteReport, rewrite_image

log = logging.getLogger("shep")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_ANALYSIS = 2
EXIT_REWRITE = 3
EXIT_DIVERGENCE = 4
EXIT_OUTCOME = 5

BENCH_COLUMNS = ("file",) + RewriteReport.FIELDS
TIMING_COLUMNS = ("t_disasm", "t_basicblock", "t_int", "memory_peak")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_image(path: str):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc.strerror}") from None
    try:
        return parse_pe(data)
    except PeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def _read_symbols(path: str | None):
    if path is None:
        return None
    try:
        return load_symbols(path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def _policy(args) -> PolicyConfig:
    return PolicyConfig(
        reaction=Reaction.LOG_CONTINUE,
        log_path=os.environ.get("SHEP_LOG") or None,
        strict_writable_deny=getattr(args, "strict_writable_deny", False),
    )


def format_report(report: RewriteReport, fmt: str, name: str | None = None) -> str:
    if fmt == "json":
        doc = asdict(report)
        if name is not None:
            doc = {"file": name, **doc}
        return json.dumps(doc, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS if name is not None else RewriteReport.FIELDS)
    writer.writerow(([name] if name is not None else []) + _csv_values(report))
    return buf.getvalue()


def _csv_values(report: RewriteReport) -> list:
    return [f"{v:.6f}" if isinstance(v, float) else v for v in report.row()]


# -- commands -------------------------------------------------------------------


def cmd_analyze(args) -> int:
    image = _read_image(args.path)
    symbols = _read_symbols(args.sym)
    try:
        graph = analyze(image, symbols)
    except Exception as exc:  # any analyzer failure maps to one exit code
        raise CliError(EXIT_ANALYSIS, f"analysis failed: {exc}") from exc
    text = graph_json(graph) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_rewrite(args) -> int:
    image = _read_image(args.path)
    options = RewriteOptions(instrument_direct_calls=args.instrument_direct_calls, symbols=_read_symbols(args.sym))
    try:
        result = rewrite_image(image, options)
    except RewriteError as exc:
        raise CliError(EXIT_REWRITE, f"rewrite failed: {exc}") from exc
    out = args.out or str(Path(args.path).with_suffix(".shep" + Path(args.path).suffix))
    Path(out).write_bytes(emit_pe(result.image))
    sys.stderr.write(format_report(result.report, args.report))
    return EXIT_OK


def cmd_verify(args) -> int:
    original = _read_image(args.original)
    rewritten = _read_image(args.rewritten)
    inputs_path = args.inputs or str(Path(args.original).with_suffix(".json"))
    try:
        inputs = ProgramInputs.from_json(json.loads(Path(inputs_path).read_text()))
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {inputs_path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"{inputs_path}: malformed inputs: {exc}") from None
    report = run_equivalence(original, rewritten, inputs, config=_policy(args))
    for d in report.divergences:
        print(f"DIVERGENCE vector={d.vector_index} step={d.step} {d.reason}")
    print(f"runs={report.runs} divergences={len(report.divergences)} denials={report.denials}")
    return EXIT_OK if report.ok else EXIT_DIVERGENCE


def cmd_attack(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {args.scenario}: {exc.strerror}") from None
    except ScenarioSetupError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    try:
        result = run_scenario(
            scenario,
            log_path=os.environ.get("SHEP_LOG") or None,
            strict_writable_deny=args.strict_writable_deny,
        )
    except ScenarioSetupError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    print(result.line())
    return EXIT_OK if result.matches else EXIT_OUTCOME


def bench_file(path: str, instrument_direct_calls: bool = False) -> list:
    image = parse_pe(Path(path).read_bytes())
    report = rewrite_image(image, RewriteOptions(instrument_direct_calls=instrument_direct_calls)).report
    return [Path(path).name] + _csv_values(report)


def corpus_files(directory: str) -> list[str]:
    root = Path(directory)
    if not root.is_dir():
        raise CliError(EXIT_INPUT, f"not a directory: {directory}")
    return sorted(str(p) for p in root.glob("*.sys") if not p.name.endswith(".shep.sys"))


def cmd_bench(args) -> int:
    files = corpus_files(args.corpus_dir)
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                rows = list(pool.map(bench_file, files, [args.instrument_direct_calls] * len(files)))
        else:
            rows = [bench_file(f, args.instrument_direct_calls) for f in files]
    except PeError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    except RewriteError as exc:
        raise CliError(EXIT_REWRITE, str(exc)) from None
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    total_insns = sum(int(r[BENCH_COLUMNS.index("instructions")]) for r in rows)
    total_time = sum(float(r[BENCH_COLUMNS.index("t_disasm")]) for r in rows)
    if total_time > 0:
        log.info("disassembly throughput %.0f instructions/s", total_insns / total_time)
    return EXIT_OK


def cmd_gen(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for index in range(args.seed - 1, args.seed - 1 + args.count):
        g = generate(spec_for_index(index))
        (out / f"{g.name}.sys").write_bytes(g.image)
        (out / f"{g.name}.json").write_text(g.ground_truth_json() + "\n")
        (out / f"{g.name}.sym").write_text(g.symbols)
        print(out / f"{g.name}.sys")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shep", description="Static control-transfer instrumentation for PE32 drivers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="recover the code graph as JSON")
    p.add_argument("path")
    p.add_argument("--sym", help="symbol sidecar (rva kind name per line)")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rewrite", help="instrument a driver image")
    p.add_argument("path")
    p.add_argument("-o", "--out", help="output path (default: NAME.shep.sys)")
    p.add_argument("--report", choices=("csv", "json"), default="csv", help="report format on stderr")
    p.add_argument("--sym")
    p.add_argument("--instrument-direct-calls", action="store_true")
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("verify", help="compare original and rewritten behaviour")
    p.add_argument("original")
    p.add_argument("rewritten")
    p.add_argument("--inputs", help="ground-truth JSON with input vectors (default: ORIGINAL.json)")
    p.add_argument("--strict-writable-deny", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="run an attack scenario")
    p.add_argument("scenario")
    p.add_argument("--strict-writable-deny", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bench", help="rewrite every *.sys in a directory and print the metrics table")
    p.add_argument("corpus_dir")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--instrument-direct-calls", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen", help="write corpus programs with ground truth and symbols")
    p.add_argument("--seed", type=int, default=1, help="first seed")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"shep: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
