"""Command-line front end.

Exit codes: 0 when the command ran and found nothing to report, 2 when
leaks (SAT or ⊤ accesses) were found, 1 on any error or soundness violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from . import __version__, ir
from .absint import AnalysisOptions, AnalysisResult, run_worklist
from .checker import (
    DEFAULT_ENUM_BUDGET,
    DEFAULT_EXHAUSTIVE_CAP,
    DEFAULT_LINE_BITS,
    CheckOptions,
    Outcome,
    SiteVerdict,
    check_sites,
    emit_smtlib,
    site_constraints,
)
from .domain import DEFAULT_BOUND
from .oracle import SecretAssignment, check_soundness, crun

log = logging.getLogger("sasleak")

SCHEMA = 1
EXIT_OK, EXIT_ERROR, EXIT_LEAK = 0, 1, 2


@dataclass
class Config:
    width: int = ir.DEFAULT_WIDTH
    line_bits: int = DEFAULT_LINE_BITS
    bound: int = DEFAULT_BOUND
    check_branches: bool = True
    exhaustive_cap_bits: int = DEFAULT_EXHAUSTIVE_CAP
    enum_budget: int = DEFAULT_ENUM_BUDGET
    seed: int = 0
    oracle_runs: int = 100
    call_depth_budget: int = 8
    iteration_budget: int = 200_000

    def validate(self) -> None:
        if not 0 <= self.line_bits < self.width:
            raise ValueError(f"--line-bits must be in [0, {self.width})")
        if self.bound < 1:
            raise ValueError("--bound must be at least 1")
        if not 1 <= self.width <= 32:
            raise ValueError("--width must be in [1, 32]")

    @property
    def analysis(self) -> AnalysisOptions:
        return AnalysisOptions(self.bound, self.call_depth_budget, self.iteration_budget)

    @property
    def check(self) -> CheckOptions:
        return CheckOptions(self.line_bits, self.check_branches, self.enum_budget, self.exhaustive_cap_bits, self.seed)


# --------------------------------------------------------------------------
# Corpus
# --------------------------------------------------------------------------


def corpus_dir() -> Path:
    return Path(str(resources.files("sasleak") / "corpus"))


def corpus_index() -> list[dict]:
    return json.loads((corpus_dir() / "index.json").read_text(encoding="utf-8"))


def resolve_path(name: str) -> Path:
    """A file path, or the name of a bundled fixture."""
    path = Path(name)
    if path.exists():
        return path
    bundled = corpus_dir() / f"{name.removesuffix('.sir')}.sir"
    if bundled.exists():
        return bundled
    raise FileNotFoundError(name)


def load_program(path: Path, width: int) -> ir.Program:
    return ir.parse_program(path.read_text(encoding="utf-8"), width=width)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def build_report(name: str, config: Config, result: AnalysisResult, verdicts: list[SiteVerdict], dump_states: bool = False) -> dict:
    counts: dict[str, int] = {}
    for v in verdicts:
        counts[v.outcome.value] = counts.get(v.outcome.value, 0) + 1
    analysis = result.to_json(dump_states)
    report = {
        "schema": SCHEMA,
        "program": name,
        "config": asdict(config),
        "termination": analysis["termination"],
        "inconclusive": analysis["inconclusive"],
        "verdicts": [v.to_json() for v in verdicts],
        "summary": dict(sorted(counts.items())),
        "stats": analysis["stats"],
        "annotated_secrets": analysis["annotated_secrets"],
    }
    if dump_states:
        report["states"] = analysis["states"]
    return report


def dumps(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def leaks_found(verdicts: list[SiteVerdict]) -> bool:
    return any(v.outcome in (Outcome.SAT, Outcome.TOP_ACCESS) for v in verdicts)


def cmd_analyze(path: str | Path, config: Config, dump_states: bool = False) -> tuple[dict, int]:
    config.validate()
    path = resolve_path(str(path))
    program = load_program(path, config.width)
    result = run_worklist(program, config.analysis)
    verdicts = check_sites(result.sites, program.width, config.check)
    report = build_report(path.stem, config, result, verdicts, dump_states)
    return report, EXIT_LEAK if leaks_found(verdicts) else EXIT_OK


def format_pretty(report: dict) -> str:
    lines = [f"program {report['program']}  (W={report['config']['width']}, L={report['config']['line_bits']}, N={report['config']['bound']})"]
    term = report["termination"]
    if term:
        lines.append(f"  analysis terminated at pc {term['pc']}: {term['cause']}")
    if not report["verdicts"]:
        lines.append("  no secret-dependent sites")
    for v in report["verdicts"]:
        lines.append(f"  pc {v['pc']:>4}  {v['kind']:<9} {v['verdict']}")
        for f in v["formulas"]:
            extra = ""
            if "witness" in f:
                extra = "  witness " + " ".join(f"{k}={val:#x}" for k, val in sorted(f["witness"].items()))
            elif "reason" in f:
                extra = f"  ({f['reason']})"
            lines.append(f"           {f['formula']}: {f['verdict']}{extra}")
    stats = report["stats"]
    lines.append("  " + ", ".join(f"{k}={stats[k]}" for k in sorted(stats)))
    return "\n".join(lines) + "\n"


def cmd_oracle(path: str | Path, config: Config) -> tuple[dict, int]:
    config.validate()
    path = resolve_path(str(path))
    program = load_program(path, config.width)
    result = run_worklist(program, config.analysis)
    report = check_soundness(program, result, runs=config.oracle_runs, seed=config.seed)
    out = {"schema": SCHEMA, "program": path.stem, "config": asdict(config), **report.to_json()}
    return out, EXIT_OK if report.ok else EXIT_ERROR


def cmd_emit_smt(path: str | Path, config: Config, outdir: str | Path) -> tuple[list[Path], int]:
    config.validate()
    path = resolve_path(str(path))
    program = load_program(path, config.width)
    result = run_worklist(program, config.analysis)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for site in result.sites:
        constraints = site_constraints(site, program.width, config.check)
        if not constraints:
            continue
        target = outdir / f"site_{site.pc}_{site.kind}.smt2"
        comment = f"{path.stem} pc {site.pc} {site.kind}"
        target.write_text(emit_smtlib(constraints, comment), encoding="utf-8")
        written.append(target)
    return written, EXIT_OK


def cmd_corpus_list() -> list[dict]:
    return corpus_index()


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=ir.DEFAULT_WIDTH, help="machine word width W (default 32)")
    p.add_argument("--line-bits", type=int, default=DEFAULT_LINE_BITS, help="cache line bits L (6 = 64-byte lines, 2 = banks)")
    p.add_argument("--bound", type=int, default=DEFAULT_BOUND, help="value-set bound N (default 50)")
    p.add_argument("--no-branches", action="store_true", help="skip branch-condition checks")
    p.add_argument("--enum-budget", type=int, default=DEFAULT_ENUM_BUDGET, help="sampled candidates per constraint")
    p.add_argument("--exhaustive-cap", type=int, default=DEFAULT_EXHAUSTIVE_CAP, help="max variable bits for full enumeration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle-runs", type=int, default=100)


def _config(args: argparse.Namespace) -> Config:
    return Config(
        width=args.width,
        line_bits=args.line_bits,
        bound=args.bound,
        check_branches=not args.no_branches,
        exhaustive_cap_bits=args.exhaustive_cap,
        enum_budget=args.enum_budget,
        seed=args.seed,
        oracle_runs=args.oracle_runs,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sasleak", description="Cache side-channel leak detection by abstract interpretation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analyze a program and check every flagged site")
    p.add_argument("path", help="IR file or bundled fixture name")
    _add_config_flags(p)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--pretty", action="store_true", help="human-readable output")
    p.add_argument("--dump-states", action="store_true", help="include per-pc abstract states")

    p = sub.add_parser("oracle", help="differential soundness check against concrete runs")
    p.add_argument("path")
    _add_config_flags(p)
    p.add_argument("--out")
    p.add_argument("--secrets", help="JSON secret assignment for a single traced run")
    p.add_argument("--trace", action="store_true", help="print the concrete trace (with --secrets)")

    p = sub.add_parser("emit-smt", help="write one SMT-LIB script per secret-dependent site")
    p.add_argument("path")
    _add_config_flags(p)
    p.add_argument("--out", default="smt", help="output directory (default ./smt)")

    p = sub.add_parser("corpus", help="list the bundled fixtures")
    p.add_argument("--json", action="store_true")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _setup_logging() -> None:
    level = os.environ.get("SAS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        return _dispatch(args)
    except ir.IRError as exc:
        for diag in exc.diagnostics:
            print(f"{args.path}:{diag}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"sasleak: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "corpus":
        entries = cmd_corpus_list()
        if args.json:
            sys.stdout.write(dumps(entries))
        else:
            for e in entries:
                print(f"{e['name']:<24} {e['expected']}")
                print(f"{'':<24} {e['description']}; analogue: {e['analogue']}")
        return EXIT_OK

    config = _config(args)
    if args.command == "analyze":
        report, code = cmd_analyze(args.path, config, args.dump_states)
        _emit(format_pretty(report) if args.pretty else dumps(report), args.out)
        return code

    if args.command == "oracle":
        if args.secrets:
            return _single_run(args, config)
        if config.oracle_runs == 0:
            log.warning("--oracle-runs 0: nothing is checked")
        report, code = cmd_oracle(args.path, config)
        _emit(dumps(report), args.out)
        for v in report["violations"]:
            print(f"violation: {v}", file=sys.stderr)
        return code

    files, code = cmd_emit_smt(args.path, config, args.out)
    if not files:
        print("no secret-dependent sites; nothing written")
    for f in files:
        print(f)
    return code


def _single_run(args: argparse.Namespace, config: Config) -> int:
    config.validate()
    program = load_program(resolve_path(args.path), config.width)
    secrets = SecretAssignment.from_json(json.loads(Path(args.secrets).read_text(encoding="utf-8")))
    trace = crun(program, secrets, seed=config.seed)
    if args.trace:
        _emit(trace.dump() + "\n", args.out)
    print(f"{trace.status.value} after {len(trace)} steps" + (f": {trace.fault}" if trace.fault else ""), file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
