"""Command line front end: harden, verify, stats.

Exit codes are part of the contract: 0 success, 2 unusable input
(parse or validation), 3 hardening pipeline failure, 4 verification
found a difference.  Reports are JSON with sorted keys and carry no
timestamps, so identical work produces identical bytes.
"""

from __future__ import annotations

import argparse
import json
import sys

from .cfl import LinearizeError
from .dfl import DflError
from .interp import DEFAULT_BUDGET
from .ir import ParseError, parse_module, print_module, validate
from .normalize import NormalizeError
from .pipeline import (PipelineConfig, PipelineError, harden_module,
                       module_stats)
from .pta import CloneError, PtaError
from .taint import ProfileError
from .verify import SECRET_SPACE, verify_module

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PIPELINE = 3
EXIT_VERIFY = 4

_STAGE_ERRORS = (PipelineError, NormalizeError, ProfileError, PtaError,
                 CloneError, DflError, LinearizeError)


def _load(path: str):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        print("error: %s" % e, file=sys.stderr)
        return None
    try:
        m = parse_module(text)
    except ParseError as e:
        print("%s: %s" % (path, e), file=sys.stderr)
        return None
    diags = validate(m)
    if diags:
        for d in diags:
            print("%s: %s" % (path, d), file=sys.stderr)
        return None
    return m


def _write_report(report: dict, path: str | None):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _common_flags(p):
    p.add_argument("--entry", default="main",
                   help="entry function name (default main)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET,
                   help="instruction budget per run")
    p.add_argument("--report", metavar="FILE",
                   help="write the JSON report here instead of stdout")


def cmd_harden(args) -> int:
    m = _load(args.input)
    if m is None:
        return EXIT_INPUT
    cfg = PipelineConfig(
        lam=args.lam, scheme=args.select_scheme, entry=args.entry,
        seed=args.seed, budget=args.budget, suite_path=args.suite,
        cloning=not args.skip_cloning,
        promotion=not args.skip_promotion,
        natural=not args.skip_natural_striding)
    try:
        m, rep = harden_module(m, cfg)
    except _STAGE_ERRORS as e:
        print("hardening failed: %s" % e, file=sys.stderr)
        return EXIT_PIPELINE
    text = print_module(m)
    if args.emit and args.emit != "-":
        with open(args.emit, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    if args.report:
        _write_report(rep, args.report)
    return EXIT_OK


def cmd_verify(args) -> int:
    orig = _load(args.original)
    hard = _load(args.hardened)
    if orig is None or hard is None:
        return EXIT_INPUT
    verdicts = verify_module(orig, hard, entry=args.entry, lams=args.lam,
                             pairs=args.pairs, seed=args.seed,
                             space=args.space, budget=args.budget)
    for v in verdicts:
        print(v.line())
        for w in v.warnings:
            print("  warning: %s" % w)
    rep = {
        "passed": all(v.passed for v in verdicts),
        "checks": [{"check": v.check, "passed": v.passed,
                    "detail": v.detail, "warnings": v.warnings}
                   for v in verdicts],
    }
    if args.report:
        _write_report(rep, args.report)
    return EXIT_OK if rep["passed"] else EXIT_VERIFY


def cmd_stats(args) -> int:
    m = _load(args.module)
    if m is None:
        return EXIT_INPUT
    _write_report(module_stats(m), args.report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ctlin",
        description="linearize control and data flow against "
                    "microarchitectural leaks, then verify by trace")
    sub = ap.add_subparsers(dest="cmd", required=True)

    h = sub.add_parser("harden", help="run the full pipeline on a module")
    h.add_argument("input")
    h.add_argument("--emit", metavar="FILE",
                   help="write the hardened module here (default stdout)")
    h.add_argument("--lambda", dest="lam", type=int, default=64,
                   choices=(1, 4, 64),
                   help="obliviousness quantum in bytes (default 64)")
    h.add_argument("--select-scheme", type=int, default=5,
                   choices=range(1, 6),
                   help="branchless select lowering (default 5)")
    h.add_argument("--suite", metavar="FILE",
                   help="profiling inputs, one per line; default generated")
    h.add_argument("--skip-cloning", action="store_true")
    h.add_argument("--skip-natural-striding", action="store_true")
    h.add_argument("--skip-promotion", action="store_true")
    _common_flags(h)
    h.set_defaults(fn=cmd_harden)

    v = sub.add_parser("verify", help="differential checks on a pair")
    v.add_argument("original")
    v.add_argument("hardened")
    v.add_argument("--lambda", dest="lam", type=int, action="append",
                   help="extra verification quantum; may repeat")
    v.add_argument("--pairs", type=int, default=100,
                   help="secret pairs when not exhaustive (default 100)")
    v.add_argument("--space", type=int, default=SECRET_SPACE,
                   help="secret value space (default 2^16)")
    _common_flags(v)
    v.set_defaults(fn=cmd_verify)

    s = sub.add_parser("stats", help="shape summary of a hardened module")
    s.add_argument("module")
    _common_flags(s)
    s.set_defaults(fn=cmd_stats)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
