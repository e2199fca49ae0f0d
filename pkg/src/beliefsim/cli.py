"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 endpoint unreachable,
4 data error (bad trace file, empty alignment, too few traces, or too many
failed participant-rounds).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .beliefmetrics import (
    DEFAULT_KL_PSEUDOCOUNT,
    ComparisonOptions,
    MetricError,
    baseline_half_split,
    compare_cohorts,
)
from .config import ConfigError, audit_path, build_agent, build_plan, load_config
from .core import AlignmentError, Status, TraceError, load_cohort, save_cohort
from .engine import PlanError, RunConfig, run_cohort
from .llmagent import EndpointUnreachable
from .report import HIST_KINDS, export_histograms, fmt4, write_bundle

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENDPOINT = 3
EXIT_DATA = 4

log = logging.getLogger("beliefsim")


def _err(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.parallelism is not None:
            cfg.parallelism = args.parallelism
        if args.out is not None:
            cfg.output_path = Path(args.out)
        plan = build_plan(cfg)
        cfg.output_path.parent.mkdir(parents=True, exist_ok=True)
        audit = audit_path(cfg)
        audit.parent.mkdir(parents=True, exist_ok=True)
        audit.write_text("", encoding="utf-8")
        agent = build_agent(cfg, lenient=args.lenient_parse)
    except ConfigError as exc:
        return _err(str(exc), EXIT_CONFIG)
    except (TraceError, PlanError) as exc:
        return _err(str(exc), EXIT_DATA)

    label = cfg.label or cfg.output_path.stem
    run = RunConfig(parallelism=cfg.parallelism, seed=cfg.seed, rounds=cfg.rounds, label=label)
    try:
        cohort = run_cohort(agent, plan, run)
    except EndpointUnreachable as exc:
        return _err(f"endpoint unreachable: {exc}", EXIT_ENDPOINT)
    except PlanError as exc:
        return _err(str(exc), EXIT_DATA)
    finally:
        close = getattr(agent, "close", None)
        if close:
            close()

    save_cohort(cohort, cfg.output_path)
    complete = sum(1 for t in cohort if t.status is Status.COMPLETE)
    frac = complete / len(cohort) if len(cohort) else 0.0
    print(f"wrote {len(cohort)} traces to {cfg.output_path} ({complete} complete, {frac:.1%})")
    if frac < cfg.min_complete_fraction:
        return _err(
            f"only {frac:.1%} of traces complete (threshold {cfg.min_complete_fraction:.0%})",
            EXIT_DATA,
        )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        reference = load_cohort(args.reference, strict=args.strict_schema)
        subjects = [load_cohort(p, strict=args.strict_schema) for p in args.subject]
    except (OSError, TraceError) as exc:
        return _err(str(exc), EXIT_DATA)
    groups = args.group or []
    if groups and len(groups) != len(subjects):
        return _err("--group must be given once per --subject", EXIT_CONFIG)
    reports = []
    for i, subject in enumerate(subjects):
        opts = ComparisonOptions(
            kl_pseudocount=args.kl_pseudocount, group=groups[i] if groups else None
        )
        try:
            reports.append(compare_cohorts(subject, reference, opts))
        except AlignmentError as exc:
            return _err(f"{subject.label} vs {reference.label}: {exc}", EXIT_DATA)
    meta = {
        "reference": Path(args.reference).name,
        "subjects": [Path(p).name for p in args.subject],
        "kl_pseudocount": args.kl_pseudocount,
        "log_base": "e",
        "seed": args.seed,
    }
    bundle = write_bundle(reports, args.out, cohorts=[reference, *subjects], meta=meta)
    print((Path(args.out) / "report.txt").read_text(encoding="utf-8"), end="")
    for fmt, msg in bundle.errors.items():
        print(f"error: format {fmt}: {msg}", file=sys.stderr)
    return EXIT_DATA if bundle.errors else EXIT_OK


def cmd_baseline(args) -> int:
    try:
        cohort = load_cohort(args.cohort, strict=args.strict_schema)
    except (OSError, TraceError) as exc:
        return _err(str(exc), EXIT_DATA)
    if args.seeds < 1:
        return _err("--seeds must be positive", EXIT_CONFIG)
    start = args.seed if args.seed is not None else 0
    rows = []
    try:
        for seed in range(start, start + args.seeds):
            rows.append((seed, *baseline_half_split(cohort, seed, args.kl_pseudocount)))
    except MetricError as exc:
        return _err(str(exc), EXIT_DATA)
    kl_mean = math.fsum(r[1] for r in rows) / len(rows)
    w_mean = math.fsum(r[2] for r in rows) / len(rows)
    lines = ["seed,kl,wasserstein"]
    lines += [f"{s},{fmt4(kl)},{fmt4(w)}" for s, kl, w in rows]
    lines.append(f"mean,{fmt4(kl_mean)},{fmt4(w_mean)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        cohorts = [load_cohort(p, strict=args.strict_schema) for p in args.subject]
    except (OSError, TraceError) as exc:
        return _err(str(exc), EXIT_DATA)
    kinds = HIST_KINDS if args.which == "all" else (args.which,)
    try:
        for which in kinds:
            for p in export_histograms(cohorts, which, args.out):
                print(p)
    except ValueError as exc:
        return _err(str(exc), EXIT_DATA)
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        cohort = load_cohort(args.path, strict=args.strict_schema)
    except OSError as exc:
        return _err(str(exc), EXIT_DATA)
    except TraceError as exc:
        return _err(str(exc), EXIT_DATA)
    counts = {s.value: 0 for s in Status}
    for t in cohort:
        counts[t.status.value] += 1
    summary = ", ".join(f"{k}={v}" for k, v in counts.items())
    print(f"ok: {len(cohort)} traces ({summary})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beliefsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--strict-schema", action="store_true", help="reject unknown trace fields")

    p = sub.add_parser("simulate", help="run an agent over a stimulus plan")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output_path from the config")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--lenient-parse", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="compare subject cohorts against a reference cohort")
    common(p)
    p.add_argument("--subject", action="append", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--group", action="append", help="model-type group per --subject")
    p.add_argument("--out", required=True)
    p.add_argument("--kl-pseudocount", type=float, default=DEFAULT_KL_PSEUDOCOUNT)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="random half-split divergence of one cohort")
    common(p)
    p.add_argument("cohort")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--kl-pseudocount", type=float, default=DEFAULT_KL_PSEUDOCOUNT)
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("export", help="write histogram CSVs for figure reproduction")
    common(p)
    p.add_argument("--subject", action="append", required=True)
    p.add_argument("--which", choices=(*HIST_KINDS, "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("validate", help="schema-check a trace file")
    common(p)
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
