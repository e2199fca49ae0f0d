"""Table emitters, histogram exports and the on-disk report bundle.

Every displayed number is formatted once, to 4 decimals with ``.`` as the
decimal separator, and the same string goes to the CSV and the text table.
CSV files carry the full-precision value in a parallel ``*_full`` column.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from .beliefmetrics import MetricReport, NotComputable, belief_network_distance, follow_signal
from .core import LIKERT_VALUES, Cohort, Status
from .stats import TestResult

NA = "N/A"


def significance_stars(p: float) -> str:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p-value outside (0, 1]: {p}")
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def fmt4(x: float) -> str:
    return f"{x:.4f}"


@dataclass
class Cell:
    text: str
    value: float | None = None

    @classmethod
    def na(cls):
        return cls(NA)


def _num(x) -> Cell:
    if isinstance(x, NotComputable) or x is None:
        return Cell.na()
    return Cell(fmt4(x), x)


def _p(test) -> Cell:
    if isinstance(test, NotComputable) or test is None:
        return Cell.na()
    return Cell(fmt4(test.p_value) + significance_stars(test.p_value), test.p_value)


def _corr(corr) -> Cell:
    if isinstance(corr, NotComputable):
        return Cell.na()
    rho, test = corr
    return Cell(fmt4(rho) + significance_stars(test.p_value), rho)


def _mean_sd(ms) -> Cell:
    if isinstance(ms, NotComputable):
        return Cell.na()
    mean, sd = ms
    return Cell(f"{fmt4(mean)} (sd: {fmt4(sd)})", mean)


def _part(ms, i: int) -> Cell:
    return Cell.na() if isinstance(ms, NotComputable) else _num(ms[i])


@dataclass
class Table:
    name: str
    title: str
    columns: list[str]
    averaged: list[bool]
    rows: list[list[Cell]] = field(default_factory=list)
    # (model type, model) per row
    labels: list[tuple[str, str]] = field(default_factory=list)

    def display_rows(self) -> list[list[str]]:
        return [[t, m] + [c.text for c in row] for (t, m), row in zip(self.labels, self.rows)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["model_type", "model"]
        for col in self.columns:
            header += [col, f"{col}_full"]
        w.writerow(header)
        for (t, m), row in zip(self.labels, self.rows):
            out = [t, m]
            for c in row:
                out += [c.text, "" if c.value is None else repr(float(c.value))]
            w.writerow(out)
        return buf.getvalue()

    def to_text(self) -> str:
        header = ["Model Type", "Model"] + self.columns
        body = self.display_rows()
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

        def line(cells):
            return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

        rule = "-+-".join("-" * w for w in widths)
        out = [self.title, line(header), rule]
        out += [line(r) for r in body]
        return "\n".join(out) + "\n"


def _build(name, title, columns, averaged, reports, row_fn) -> Table:
    if not reports:
        raise ValueError("no reports to tabulate")
    table = Table(name, title, columns, averaged)
    groups: dict[str, list[MetricReport]] = {}
    for r in reports:
        groups.setdefault(r.group or "", []).append(r)
    for group, members in groups.items():
        rows = [row_fn(r) for r in members]
        for r, row in zip(members, rows):
            table.rows.append(row)
            table.labels.append((group, r.subject))
        if len(members) >= 2:
            avg = []
            for i, flag in enumerate(averaged):
                vals = [row[i].value for row in rows if row[i].value is not None]
                if not flag:
                    avg.append(Cell(""))
                elif not vals:
                    avg.append(Cell.na())
                else:
                    mean = math.fsum(vals) / len(vals)
                    avg.append(Cell(fmt4(mean), mean))
            table.rows.append(avg)
            table.labels.append((group, "Average"))
    return table


def emit_stage1_table(reports: Sequence[MetricReport]) -> Table:
    def row(r):
        s = r.stage1
        return [_num(s.kl), _num(s.wasserstein), _p(s.mwu)]

    return _build(
        "stage1",
        "Stage 1: initial belief distributions",
        ["KL Divergence", "Wasserstein Dist", "Mann-Whitney U p-value"],
        [True, True, False],
        reports,
        row,
    )


def emit_mean_std_table(reports: Sequence[MetricReport]) -> Table:
    def row(r):
        s = r.stage1
        return [
            _part(s.subject_mean_std, 0),
            _part(s.subject_mean_std, 1),
            _part(s.reference_mean_std, 0),
            _part(s.reference_mean_std, 1),
        ]

    return _build(
        "stage1_mean_std",
        "Stage 1: mean and standard deviation of initial ratings",
        ["LLM Mean", "LLM Std", "Actual Mean", "Actual Std"],
        [True] * 4,
        reports,
        row,
    )


def emit_stage2_table(reports: Sequence[MetricReport]) -> Table:
    def row(r):
        s = r.stage2
        fisher = _p(s.fisher)
        return [_corr(s.reference_influence), _corr(s.subject_influence), fisher]

    return _build(
        "stage2",
        "Stage 2: social influence",
        [
            "Actual Social Influence (Spearman)",
            "LLM Social Influence (Spearman)",
            "Fisher p-value",
        ],
        [True, True, True],
        reports,
        row,
    )


def emit_stage3_table(reports: Sequence[MetricReport]) -> Table:
    def row(r):
        s = r.stage3
        return [_mean_sd(s.subject_bnd_mean_std), _mean_sd(s.reference_bnd_mean_std), _p(s.bnd_mwu)]

    return _build(
        "stage3",
        "Stage 3: belief network distance",
        [
            "Mean LLM Belief Network Distance",
            "Mean Human Belief Network Distance",
            "MWU p (Human Belief Network Distance)",
        ],
        [True, True, False],
        reports,
        row,
    )


# -- histograms ------------------------------------------------------------------

HIST_KINDS = ("stage1", "follow_signal", "bnd")
CONTINUOUS_BINS = 20


def _values(cohort: Cohort, which: str) -> list[tuple[tuple[str, int], float]]:
    if which == "stage1":
        return [(t.key, t.stage1.rating) for t in cohort if t.stage1 is not None]
    complete = [t for t in cohort if t.status is Status.COMPLETE]
    if which == "follow_signal":
        return [(t.key, follow_signal(t)) for t in complete]
    if which == "bnd":
        return [(t.key, belief_network_distance(t)) for t in complete]
    raise ValueError(f"unknown histogram kind {which!r}; expected one of {HIST_KINDS}")


def continuous_bin(value: float, bins: int = CONTINUOUS_BINS, hi: float = 4.0) -> int:
    """Index of ``value`` among ``bins`` equal bins over [0, hi]; the last bin is closed."""
    # values are means of small integers, so rationalise to avoid 0.6/0.2 < 3
    idx = math.floor(Fraction(value).limit_denominator(10**6) * bins / Fraction(hi))
    return min(max(idx, 0), bins - 1)


def histogram(values: Sequence[float], which: str) -> list[tuple[float, float, int, float]]:
    """Rows of (bin_lo, bin_hi, count, proportion)."""
    n = len(values)
    if which == "stage1":
        counts = [0] * len(LIKERT_VALUES)
        for v in values:
            counts[int(v)] += 1
        edges = [(float(v), float(v)) for v in LIKERT_VALUES]
    else:
        counts = [0] * CONTINUOUS_BINS
        for v in values:
            counts[continuous_bin(v)] += 1
        w = 4.0 / CONTINUOUS_BINS
        edges = [(i * w, (i + 1) * w) for i in range(CONTINUOUS_BINS)]
    return [(lo, hi, c, c / n) for (lo, hi), c in zip(edges, counts)]


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label) or "cohort"


def export_histograms(cohorts: Sequence[Cohort], which: str, out_dir) -> list[Path]:
    """Write ``hist_<which>_<label>.csv`` and a ``_raw`` companion per cohort."""
    if not cohorts:
        raise ValueError("no cohorts selected")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for cohort in cohorts:
        pairs = _values(cohort, which)
        if not pairs:
            raise ValueError(f"cohort {cohort.label!r} has no {which} values")
        stem = f"hist_{which}_{_safe(cohort.label)}"
        path = out_dir / f"{stem}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if which == "stage1":
                w.writerow(["value", "count", "proportion"])
                for lo, _, c, p in histogram([v for _, v in pairs], which):
                    w.writerow([int(lo), c, repr(p)])
            else:
                w.writerow(["bin_lo", "bin_hi", "count", "proportion"])
                for lo, hi, c, p in histogram([v for _, v in pairs], which):
                    w.writerow([repr(lo), repr(hi), c, repr(p)])
        raw = out_dir / f"{stem}_raw.csv"
        with raw.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["participant_id", "round", "value"])
            for (pid, rnd), v in pairs:
                w.writerow([pid, rnd, repr(float(v))])
        written += [path, raw]
    return written


# -- bundle ----------------------------------------------------------------------

FORMATS = ("csv", "txt", "meta", "hist")

_EMITTERS: dict[str, Callable[[Sequence[MetricReport]], Table]] = {
    "stage1": emit_stage1_table,
    "stage1_mean_std": emit_mean_std_table,
    "stage2": emit_stage2_table,
    "stage3": emit_stage3_table,
}


@dataclass
class ReportBundle:
    comparisons: list[MetricReport]
    formats: tuple[str, ...]
    output_dir: Path
    written: list[Path] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)


def write_bundle(
    reports: Sequence[MetricReport],
    out_dir,
    cohorts: Sequence[Cohort] = (),
    formats: Sequence[str] = FORMATS,
    meta: dict | None = None,
) -> ReportBundle:
    """Write the requested formats; a format that fails is recorded in ``errors``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(list(reports), tuple(formats), out_dir)
    unknown = [f for f in formats if f not in FORMATS]
    for f in unknown:
        bundle.errors[f] = "unknown format"
    tables = {name: fn(reports) for name, fn in _EMITTERS.items()}

    def attempt(fmt, fn):
        try:
            fn()
        except (OSError, ValueError) as exc:
            bundle.errors[fmt] = str(exc)

    def csvs():
        for name in ("stage1", "stage2", "stage3"):
            p = out_dir / f"{name}.csv"
            p.write_text(tables[name].to_csv(), encoding="utf-8")
            bundle.written.append(p)

    def text():
        p = out_dir / "report.txt"
        parts = [tables[n].to_text() for n in ("stage1", "stage1_mean_std", "stage2", "stage3")]
        pseudocounts = sorted({r.metadata.get("kl_pseudocount") for r in reports})
        parts.append(
            f"KL divergence is D(reference || subject) in nats with pseudocount "
            f"{', '.join(str(x) for x in pseudocounts)} added to every bin.\n"
            "Significance: * = p < 0.05, ** = p < 0.01, *** = p < 0.001. "
            "N/A = not computable for this comparison.\n"
        )
        p.write_text("\n".join(parts), encoding="utf-8")
        bundle.written.append(p)

    def metadata():
        doc = dict(meta or {})
        doc["comparisons"] = [
            {"label_pair": list(r.label_pair), "group": r.group, "n_aligned": r.n_aligned, **r.metadata}
            for r in reports
        ]
        p = out_dir / "report_meta.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        bundle.written.append(p)
        m = out_dir / "metrics.json"
        m.write_text(
            json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        bundle.written.append(m)

    def hists():
        if not cohorts:
            raise ValueError("no cohorts given for histogram export")
        for which in HIST_KINDS:
            usable = [c for c in cohorts if _values(c, which)]
            if usable:
                bundle.written += export_histograms(usable, which, out_dir)

    steps = {"csv": csvs, "txt": text, "meta": metadata, "hist": hists}
    for fmt in formats:
        if fmt in steps:
            attempt(fmt, steps[fmt])
    return bundle


def p_cell(test: TestResult | NotComputable) -> str:
    """The displayed p-value string, e.g. ``0.0024**``."""
    return _p(test).text
