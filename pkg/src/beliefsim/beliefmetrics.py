"""Cohort-level belief metrics and the full cohort-vs-cohort comparison."""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Union

from .core import AlignmentError, Cohort, RoundTrace, Status, align_cohorts, drop_counts
from .stats import (
    DegenerateError,
    TestResult,
    fisher_r_to_z,
    kl_divergence,
    mann_whitney_u,
    mean_std,
    pmf_of,
    spearman,
    wasserstein_distance,
)

DEFAULT_KL_PSEUDOCOUNT = 0.5


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class NotComputable:
    reason: str

    def __bool__(self):
        return False


Correlation = tuple[float, TestResult]
Maybe = Union[Any, NotComputable]


def belief_update(trace: RoundTrace) -> int:
    if trace.stage1 is None or trace.stage2 is None:
        raise MetricError(f"trace {trace.key} has no stage-2 rating")
    return trace.stage2.rating - trace.stage1.rating


def influence_series(cohort: Cohort) -> tuple[list[float], list[int]]:
    """(peer mean minus initial rating, belief update) for every stage-2 trace."""
    xs, ys = [], []
    for t in cohort:
        if t.stage2 is None:
            continue
        xs.append(t.peer_mean - t.stage1.rating)
        ys.append(belief_update(t))
    return xs, ys


def social_influence(cohort: Cohort) -> Correlation:
    xs, ys = influence_series(cohort)
    if len(xs) < 3:
        raise MetricError(f"social influence needs >= 3 stage-2 traces, got {len(xs)}")
    return spearman(xs, ys)


def follow_signal(trace: RoundTrace) -> float:
    """Mean initial rating of the peers this participant chose to follow."""
    if not trace.follows:
        raise MetricError(f"trace {trace.key} follows nobody")
    ratings = {c.peer_id: c.rating for c in trace.candidates}
    missing = [f for f in trace.follows if f not in ratings]
    if missing:
        raise MetricError(f"trace {trace.key} follows ids not in candidates: {missing}")
    return sum(ratings[f] for f in trace.follows) / len(trace.follows)


def belief_network_distance(trace: RoundTrace) -> float:
    return abs(follow_signal(trace) - trace.stage1.rating)


def baseline_half_split(
    cohort: Cohort, seed: int, pseudocount: float = DEFAULT_KL_PSEUDOCOUNT
) -> tuple[float, float]:
    """KL and Wasserstein between two random halves of a cohort's initial ratings.

    Traces are shuffled by ``seed``; an odd trace goes to the first half.
    """
    ratings = [t.stage1.rating for t in cohort if t.stage1 is not None]
    if len(ratings) < 2:
        raise MetricError("half split needs at least 2 traces with stage-1 ratings")
    random.Random(seed).shuffle(ratings)
    cut = (len(ratings) + 1) // 2
    first, second = pmf_of(ratings[:cut]), pmf_of(ratings[cut:])
    return kl_divergence(first, second, pseudocount), wasserstein_distance(first, second)


# -- comparison ----------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonOptions:
    kl_pseudocount: float = DEFAULT_KL_PSEUDOCOUNT
    group: str | None = None


@dataclass
class Stage1Metrics:
    n: int
    kl: Maybe
    wasserstein: Maybe
    mwu: Maybe
    spearman: Maybe
    subject_mean_std: Maybe
    reference_mean_std: Maybe


@dataclass
class Stage2Metrics:
    n: int
    subject_change_mean_std: Maybe
    reference_change_mean_std: Maybe
    change_spearman: Maybe
    subject_influence: Maybe
    reference_influence: Maybe
    fisher: Maybe


@dataclass
class Stage3Metrics:
    n: int
    follow_spearman: Maybe
    bnd_spearman: Maybe
    subject_bnd_mean_std: Maybe
    reference_bnd_mean_std: Maybe
    bnd_mwu: Maybe


@dataclass
class MetricReport:
    label_pair: tuple[str, str]
    n_aligned: int
    stage1: Stage1Metrics
    stage2: Stage2Metrics
    stage3: Stage3Metrics
    group: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def subject(self) -> str:
        return self.label_pair[0]

    @property
    def reference(self) -> str:
        return self.label_pair[1]

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    # asdict() has already turned NotComputable into {"reason": ...}
    if isinstance(obj, dict):
        if set(obj) == {"reason"}:
            return {"not_computable": obj["reason"]}
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _attempt(fn: Callable, *args) -> Maybe:
    try:
        return fn(*args)
    except (DegenerateError, MetricError, ValueError) as exc:
        return NotComputable(str(exc))


_NA_STAGE3 = "no instances completed stage 3 in both cohorts"


def _stage1(subj: Cohort, ref: Cohort, pseudocount: float) -> Stage1Metrics:
    s = [t.stage1.rating for t in subj]
    r = [t.stage1.rating for t in ref]
    p_ref, p_subj = pmf_of(r), pmf_of(s)
    return Stage1Metrics(
        n=len(s),
        kl=kl_divergence(p_ref, p_subj, pseudocount),
        wasserstein=wasserstein_distance(p_ref, p_subj),
        mwu=_attempt(mann_whitney_u, s, r),
        spearman=_attempt(spearman, s, r),
        subject_mean_std=_attempt(mean_std, s),
        reference_mean_std=_attempt(mean_std, r),
    )


def _stage2(subj: Cohort, ref: Cohort) -> Stage2Metrics:
    ds = [belief_update(t) for t in subj]
    dr = [belief_update(t) for t in ref]
    si_s = _attempt(social_influence, subj)
    si_r = _attempt(social_influence, ref)
    n = len(ds)
    if isinstance(si_s, NotComputable) or isinstance(si_r, NotComputable):
        fisher = NotComputable("social influence not computable for both cohorts")
    else:
        fisher = _attempt(fisher_r_to_z, si_s[0], n, si_r[0], n)
    return Stage2Metrics(
        n=n,
        subject_change_mean_std=_attempt(mean_std, ds),
        reference_change_mean_std=_attempt(mean_std, dr),
        change_spearman=_attempt(spearman, ds, dr),
        subject_influence=si_s,
        reference_influence=si_r,
        fisher=fisher,
    )


def _stage3(subj: Cohort, ref: Cohort) -> Stage3Metrics:
    fs = [follow_signal(t) for t in subj]
    fr = [follow_signal(t) for t in ref]
    bs = [abs(f - t.stage1.rating) for f, t in zip(fs, subj)]
    br = [abs(f - t.stage1.rating) for f, t in zip(fr, ref)]
    return Stage3Metrics(
        n=len(fs),
        follow_spearman=_attempt(spearman, fs, fr),
        bnd_spearman=_attempt(spearman, bs, br),
        subject_bnd_mean_std=_attempt(mean_std, bs),
        reference_bnd_mean_std=_attempt(mean_std, br),
        bnd_mwu=_attempt(mann_whitney_u, bs, br),
    )


def _stage3_na() -> Stage3Metrics:
    na = NotComputable(_NA_STAGE3)
    return Stage3Metrics(0, na, na, na, na, na)


def compare_cohorts(
    subject: Cohort, reference: Cohort, options: ComparisonOptions | None = None
) -> MetricReport:
    """Compute every stage-1/2/3 comparison between two cohorts.

    Each stage is computed over the keys both cohorts completed through that
    stage. KL is D(reference || subject). Degenerate statistics come back as
    :class:`NotComputable` rather than raising.
    """
    options = options or ComparisonOptions()
    s1, r1 = align_cohorts(subject, reference, stage=1)
    stage1 = _stage1(s1, r1, options.kl_pseudocount)

    try:
        s2, r2 = align_cohorts(subject, reference, stage=2)
        stage2 = _stage2(s2, r2)
    except AlignmentError:
        na = NotComputable("no instances completed stage 2 in both cohorts")
        stage2 = Stage2Metrics(0, na, na, na, na, na, na)

    try:
        s3, r3 = align_cohorts(subject, reference, stage=3)
        stage3 = _stage3(s3, r3)
    except AlignmentError:
        stage3 = _stage3_na()

    metadata = {
        "kl_pseudocount": options.kl_pseudocount,
        "log_base": "e",
        "kl_direction": "reference||subject",
        "fisher_n": "aligned stage-2 instances per cohort",
        "drop_counts": {
            f"stage{st}": drop_counts(subject, reference, st) for st in (1, 2, 3)
        },
        "status_counts": {
            "subject": _status_counts(subject),
            "reference": _status_counts(reference),
        },
    }
    return MetricReport(
        label_pair=(subject.label, reference.label),
        n_aligned=stage1.n,
        stage1=stage1,
        stage2=stage2,
        stage3=stage3,
        group=options.group,
        metadata=metadata,
    )


def _status_counts(c: Cohort) -> dict[str, int]:
    out = {s.value: 0 for s in Status}
    for t in c:
        out[t.status.value] += 1
    return out
