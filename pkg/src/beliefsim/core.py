"""Domain types and the line-delimited trace file format.

A trace file holds one JSON object per line, one line per participant-round.
Cohorts are written sorted by ``(participant_id, round)`` so files diff cleanly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

LIKERT_MIN = 0
LIKERT_MAX = 4
LIKERT_VALUES = tuple(range(LIKERT_MIN, LIKERT_MAX + 1))

BIG5_TRAITS = (
    "openness",
    "conscientiousness",
    "extraversion",
    "agreeableness",
    "neuroticism",
)

TRACE_FIELDS = (
    "participant_id",
    "round",
    "topic",
    "statement",
    "statement_is_true",
    "persona",
    "stage1",
    "peers",
    "stage2",
    "candidates",
    "k",
    "follows",
    "status",
)


class TraceError(ValueError):
    """Invalid trace data. ``line`` is set when raised while reading a file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Status(str, Enum):
    COMPLETE = "complete"
    FAILED_STAGE1 = "failed_stage1"
    FAILED_STAGE2 = "failed_stage2"
    FAILED_STAGE3 = "failed_stage3"

    @property
    def stages_done(self) -> int:
        """Number of leading stages with recorded data."""
        return {
            Status.COMPLETE: 3,
            Status.FAILED_STAGE3: 2,
            Status.FAILED_STAGE2: 1,
            Status.FAILED_STAGE1: 0,
        }[self]


def check_rating(value) -> int:
    # bool is an int subclass; a JSON true must not pass as rating 1
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceError(f"rating must be an integer, got {value!r}")
    if not LIKERT_MIN <= value <= LIKERT_MAX:
        raise TraceError(f"rating out of range: {value}")
    return value


@dataclass(frozen=True)
class Persona:
    agent_id: str
    display_name: str = ""
    demographics: str = ""
    big5: Mapping[str, float] | None = None

    def __post_init__(self):
        if not self.agent_id:
            raise TraceError("persona agent_id must be non-empty")
        if self.big5 is not None:
            if set(self.big5) != set(BIG5_TRAITS):
                raise TraceError(
                    f"big5 must have exactly the keys {list(BIG5_TRAITS)}, got {sorted(self.big5)}"
                )
            object.__setattr__(self, "big5", {k: float(self.big5[k]) for k in BIG5_TRAITS})


@dataclass(frozen=True)
class StageResponse:
    rating: int
    reason: str = ""

    def __post_init__(self):
        check_rating(self.rating)


@dataclass(frozen=True)
class PeerObservation:
    peer_id: str
    rating: int
    reason: str = ""

    def __post_init__(self):
        if not self.peer_id:
            raise TraceError("peer_id must be non-empty")
        check_rating(self.rating)


@dataclass(frozen=True)
class RoundTrace:
    participant_id: str
    round: int
    topic: str
    statement: str
    persona: Persona
    stage1: StageResponse | None
    peers: tuple[PeerObservation, ...]
    stage2: StageResponse | None
    candidates: tuple[PeerObservation, ...]
    k: int
    follows: tuple[str, ...] | None
    status: Status = Status.COMPLETE
    statement_is_true: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "status", Status(self.status))
        object.__setattr__(self, "peers", tuple(self.peers))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.follows is not None:
            object.__setattr__(self, "follows", tuple(self.follows))
        if not self.participant_id:
            raise TraceError("participant_id must be non-empty")
        if isinstance(self.round, bool) or not isinstance(self.round, int) or self.round < 1:
            raise TraceError(f"round must be a positive integer, got {self.round!r}")
        if isinstance(self.k, bool) or not isinstance(self.k, int):
            raise TraceError(f"k must be an integer, got {self.k!r}")

        done = self.status.stages_done
        present = (self.stage1 is not None, self.stage2 is not None, self.follows is not None)
        expected = tuple(i < done for i in range(3))
        if present != expected:
            raise TraceError(
                f"status {self.status.value} inconsistent with recorded stages "
                f"(stage1={present[0]}, stage2={present[1]}, follows={present[2]})"
            )
        if self.stage2 is not None and not self.peers:
            raise TraceError("peers must be non-empty when stage2 is present")
        if self.status is Status.COMPLETE:
            follows = self.follows
            if len(follows) != self.k:
                raise TraceError(f"follows has {len(follows)} entries, expected k={self.k}")
            if len(set(follows)) != len(follows):
                raise TraceError("follows contains duplicate peer ids")
            ids = {c.peer_id for c in self.candidates}
            unknown = [f for f in follows if f not in ids]
            if unknown:
                raise TraceError(f"follows not among candidates: {unknown}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.participant_id, self.round)

    @property
    def peer_mean(self) -> float:
        return sum(p.rating for p in self.peers) / len(self.peers)


@dataclass(frozen=True)
class Cohort:
    label: str
    traces: Mapping[tuple[str, int], RoundTrace] = field(default_factory=dict)

    def __post_init__(self):
        for key, trace in self.traces.items():
            if trace.key != key:
                raise TraceError(f"trace keyed {key} reports its own key as {trace.key}")
        object.__setattr__(self, "traces", dict(sorted(self.traces.items())))

    @classmethod
    def from_traces(cls, label: str, traces: Iterable[RoundTrace]) -> "Cohort":
        out: dict[tuple[str, int], RoundTrace] = {}
        for t in traces:
            if t.key in out:
                raise TraceError(f"duplicate (participant_id, round): {t.key}")
            out[t.key] = t
        return cls(label, out)

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces.values())

    def keys(self):
        return self.traces.keys()

    def subset(self, keys: Iterable[tuple[str, int]]) -> "Cohort":
        return Cohort(self.label, {k: self.traces[k] for k in keys})


# -- serialization -----------------------------------------------------------


def _peer_to_dict(p: PeerObservation) -> dict:
    return {"peer_id": p.peer_id, "rating": p.rating, "reason": p.reason}


def _stage_to_dict(s: StageResponse | None) -> dict | None:
    return None if s is None else {"rating": s.rating, "reason": s.reason}


def trace_to_dict(t: RoundTrace) -> dict:
    p = t.persona
    return {
        "participant_id": t.participant_id,
        "round": t.round,
        "topic": t.topic,
        "statement": t.statement,
        "statement_is_true": t.statement_is_true,
        "persona": {
            "agent_id": p.agent_id,
            "display_name": p.display_name,
            "demographics": p.demographics,
            "big5": None if p.big5 is None else dict(p.big5),
        },
        "stage1": _stage_to_dict(t.stage1),
        "peers": [_peer_to_dict(x) for x in t.peers],
        "stage2": _stage_to_dict(t.stage2),
        "candidates": [_peer_to_dict(x) for x in t.candidates],
        "k": t.k,
        "follows": None if t.follows is None else list(t.follows),
        "status": t.status.value,
    }


def _require(obj, name: str, kinds, where: str):
    if not isinstance(obj, dict):
        raise TraceError(f"{where} must be an object")
    if name not in obj:
        raise TraceError(f"missing field {where}.{name}" if where != "record" else f"missing field {name}")
    value = obj[name]
    if not isinstance(value, kinds) or (isinstance(value, bool) and bool not in _as_tuple(kinds)):
        raise TraceError(f"field {name} has wrong type {type(value).__name__}")
    return value


def _as_tuple(kinds):
    return kinds if isinstance(kinds, tuple) else (kinds,)


def _check_unknown(obj: dict, allowed, where: str, strict: bool):
    if strict:
        extra = sorted(set(obj) - set(allowed))
        if extra:
            raise TraceError(f"unknown fields in {where}: {extra}")


def _stage_from(obj, where: str, strict: bool) -> StageResponse | None:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise TraceError(f"{where} must be an object or null")
    _check_unknown(obj, ("rating", "reason"), where, strict)
    if "rating" not in obj:
        raise TraceError(f"missing field {where}.rating")
    return StageResponse(check_rating(obj["rating"]), _require(obj, "reason", str, where))


def _peers_from(items, where: str, strict: bool) -> tuple[PeerObservation, ...]:
    if not isinstance(items, list):
        raise TraceError(f"{where} must be a list")
    out = []
    for i, obj in enumerate(items):
        w = f"{where}[{i}]"
        if not isinstance(obj, dict):
            raise TraceError(f"{w} must be an object")
        _check_unknown(obj, ("peer_id", "rating", "reason"), w, strict)
        if "rating" not in obj:
            raise TraceError(f"missing field {w}.rating")
        out.append(
            PeerObservation(
                _require(obj, "peer_id", str, w),
                check_rating(obj["rating"]),
                _require(obj, "reason", str, w),
            )
        )
    return tuple(out)


def trace_from_dict(rec: dict, strict: bool = False) -> RoundTrace:
    if not isinstance(rec, dict):
        raise TraceError("record must be a JSON object")
    _check_unknown(rec, TRACE_FIELDS, "record", strict)
    for name in TRACE_FIELDS:
        if name not in rec:
            raise TraceError(f"missing field {name}")

    pobj = rec["persona"]
    if not isinstance(pobj, dict):
        raise TraceError("persona must be an object")
    _check_unknown(pobj, ("agent_id", "display_name", "demographics", "big5"), "persona", strict)
    big5 = pobj.get("big5")
    if big5 is not None:
        if not isinstance(big5, dict) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in big5.values()
        ):
            raise TraceError("persona.big5 must be an object of numbers or null")
    persona = Persona(
        agent_id=_require(pobj, "agent_id", str, "persona"),
        display_name=_require(pobj, "display_name", str, "persona"),
        demographics=_require(pobj, "demographics", str, "persona"),
        big5=big5,
    )

    truth = rec["statement_is_true"]
    if truth is not None and not isinstance(truth, bool):
        raise TraceError("statement_is_true must be a boolean or null")
    follows = rec["follows"]
    if follows is not None:
        if not isinstance(follows, list) or not all(isinstance(f, str) for f in follows):
            raise TraceError("follows must be a list of strings or null")
    status = _require(rec, "status", str, "record")
    try:
        status = Status(status)
    except ValueError:
        raise TraceError(f"unknown status {status!r}") from None

    return RoundTrace(
        participant_id=_require(rec, "participant_id", str, "record"),
        round=_require(rec, "round", int, "record"),
        topic=_require(rec, "topic", str, "record"),
        statement=_require(rec, "statement", str, "record"),
        statement_is_true=truth,
        persona=persona,
        stage1=_stage_from(rec["stage1"], "stage1", strict),
        peers=_peers_from(rec["peers"], "peers", strict),
        stage2=_stage_from(rec["stage2"], "stage2", strict),
        candidates=_peers_from(rec["candidates"], "candidates", strict),
        k=_require(rec, "k", int, "record"),
        follows=follows,
        status=status,
    )


def dumps_trace(t: RoundTrace) -> str:
    return json.dumps(trace_to_dict(t), ensure_ascii=False)


def load_cohort(path, label: str | None = None, strict: bool = False) -> Cohort:
    """Read a trace file.

    ``strict`` rejects unknown fields; otherwise they are ignored. Any
    malformed line raises :class:`TraceError` carrying its 1-based line number.
    """
    path = Path(path)
    traces: dict[tuple[str, int], RoundTrace] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"malformed JSON: {exc.msg}", line=lineno) from None
            try:
                trace = trace_from_dict(rec, strict=strict)
            except TraceError as exc:
                raise TraceError(str(exc), line=lineno) from None
            if trace.key in traces:
                raise TraceError(f"duplicate (participant_id, round): {trace.key}", line=lineno)
            traces[trace.key] = trace
    return Cohort(label if label is not None else path.stem, traces)


def save_cohort(cohort: Cohort, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(cohort.traces):
            fh.write(dumps_trace(cohort.traces[key]))
            fh.write("\n")


# -- alignment ---------------------------------------------------------------


class AlignmentError(ValueError):
    pass


def has_stage(trace: RoundTrace, stage: int) -> bool:
    return trace.status.stages_done >= stage


def align_cohorts(a: Cohort, b: Cohort, stage: int = 3) -> tuple[Cohort, Cohort]:
    """Restrict both cohorts to shared keys where both traces reached ``stage``.

    The default ``stage=3`` keeps only instances complete on both sides.
    """
    keys = [
        k
        for k in a.traces
        if k in b.traces and has_stage(a.traces[k], stage) and has_stage(b.traces[k], stage)
    ]
    if not keys:
        raise AlignmentError("no comparable instances")
    return a.subset(keys), b.subset(keys)


def drop_counts(a: Cohort, b: Cohort, stage: int) -> dict[str, int]:
    """Account for every key in either cohort at one stage.

    ``n_total == n_aligned + missing_in_a + missing_in_b + failed``.
    """
    union = set(a.traces) | set(b.traces)
    missing_a = sum(1 for k in union if k not in a.traces)
    missing_b = sum(1 for k in union if k not in b.traces)
    shared = [k for k in union if k in a.traces and k in b.traces]
    aligned = sum(
        1 for k in shared if has_stage(a.traces[k], stage) and has_stage(b.traces[k], stage)
    )
    return {
        "n_total": len(union),
        "n_aligned": aligned,
        "missing_in_subject": missing_a,
        "missing_in_reference": missing_b,
        "failed": len(shared) - aligned,
    }
