"""Runs the rate / observe-and-update / follow protocol over a stimulus plan.

Every participant-round is an independent job: round memory starts empty,
collects the stage-1 and stage-2 summaries, and is discarded at the end of
the round.
"""

from __future__ import annotations

import hashlib
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .agents import Agent, AgentContext, StageFailure, StageSummary
from .core import (
    BIG5_TRAITS,
    LIKERT_VALUES,
    Cohort,
    PeerObservation,
    Persona,
    RoundTrace,
    StageResponse,
    Status,
    TraceError,
    check_rating,
)

log = logging.getLogger(__name__)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Stimulus:
    participant_id: str
    round: int
    topic: str
    statement: str
    persona: Persona
    peers: tuple[PeerObservation, ...]
    candidates: tuple[PeerObservation, ...]
    k: int
    statement_is_true: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "peers", tuple(self.peers))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.statement.strip():
            raise PlanError(f"{self.key}: empty statement")
        if not self.peers:
            raise PlanError(f"{self.key}: empty peer panel")
        if not 1 <= self.k <= len(self.candidates):
            raise PlanError(f"{self.key}: need 1 <= k <= |candidates|, got k={self.k}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.participant_id, self.round)


@dataclass(frozen=True)
class StimulusPlan:
    entries: Mapping[tuple[str, int], Stimulus]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))

    @classmethod
    def from_stimuli(cls, stimuli: Sequence[Stimulus]) -> "StimulusPlan":
        out = {}
        for s in stimuli:
            if s.key in out:
                raise PlanError(f"duplicate stimulus for {s.key}")
            out[s.key] = s
        return cls(out)

    def __len__(self):
        return len(self.entries)

    def gaps(self, rounds: int) -> list[tuple[str, int]]:
        """(participant, round) pairs missing from the plan."""
        participants = sorted({pid for pid, _ in self.entries})
        return [
            (pid, r)
            for pid in participants
            for r in range(1, rounds + 1)
            if (pid, r) not in self.entries
        ]


def stimuli_from_cohort(cohort: Cohort) -> StimulusPlan:
    """The stimuli each recorded participant saw; lets one agent replay a human cohort's rounds."""
    return StimulusPlan(
        {
            t.key: Stimulus(
                participant_id=t.participant_id,
                round=t.round,
                topic=t.topic,
                statement=t.statement,
                statement_is_true=t.statement_is_true,
                persona=t.persona,
                peers=t.peers,
                candidates=t.candidates,
                k=t.k,
            )
            for t in cohort
        }
    )


@dataclass(frozen=True)
class RunConfig:
    parallelism: int = 1
    seed: int = 0
    rounds: int = 3
    label: str = "subject"

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be positive")


def _validate_follow(ids, candidates, k) -> str | None:
    known = {c.peer_id for c in candidates}
    if len(ids) != k:
        return f"expected {k} follow ids, got {len(ids)}"
    if len(set(ids)) != len(ids):
        return "duplicate follow ids"
    unknown = [i for i in ids if i not in known]
    if unknown:
        return f"unknown follow ids {unknown}"
    return None


def run_round(agent: Agent, persona: Persona, stimulus: Stimulus) -> RoundTrace:
    """Run the three stages for one participant-round.

    A :class:`StageFailure` (or an invalid decision) stops the round; the
    returned trace keeps the earlier stages and carries the failing status.
    """
    memory: list[StageSummary] = []

    def ctx():
        return AgentContext(
            persona=persona,
            statement=stimulus.statement,
            round_memory=tuple(memory),
            participant_id=stimulus.participant_id,
            round=stimulus.round,
            topic=stimulus.topic,
        )

    stage1 = stage2 = follows = None
    status = Status.COMPLETE
    try:
        d1 = agent.stage1(ctx())
        stage1 = _rating_response(d1, 1)
        memory.append(StageSummary(1, stage1.rating, stage1.reason))

        d2 = agent.stage2(ctx(), stimulus.peers)
        stage2 = _rating_response(d2, 2)
        memory.append(StageSummary(2, stage2.rating, stage2.reason))

        d3 = agent.stage3(ctx(), stimulus.candidates, stimulus.k)
        if d3.follow_ids is None:
            raise StageFailure(3, "decision carries no follow ids")
        problem = _validate_follow(d3.follow_ids, stimulus.candidates, stimulus.k)
        if problem:
            raise StageFailure(3, problem)
        follows = d3.follow_ids
    except StageFailure as exc:
        status = Status(f"failed_stage{exc.stage}")
        log.info("%s round %s: %s", stimulus.participant_id, stimulus.round, exc)

    return RoundTrace(
        participant_id=stimulus.participant_id,
        round=stimulus.round,
        topic=stimulus.topic,
        statement=stimulus.statement,
        statement_is_true=stimulus.statement_is_true,
        persona=persona,
        stage1=stage1,
        peers=stimulus.peers,
        stage2=stage2,
        candidates=stimulus.candidates,
        k=stimulus.k,
        follows=follows,
        status=status,
    )


def _rating_response(decision, stage: int) -> StageResponse:
    if decision.rating is None:
        raise StageFailure(stage, "decision carries no rating")
    try:
        check_rating(decision.rating)
    except TraceError as exc:
        raise StageFailure(stage, str(exc)) from None
    return StageResponse(decision.rating, decision.reason)


def _bucket(key: tuple[str, int], n: int) -> int:
    digest = hashlib.sha256(f"{key[0]}|{key[1]}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % n


def run_cohort(agent: Agent, plan: StimulusPlan, config: RunConfig | None = None) -> Cohort:
    """Run every plan entry and collect the traces into a cohort.

    Entries are statically partitioned across ``config.parallelism`` workers
    by a hash of their key; each worker runs its share sequentially.
    """
    config = config or RunConfig()
    gaps = plan.gaps(config.rounds)
    if gaps:
        listed = ", ".join(f"{pid} round {r}" for pid, r in gaps)
        raise PlanError(f"stimulus plan has gaps: {listed}")
    extra = [k for k in plan.entries if not 1 <= k[1] <= config.rounds]
    if extra:
        raise PlanError(f"plan has rounds outside 1..{config.rounds}: {extra}")

    buckets: list[list[Stimulus]] = [[] for _ in range(config.parallelism)]
    for key, stim in plan.entries.items():
        buckets[_bucket(key, config.parallelism)].append(stim)

    results: dict[tuple[str, int], RoundTrace] = {}
    lock = threading.Lock()

    def work(stims: list[Stimulus]):
        for s in stims:
            trace = run_round(agent, s.persona, s)
            with lock:
                results[s.key] = trace

    if config.parallelism == 1:
        work(buckets[0])
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            for fut in [pool.submit(work, b) for b in buckets if b]:
                fut.result()
    return Cohort.from_traces(config.label, (results[k] for k in sorted(results)))


# -- synthetic stimuli -----------------------------------------------------------

DEFAULT_STATEMENTS = (
    ("immigration", "Most immigrants arriving in the last decade entered the country illegally.", False),
    ("immigration", "Immigrants commit crimes at higher rates than native-born citizens.", False),
    ("immigration", "Immigrant workers pay billions of dollars in taxes each year.", True),
    ("oil and fuel", "Domestic oil production has declined every year for the past decade.", False),
    ("oil and fuel", "Gasoline prices are set directly by the sitting president.", False),
    ("oil and fuel", "The country is among the largest crude oil producers in the world.", True),
)

_REASONS = {
    0: "This does not match anything I know.",
    1: "I doubt it, though I am not certain.",
    2: "I am unsure either way.",
    3: "It sounds mostly right to me.",
    4: "I am confident this is true.",
}

_AGES = ("18-24", "25-34", "35-44", "45-54", "55-64", "65+")
_GENDERS = ("woman", "man", "non-binary person")
_PARTIES = ("Democrat", "Republican", "Independent")
_EDUCATION = ("high school diploma", "some college", "bachelor's degree", "graduate degree")


@dataclass(frozen=True)
class SynthConfig:
    n_participants: int = 100
    rounds: int = 3
    n_peers: int = 5
    pool_size: int = 8
    k: int = 3
    population: int = 60
    peer_pmf: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    statements: tuple[tuple[str, str, bool | None], ...] = field(default=DEFAULT_STATEMENTS)

    def __post_init__(self):
        if self.k < 1 or self.k > self.pool_size:
            raise PlanError(f"need 1 <= k <= pool size, got k={self.k}, pool={self.pool_size}")
        if self.n_peers < 1:
            raise PlanError("n_peers must be positive")
        if max(self.n_peers, self.pool_size) > self.population:
            raise PlanError("population smaller than the peer panel or candidate pool")
        if len(self.peer_pmf) != len(LIKERT_VALUES) or any(p < 0 for p in self.peer_pmf):
            raise PlanError("peer_pmf must be 5 nonnegative weights")
        if sum(self.peer_pmf) <= 0:
            raise PlanError("peer_pmf must have positive mass")
        if not self.statements:
            raise PlanError("statement bank is empty")


def _synth_persona(pid: str, rng: random.Random) -> Persona:
    demo = (
        f"a {rng.choice(_AGES)} year old {rng.choice(_GENDERS)}, "
        f"{rng.choice(_PARTIES)}, with a {rng.choice(_EDUCATION)}"
    )
    big5 = {t: round(rng.uniform(1.0, 5.0), 2) for t in BIG5_TRAITS}
    return Persona(agent_id=pid, display_name=f"Participant {pid}", demographics=demo, big5=big5)


def synthesize_stimuli(config: SynthConfig, seed: int) -> StimulusPlan:
    """Fabricate a plan with peer panels and pools drawn from ``peer_pmf``."""
    rng = random.Random(seed)
    width = len(str(config.population))
    population = [f"u{i:0{width}d}" for i in range(config.population)]
    width = len(str(config.n_participants))

    def observations(n):
        ids = rng.sample(population, n)
        ratings = rng.choices(LIKERT_VALUES, weights=config.peer_pmf, k=n)
        return tuple(PeerObservation(i, r, _REASONS[r]) for i, r in zip(ids, ratings))

    stimuli = []
    for p in range(config.n_participants):
        pid = f"p{p:0{width}d}"
        persona = _synth_persona(pid, rng)
        for r in range(1, config.rounds + 1):
            topic, statement, truth = rng.choice(config.statements)
            stimuli.append(
                Stimulus(
                    participant_id=pid,
                    round=r,
                    topic=topic,
                    statement=statement,
                    statement_is_true=truth,
                    persona=persona,
                    peers=observations(config.n_peers),
                    candidates=observations(config.pool_size),
                    k=config.k,
                )
            )
    return StimulusPlan.from_stimuli(stimuli)
