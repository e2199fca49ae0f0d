"""The three-stage agent contract plus scripted and replay agents.

Scripted agents draw randomness from a generator keyed by
``(seed, participant_id, round, stage)``, so a cohort run gives the same
traces no matter how participant-rounds are scheduled across threads.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .core import LIKERT_MAX, LIKERT_MIN, Cohort, PeerObservation, Persona


class StageFailure(Exception):
    """An agent could not produce a valid decision for a stage."""

    def __init__(self, stage: int, detail: str):
        self.stage = stage
        self.detail = detail
        super().__init__(f"stage {stage} failed: {detail}")


@dataclass(frozen=True)
class StageSummary:
    stage: int
    rating: int
    reason: str

    @property
    def text(self) -> str:
        reason = " ".join(self.reason.split())
        return f"Stage {self.stage}: rated {self.rating} because {reason}"


@dataclass(frozen=True)
class AgentContext:
    persona: Persona
    statement: str
    round_memory: tuple[StageSummary, ...] = ()
    participant_id: str = ""
    round: int = 1
    topic: str = ""

    def own_rating(self, stage: int = 1) -> int:
        for s in self.round_memory:
            if s.stage == stage:
                return s.rating
        raise StageFailure(stage + 1, f"no stage-{stage} summary in round memory")


@dataclass(frozen=True)
class AgentDecision:
    rating: int | None = None
    follow_ids: tuple[str, ...] | None = None
    reason: str = ""

    def __post_init__(self):
        if (self.rating is None) == (self.follow_ids is None):
            raise ValueError("exactly one of rating / follow_ids must be set")
        if self.follow_ids is not None:
            object.__setattr__(self, "follow_ids", tuple(self.follow_ids))


class Agent(Protocol):
    def stage1(self, ctx: AgentContext) -> AgentDecision: ...

    def stage2(self, ctx: AgentContext, peers: Sequence[PeerObservation]) -> AgentDecision: ...

    def stage3(
        self, ctx: AgentContext, candidates: Sequence[PeerObservation], k: int
    ) -> AgentDecision: ...


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def clamp_rating(x: int) -> int:
    return max(LIKERT_MIN, min(LIKERT_MAX, x))


def stage_rng(seed: int, ctx: AgentContext, stage: int) -> random.Random:
    token = f"{seed}|{ctx.participant_id}|{ctx.round}|{stage}".encode()
    return random.Random(int.from_bytes(hashlib.sha256(token).digest()[:8], "big"))


def check_k(candidates: Sequence[PeerObservation], k: int) -> None:
    if not 1 <= k <= len(candidates):
        raise ValueError(f"k must satisfy 1 <= k <= {len(candidates)}, got {k}")


@dataclass(frozen=True)
class InitialPolicy:
    """How a scripted agent picks its stage-1 rating.

    ``fixed`` always answers ``value``; ``uniform`` draws from 0..4;
    ``gaussian`` rounds a N(mu, sigma) draw and clamps it to 0..4.
    """

    kind: str = "uniform"
    value: int = 2
    mu: float = 2.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "gaussian"):
            raise ValueError(f"unknown initial policy {self.kind!r}")
        if self.kind == "fixed" and not LIKERT_MIN <= self.value <= LIKERT_MAX:
            raise ValueError(f"fixed initial rating out of range: {self.value}")
        if self.kind == "gaussian" and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def draw(self, rng: random.Random) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return rng.randint(LIKERT_MIN, LIKERT_MAX)
        return clamp_rating(round_half_away(rng.gauss(self.mu, self.sigma)))


def top_rated(candidates: Sequence[PeerObservation], k: int) -> tuple[str, ...]:
    ranked = sorted(candidates, key=lambda c: (-c.rating, c.peer_id))
    return tuple(c.peer_id for c in ranked[:k])


def closest_to(candidates: Sequence[PeerObservation], own: int, k: int) -> tuple[str, ...]:
    ranked = sorted(candidates, key=lambda c: (abs(c.rating - own), c.peer_id))
    return tuple(c.peer_id for c in ranked[:k])


@dataclass
class DeGrootAgent:
    """Moves a fraction ``alpha`` of the way toward the peer mean.

    Stage 3 follows the ``k`` highest-rated candidates.
    """

    alpha: float = 0.5
    initial: InitialPolicy = field(default_factory=InitialPolicy)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    def stage1(self, ctx):
        rating = self.initial.draw(stage_rng(self.seed, ctx, 1))
        return AgentDecision(rating=rating, reason=f"Initial view ({self.initial.kind} policy).")

    def stage2(self, ctx, peers):
        if not peers:
            raise StageFailure(2, "no peers to observe")
        r0 = ctx.own_rating(1)
        mean = sum(p.rating for p in peers) / len(peers)
        rating = clamp_rating(round_half_away(r0 + self.alpha * (mean - r0)))
        return AgentDecision(
            rating=rating, reason=f"Peers average {mean:.2f}; moved with weight {self.alpha}."
        )

    def stage3(self, ctx, candidates, k):
        check_k(candidates, k)
        return AgentDecision(follow_ids=top_rated(candidates, k), reason="Highest rated candidates.")


@dataclass
class StubbornAgent(DeGrootAgent):
    """Never moves at stage 2."""

    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha != 0.0:
            raise ValueError("StubbornAgent has alpha fixed at 0")


@dataclass
class HomophilyAgent:
    """Follows the candidates nearest its own initial rating; delegates stages 1-2."""

    base: Agent = field(default_factory=DeGrootAgent)

    def stage1(self, ctx):
        return self.base.stage1(ctx)

    def stage2(self, ctx, peers):
        return self.base.stage2(ctx, peers)

    def stage3(self, ctx, candidates, k):
        check_k(candidates, k)
        own = ctx.own_rating(1)
        return AgentDecision(
            follow_ids=closest_to(candidates, own, k), reason="Candidates closest to my view."
        )


@dataclass
class RandomFollowAgent:
    """Follows ``k`` candidates chosen uniformly at random; delegates stages 1-2."""

    base: Agent = field(default_factory=DeGrootAgent)
    seed: int = 0

    def stage1(self, ctx):
        return self.base.stage1(ctx)

    def stage2(self, ctx, peers):
        return self.base.stage2(ctx, peers)

    def stage3(self, ctx, candidates, k):
        check_k(candidates, k)
        picked = stage_rng(self.seed, ctx, 3).sample(list(candidates), k)
        return AgentDecision(follow_ids=tuple(c.peer_id for c in picked), reason="Random pick.")


class ReplayAgent:
    """Re-emits the decisions recorded in ``source``, including recorded failures."""

    def __init__(self, source: Cohort):
        self.source = source

    def _trace(self, ctx, stage):
        try:
            return self.source.traces[(ctx.participant_id, ctx.round)]
        except KeyError:
            raise StageFailure(stage, f"no recording for {(ctx.participant_id, ctx.round)}") from None

    def stage1(self, ctx):
        t = self._trace(ctx, 1)
        if t.stage1 is None:
            raise StageFailure(1, "recorded failure")
        return AgentDecision(rating=t.stage1.rating, reason=t.stage1.reason)

    def stage2(self, ctx, peers):
        t = self._trace(ctx, 2)
        if t.stage2 is None:
            raise StageFailure(2, "recorded failure")
        return AgentDecision(rating=t.stage2.rating, reason=t.stage2.reason)

    def stage3(self, ctx, candidates, k):
        t = self._trace(ctx, 3)
        if t.follows is None:
            raise StageFailure(3, "recorded failure")
        return AgentDecision(follow_ids=t.follows, reason="")
