import random
import threading

import pytest

from conftest import random_cohort, well_behaved

from beliefsim.agents import AgentDecision, DeGrootAgent, HomophilyAgent, InitialPolicy, RandomFollowAgent, ReplayAgent, StageFailure
from beliefsim.core import PeerObservation, Persona, Status, dumps_trace
from beliefsim.engine import (
    PlanError,
    RunConfig,
    Stimulus,
    StimulusPlan,
    SynthConfig,
    run_cohort,
    run_round,
    stimuli_from_cohort,
    synthesize_stimuli,
)
from beliefsim.llmagent import LLMAgent, ModelEndpoint, observation_block


def cohort_bytes(c):
    return "\n".join(dumps_trace(t) for t in c)


class MemoryProbe:
    """Records the round memory it sees at each stage."""

    def __init__(self):
        self.seen = {}
        self.lock = threading.Lock()

    def _note(self, ctx, stage):
        with self.lock:
            self.seen[(ctx.participant_id, ctx.round, stage)] = ctx.round_memory

    def stage1(self, ctx):
        self._note(ctx, 1)
        return AgentDecision(rating=(ctx.round + len(ctx.participant_id)) % 5, reason=f"r{ctx.round}")

    def stage2(self, ctx, peers):
        self._note(ctx, 2)
        return AgentDecision(rating=peers[0].rating, reason="copy first")

    def stage3(self, ctx, candidates, k):
        self._note(ctx, 3)
        return AgentDecision(follow_ids=[c.peer_id for c in candidates[:k]], reason="first")


def test_memory_scoped_to_round():
    plan = synthesize_stimuli(SynthConfig(n_participants=6), seed=1)
    probe = MemoryProbe()
    cohort = run_cohort(probe, plan, RunConfig(parallelism=4))
    for t in cohort:
        pid, rnd = t.key
        assert probe.seen[(pid, rnd, 1)] == ()
        m2 = probe.seen[(pid, rnd, 2)]
        assert [s.stage for s in m2] == [1] and m2[0].rating == t.stage1.rating
        m3 = probe.seen[(pid, rnd, 3)]
        assert [(s.stage, s.rating) for s in m3] == [(1, t.stage1.rating), (2, t.stage2.rating)]
        assert m3[0].reason == f"r{rnd}"


def test_degroot_round_by_hand():
    stim = Stimulus(
        "p1", 1, "t", "S.", Persona("p1", demographics="x"),
        peers=(PeerObservation("a", 4, ""), PeerObservation("b", 4, "")),
        candidates=(PeerObservation("c", 1, ""), PeerObservation("d", 3, "")), k=1,
    )
    t = run_round(DeGrootAgent(alpha=1.0, initial=InitialPolicy("fixed", value=0)), stim.persona, stim)
    assert t.status is Status.COMPLETE
    assert (t.stage1.rating, t.stage2.rating, t.follows) == (0, 4, ("d",))


class FailAt:
    def __init__(self, stage, base=None):
        self.stage = stage
        self.base = base or DeGrootAgent(initial=InitialPolicy("fixed", value=1))

    def stage1(self, ctx):
        if self.stage == 1:
            raise StageFailure(1, "nope")
        return self.base.stage1(ctx)

    def stage2(self, ctx, peers):
        if self.stage == 2:
            raise StageFailure(2, "nope")
        return self.base.stage2(ctx, peers)

    def stage3(self, ctx, candidates, k):
        if self.stage == 3:
            return AgentDecision(follow_ids=["not-a-candidate"] * k)
        return self.base.stage3(ctx, candidates, k)


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_failure_bookkeeping(stage):
    plan = synthesize_stimuli(SynthConfig(n_participants=2), seed=0)
    stim = next(iter(plan.entries.values()))
    t = run_round(FailAt(stage), stim.persona, stim)
    assert t.status is Status(f"failed_stage{stage}")
    assert (t.stage1 is not None) == (stage > 1)
    assert (t.stage2 is not None) == (stage > 2)
    assert t.follows is None


@pytest.mark.parametrize("seed", range(10))
def test_parallelism_invariance(seed):
    plan = synthesize_stimuli(SynthConfig(n_participants=10), seed=seed)
    agents = [
        DeGrootAgent(alpha=0.5, seed=seed),
        HomophilyAgent(DeGrootAgent(initial=InitialPolicy("gaussian", mu=2.25, sigma=1.25), seed=seed)),
        RandomFollowAgent(DeGrootAgent(seed=seed), seed=seed),
    ]
    for agent in agents:
        one = run_cohort(agent, plan, RunConfig(parallelism=1, seed=seed))
        eight = run_cohort(agent, plan, RunConfig(parallelism=8, seed=seed))
        assert len(one) == 30
        assert cohort_bytes(one) == cohort_bytes(eight)


def test_plan_gap_reported():
    plan = synthesize_stimuli(SynthConfig(n_participants=3), seed=0)
    entries = dict(plan.entries)
    del entries[("p1", 2)]
    with pytest.raises(PlanError, match="p1 round 2"):
        run_cohort(DeGrootAgent(), StimulusPlan(entries), RunConfig())


def test_plan_rounds_out_of_range():
    plan = synthesize_stimuli(SynthConfig(n_participants=2, rounds=4), seed=0)
    with pytest.raises(PlanError):
        run_cohort(DeGrootAgent(), plan, RunConfig(rounds=3))


def test_stimulus_validation():
    persona = Persona("p", demographics="x")
    peer = (PeerObservation("a", 1, ""),)
    with pytest.raises(PlanError):
        Stimulus("p", 1, "t", "", persona, peer, peer, 1)
    with pytest.raises(PlanError):
        Stimulus("p", 1, "t", "S", persona, (), peer, 1)
    with pytest.raises(PlanError):
        Stimulus("p", 1, "t", "S", persona, peer, peer, 2)


def test_synth_cardinalities_and_determinism():
    cfg = SynthConfig(n_participants=100, n_peers=5, pool_size=8, k=3)
    plan = synthesize_stimuli(cfg, seed=5)
    assert len(plan) == 300
    for s in plan.entries.values():
        assert len(s.peers) == 5 and len(s.candidates) == 8 and s.k == 3
        assert len({p.peer_id for p in s.candidates}) == 8
    assert synthesize_stimuli(cfg, seed=5) == plan
    assert synthesize_stimuli(cfg, seed=6) != plan


def test_synth_point_mass_peers():
    plan = synthesize_stimuli(SynthConfig(n_participants=20, peer_pmf=(0, 0, 0, 0, 1)), seed=1)
    assert all(p.rating == 4 for s in plan.entries.values() for p in s.peers)


def test_synth_rejects_k_above_pool():
    with pytest.raises(PlanError):
        SynthConfig(pool_size=3, k=4)


@pytest.mark.parametrize("seed", range(5))
def test_replay_identity(seed):
    c = random_cohort(random.Random(seed), n_participants=7)
    replayed = run_cohort(ReplayAgent(c), stimuli_from_cohort(c), RunConfig(parallelism=3, label=c.label))
    assert replayed == c
    assert cohort_bytes(replayed) == cohort_bytes(c)


def test_failure_isolation_with_stub(stub_server):
    plan = synthesize_stimuli(SynthConfig(n_participants=5), seed=3)
    target = plan.entries[("p3", 2)]
    marker = "- id: p3\n"
    block = observation_block(target.candidates)

    def respond(prompt, n):
        # only the stage-3 prompt of (p3, round 2) carries this id line and candidate block
        if marker in prompt and block in prompt:
            return "I would follow the first three."
        return well_behaved(prompt, n)

    server = stub_server(respond)
    agent = LLMAgent(ModelEndpoint(server.url, "stub", max_retries=1, backoff=0.01, timeout=5))
    cohort = run_cohort(agent, plan, RunConfig(parallelism=4))
    agent.close()
    bad = [t for t in cohort if t.status is not Status.COMPLETE]
    assert [t.key for t in bad] == [("p3", 2)]
    assert bad[0].status is Status.FAILED_STAGE3
    assert bad[0].stage2.rating == 3
    assert len(cohort) == 15
