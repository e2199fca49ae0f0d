"""LLM-backed agent: prompt rendering, response parsing, and the HTTP client.

Prompts are sent as a single user message. Every attempt is appended to a
line-delimited audit log with the raw response text.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx

from .agents import AgentContext, AgentDecision, StageFailure, check_k
from .core import LIKERT_MAX, LIKERT_MIN, PeerObservation

log = logging.getLogger(__name__)

STAGE1_TEMPLATE = """\
You are the person agent_id={agent_id}. You have the following persona={persona}.
Rate the following statement on a Likert scale from 0 to 4 based on how much you believe the statement to be true,
where 0 = strongly disagree and 4 = strongly agree.

Statement: "{statement}"

Format your response EXACTLY as follows:
Rating: <number>
Reason: <a short paragraph>"""

STAGE2_TEMPLATE = """\
You are the person agent_id={agent_id}. You have the following persona: {persona}.
- Memory: {memory_summary}

The statement to evaluate:
"{statement}"

Your current belief about the statement is {prior} because: {initial_rationale}.
Now you observe the following neighbor ratings and rationales: {obs_str}

Task:
Considering your own persona and your observed neighbor opinions, rate how much you believe the given statement to be true on a Likert scale from 0 to 4, where:
0 = strongly disagree; 4 = strongly agree

Provide a short rationale (1--2 sentences) explaining your update.

Format your response EXACTLY as:
Rating: <number>
Reason: <a short paragraph>"""

STAGE3_TEMPLATE = """\
You are a person with the following profile.
- id: {agent_id}
- name: {name}
- persona: {persona}
- memory: {memory_summary}

The statement to evaluate: "{statement}"

Here is what you did in the previous stages:
{stage1_summary}
{stage2_summary}

You must choose exactly {k} candidates from the list below.
Candidates: {candidates_block}

Respond ONLY in strict JSON:
{
  "follow_ids": ["<id1>", "<id2>", ... exactly {k} ids ...],
  "reason": "<short explanation>"
}"""

TEMPLATES = {1: STAGE1_TEMPLATE, 2: STAGE2_TEMPLATE, 3: STAGE3_TEMPLATE}

_PLACEHOLDER = re.compile(r"\{([a-z_0-9]+)\}")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptFixture:
    stage: int
    filled_template: str


def fill_template(template: str, values: dict[str, object]) -> str:
    """Substitute ``{name}`` placeholders in one pass; JSON braces are left alone."""
    missing = sorted({m for m in _PLACEHOLDER.findall(template) if m not in values})
    if missing:
        raise PromptError(f"no value for placeholders {missing}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


def _one_line(text: str) -> str:
    return " ".join(text.split())


def observation_block(items: Sequence[PeerObservation]) -> str:
    """One ``id: .. | rating: .. | reason: ..`` line per entry, in input order."""
    lines = [f"id: {o.peer_id} | rating: {o.rating} | reason: {_one_line(o.reason)}" for o in items]
    return "\n" + "\n".join(lines)


def _base_values(ctx: AgentContext) -> dict[str, object]:
    if not ctx.statement or not ctx.statement.strip():
        raise PromptError("statement is empty")
    return {
        "agent_id": ctx.persona.agent_id,
        "persona": ctx.persona.demographics,
        "name": ctx.persona.display_name,
        "statement": ctx.statement,
        "memory_summary": "",
    }


def _summary(ctx: AgentContext, stage: int):
    for s in ctx.round_memory:
        if s.stage == stage:
            return s
    raise PromptError(f"round memory has no stage-{stage} summary")


def render_stage1_prompt(ctx: AgentContext) -> str:
    return fill_template(STAGE1_TEMPLATE, _base_values(ctx))


def render_stage2_prompt(ctx: AgentContext, peers: Sequence[PeerObservation]) -> str:
    if not peers:
        raise PromptError("no peers to show")
    first = _summary(ctx, 1)
    values = _base_values(ctx)
    values.update(prior=first.rating, initial_rationale=first.reason, obs_str=observation_block(peers))
    return fill_template(STAGE2_TEMPLATE, values)


def render_stage3_prompt(ctx: AgentContext, candidates: Sequence[PeerObservation], k: int) -> str:
    if not candidates:
        raise PromptError("no candidates to show")
    try:
        check_k(candidates, k)
    except ValueError as exc:
        raise PromptError(str(exc)) from None
    values = _base_values(ctx)
    values.update(
        stage1_summary=_summary(ctx, 1).text,
        stage2_summary=_summary(ctx, 2).text,
        k=k,
        candidates_block=observation_block(candidates),
    )
    return fill_template(STAGE3_TEMPLATE, values)


# -- parsing -------------------------------------------------------------------


class ParseError(ValueError):
    """Model output did not match the required format. ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


_STRICT_RATING = re.compile(r"^[ \t]*Rating:[ \t]*([+-]?\d+)[ \t]*$", re.MULTILINE)
_REASON = re.compile(r"Reason:[ \t]*", re.MULTILINE)
_LENIENT_RATING = re.compile(r"Rating\D*?([+-]?\d+)", re.IGNORECASE | re.DOTALL)


def format_rating_response(rating: int, reason: str) -> str:
    return f"Rating: {rating}\nReason: {reason}"


def _checked(value: str) -> int:
    rating = int(value)
    if not LIKERT_MIN <= rating <= LIKERT_MAX:
        raise ParseError("out_of_range", f"rating {rating} outside {LIKERT_MIN}..{LIKERT_MAX}")
    return rating


def parse_rating_response(text: str, lenient: bool = False) -> tuple[int, str]:
    """Extract ``(rating, reason)`` from a ``Rating:`` / ``Reason:`` reply.

    Strict mode wants a line ``Rating: <int>`` followed later by ``Reason:``;
    the reason runs to the end of the text. Lenient mode falls back to the
    first integer after the word "Rating". Out-of-range ratings always fail.
    """
    m = _STRICT_RATING.search(text)
    if m:
        rating = _checked(m.group(1))
        r = _REASON.search(text, m.end())
        if r:
            return rating, text[r.end():].strip()
        if not lenient:
            raise ParseError("no_reason", "no 'Reason:' after the rating line")
        return rating, ""
    if not lenient:
        raise ParseError("no_rating", "no 'Rating: <number>' line")
    m = _LENIENT_RATING.search(text)
    if not m:
        raise ParseError("no_rating", "no integer after 'Rating'")
    rating = _checked(m.group(1))
    r = _REASON.search(text, m.end())
    return rating, text[r.end():].strip() if r else ""


def _first_object(text: str):
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def parse_follow_response(
    text: str, candidates: Sequence[PeerObservation], k: int
) -> tuple[tuple[str, ...], str]:
    if not candidates:
        raise ValueError("no candidates")
    obj = _first_object(text)
    if obj is None:
        raise ParseError("no_object", "no JSON object in response")
    ids = obj.get("follow_ids")
    if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
        raise ParseError("bad_schema", "'follow_ids' must be a list of strings")
    if len(ids) != k:
        raise ParseError("wrong_count", f"expected {k} ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate_id", f"duplicate ids in {ids}")
    known = {c.peer_id for c in candidates}
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise ParseError("unknown_id", f"ids not among candidates: {unknown}")
    reason = obj.get("reason", "")
    return tuple(ids), reason if isinstance(reason, str) else json.dumps(reason)


# -- transport -------------------------------------------------------------------


class EndpointError(RuntimeError):
    pass


class RetriesExhausted(EndpointError):
    def __init__(self, attempts: int, last: str, kind: str):
        self.attempts = attempts
        self.kind = kind
        super().__init__(f"{attempts} attempts failed; last error ({kind}): {last}")


class EndpointUnreachable(RetriesExhausted):
    pass


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model_name: str
    temperature: float = 1.2
    timeout: float = 120.0
    max_retries: int = 3
    path: str = "/v1/chat/completions"
    response_path: str = "choices.0.message.content"
    api_key_env: str | None = None
    backoff: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + self.path

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env and os.environ.get(self.api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[self.api_key_env]}"
        return headers


def request_body(endpoint: ModelEndpoint, messages: Sequence[dict]) -> bytes:
    payload = {
        "model": endpoint.model_name,
        "messages": list(messages),
        "temperature": endpoint.temperature,
        "stream": False,
    }
    return json.dumps(payload, ensure_ascii=False).encode("utf-8")


def extract_field(obj, path: str):
    for part in path.split("."):
        if isinstance(obj, list) and part.isdigit() and int(part) < len(obj):
            obj = obj[int(part)]
        elif isinstance(obj, dict) and part in obj:
            obj = obj[part]
        else:
            raise EndpointError(f"response has no field {path!r}")
    if not isinstance(obj, str):
        raise EndpointError(f"field {path!r} is not text")
    return obj


def chat_complete(
    endpoint: ModelEndpoint, messages: Sequence[dict], client: httpx.Client | None = None
) -> str:
    """POST a chat completion and return the assistant text.

    Transport errors and non-2xx statuses are retried up to
    ``endpoint.max_retries`` times with exponential backoff.
    """
    body = request_body(endpoint, messages)
    own = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    attempts = endpoint.max_retries + 1
    kinds = []
    last = ""
    try:
        for attempt in range(attempts):
            if attempt:
                log.warning("retry %d/%d for %s after %s", attempt, endpoint.max_retries, endpoint.url, last)
                time.sleep(endpoint.backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(endpoint.url, content=body, headers=endpoint.headers())
            except httpx.TimeoutException as exc:
                kinds.append("timeout")
                last = repr(exc)
                continue
            except httpx.TransportError as exc:
                kinds.append("connect" if isinstance(exc, httpx.ConnectError) else "transport")
                last = repr(exc)
                continue
            if not resp.is_success:
                kinds.append("status")
                last = f"HTTP {resp.status_code}"
                continue
            try:
                data = resp.json()
            except ValueError:
                raise EndpointError("response is not JSON") from None
            if attempt:
                log.info("succeeded after %d retries", attempt)
            return extract_field(data, endpoint.response_path)
    finally:
        if own:
            client.close()
    if all(k == "connect" for k in kinds):
        raise EndpointUnreachable(attempts, last, "connect")
    raise RetriesExhausted(attempts, last, kinds[-1])


# -- audit log -------------------------------------------------------------------


class AuditLog:
    """Append-only line-delimited log of every model exchange."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, *, participant_id, round, stage, attempt, request_bytes, response_text, error=None):
        rec = {
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "participant_id": participant_id,
            "round": round,
            "stage": stage,
            "attempt": attempt,
            "request_bytes_sha256": hashlib.sha256(request_bytes).hexdigest(),
            "response_text": response_text,
        }
        if error is not None:
            rec["error"] = error
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line)


class LLMAgent:
    """Agent backed by a chat-completion endpoint.

    A reply that fails to parse is re-asked with the identical prompt up to
    ``parse_retries`` times before the stage is marked failed. An endpoint
    that refuses connections is fatal and propagates.
    """

    def __init__(
        self,
        endpoint: ModelEndpoint,
        audit_log: AuditLog | None = None,
        lenient: bool = False,
        parse_retries: int | None = None,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.audit_log = audit_log
        self.lenient = lenient
        self.parse_retries = endpoint.max_retries if parse_retries is None else parse_retries
        self.client = client or httpx.Client(timeout=endpoint.timeout)

    def close(self):
        self.client.close()

    def _ask(self, ctx: AgentContext, stage: int, prompt: str, parse):
        messages = [{"role": "user", "content": prompt}]
        body = request_body(self.endpoint, messages)
        last = ""
        for attempt in range(1, self.parse_retries + 2):
            try:
                text = chat_complete(self.endpoint, messages, client=self.client)
            except EndpointUnreachable:
                raise
            except EndpointError as exc:
                self._audit(ctx, stage, attempt, body, None, str(exc))
                raise StageFailure(stage, str(exc)) from None
            self._audit(ctx, stage, attempt, body, text, None)
            try:
                return parse(text)
            except ParseError as exc:
                last = str(exc)
                log.info("%s round %s stage %d attempt %d: %s", ctx.participant_id, ctx.round, stage, attempt, exc)
        raise StageFailure(stage, last)

    def _audit(self, ctx, stage, attempt, body, text, error):
        if self.audit_log is not None:
            self.audit_log.write(
                participant_id=ctx.participant_id,
                round=ctx.round,
                stage=stage,
                attempt=attempt,
                request_bytes=body,
                response_text=text,
                error=error,
            )

    def stage1(self, ctx):
        prompt = render_stage1_prompt(ctx)
        rating, reason = self._ask(ctx, 1, prompt, lambda t: parse_rating_response(t, self.lenient))
        return AgentDecision(rating=rating, reason=reason)

    def stage2(self, ctx, peers):
        prompt = render_stage2_prompt(ctx, peers)
        rating, reason = self._ask(ctx, 2, prompt, lambda t: parse_rating_response(t, self.lenient))
        return AgentDecision(rating=rating, reason=reason)

    def stage3(self, ctx, candidates, k):
        prompt = render_stage3_prompt(ctx, candidates, k)
        ids, reason = self._ask(ctx, 3, prompt, lambda t: parse_follow_response(t, candidates, k))
        return AgentDecision(follow_ids=ids, reason=reason)
