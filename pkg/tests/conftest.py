import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from beliefsim.core import Cohort, PeerObservation, Persona, RoundTrace, StageResponse, Status


def make_trace(
    pid="p1",
    rnd=1,
    s1=2,
    s2=None,
    peers=(2, 3),
    candidates=(("c1", 1), ("c2", 3), ("c3", 4)),
    follows=("c2",),
    status=Status.COMPLETE,
    big5=None,
    reason="because",
):
    """Build a RoundTrace with terse defaults; ``peers`` is a list of ratings."""
    peer_obs = tuple(PeerObservation(f"n{i}", r, f"peer says {r}") for i, r in enumerate(peers))
    cand_obs = tuple(PeerObservation(cid, r, f"cand says {r}") for cid, r in candidates)
    done = Status(status).stages_done
    return RoundTrace(
        participant_id=pid,
        round=rnd,
        topic="immigration",
        statement="A statement.",
        statement_is_true=False,
        persona=Persona(pid, f"Name {pid}", "a persona", big5),
        stage1=StageResponse(s1, reason) if done >= 1 else None,
        peers=peer_obs,
        stage2=StageResponse(s1 if s2 is None else s2, reason) if done >= 2 else None,
        candidates=cand_obs,
        k=len(follows) if follows else 1,
        follows=tuple(follows) if done >= 3 else None,
        status=status,
    )


def random_cohort(rng: random.Random, n_participants=8, rounds=3, label="c", statuses=True):
    traces = []
    big5_keys = ("openness", "conscientiousness", "extraversion", "agreeableness", "neuroticism")
    for p in range(n_participants):
        big5 = (
            {k: rng.uniform(1, 5) for k in big5_keys} if rng.random() < 0.5 else None
        )
        for r in range(1, rounds + 1):
            n_c = rng.randint(2, 6)
            cands = tuple((f"c{j}", rng.randint(0, 4)) for j in range(n_c))
            k = rng.randint(1, n_c)
            follows = tuple(rng.sample([c for c, _ in cands], k))
            status = Status.COMPLETE
            if statuses and rng.random() < 0.2:
                status = rng.choice(list(Status))
            traces.append(
                make_trace(
                    pid=f"p{p}",
                    rnd=r,
                    s1=rng.randint(0, 4),
                    s2=rng.randint(0, 4),
                    peers=tuple(rng.randint(0, 4) for _ in range(rng.randint(1, 5))),
                    candidates=cands,
                    follows=follows,
                    status=status,
                    big5=big5,
                    reason=rng.choice(["ok", "unicode ✓ reason", 'quotes "x"\nnewline']),
                )
            )
    return Cohort.from_traces(label, traces)


class StubChatServer:
    """Minimal chat-completions server driven by a ``respond(prompt, call_no)`` callback.

    The callback returns either a string (assistant text) or an int HTTP status.
    """

    def __init__(self, respond):
        self.respond = respond
        self.requests = []
        self.lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                payload = json.loads(body)
                with server.lock:
                    server.requests.append(payload)
                    n = len(server.requests)
                out = server.respond(payload["messages"][-1]["content"], n)
                if isinstance(out, int):
                    self.send_response(out)
                    self.end_headers()
                    return
                data = json.dumps({"choices": [{"message": {"role": "assistant", "content": out}}]})
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(data.encode())

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def stage_of(prompt: str) -> int:
    if prompt.startswith("You are a person with the following profile."):
        return 3
    if "Now you observe the following neighbor ratings" in prompt:
        return 2
    return 1


def well_behaved(prompt: str, call_no: int):
    """A stub model: rates 2 at stage 1, 3 at stage 2, follows the first k candidates."""
    stage = stage_of(prompt)
    if stage == 1:
        return "Rating: 2\nReason: stage one"
    if stage == 2:
        return "Rating: 3\nReason: stage two"
    k = int(prompt.split("You must choose exactly ")[1].split()[0])
    block = prompt.split("Candidates: ")[1].split("\n\nRespond ONLY")[0]
    ids = [line.split(" | ")[0][4:] for line in block.strip().splitlines()]
    return json.dumps({"follow_ids": ids[:k], "reason": "first ones"})


@pytest.fixture
def stub_server():
    servers = []

    def start(respond=well_behaved):
        s = StubChatServer(respond).__enter__()
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.__exit__(None, None, None)


SIX_CANDIDATES = (("c1", 0), ("c2", 2), ("c3", 3), ("c4", 4))
SIX_PEERS = {
    "p1": (2, 2),
    "p2": (0, 2),
    "p3": (4, 4),
    "p4": (3, 1),
    "p5": (1, 2),
    "p6": (2, 3),
    "p7": (1, 1),
}


def six_trace_pair():
    """A hand-built (subject, reference) pair.

    Reference p6 failed stage 3; subject has an extra key p7 with no counterpart.
    """
    ref_rows = {
        "p1": (0, 1, ("c1", "c2")),
        "p2": (1, 1, ("c1", "c2")),
        "p3": (2, 3, ("c2", "c3")),
        "p4": (3, 3, ("c3", "c4")),
        "p5": (4, 3, ("c4", "c3")),
        "p6": (2, 2, None),
    }
    subj_rows = {
        "p1": (1, 2, ("c2", "c3")),
        "p2": (1, 1, ("c1", "c3")),
        "p3": (2, 2, ("c2", "c4")),
        "p4": (4, 4, ("c4", "c3")),
        "p5": (4, 3, ("c3", "c4")),
        "p6": (3, 3, ("c2", "c3")),
        "p7": (2, 1, ("c1", "c2")),
    }

    def build(label, rows):
        traces = [
            make_trace(
                pid=pid,
                s1=s1,
                s2=s2,
                peers=SIX_PEERS[pid],
                candidates=SIX_CANDIDATES,
                follows=follows or ("c1", "c2"),
                status=Status.COMPLETE if follows else Status.FAILED_STAGE3,
            )
            for pid, (s1, s2, follows) in rows.items()
        ]
        return Cohort.from_traces(label, traces)

    return build("subject", subj_rows), build("reference", ref_rows)


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``criterion(n, title)`` are grouped by n; a criterion passes only
# if every one of its tests passes. One line per criterion is printed at the end.


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    n, title = mark.args
    entry = item.config._criteria.setdefault(n, {"title": title, "failed": [], "passed": []})
    (entry["passed"] if report.passed else entry["failed"]).append(item.name)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(criteria):
        e = criteria[n]
        status = "FAIL" if e["failed"] else "PASS"
        line = f"criterion {n:2d}: {status}  {e['title']}"
        if e["failed"]:
            line += f"  (failing: {', '.join(e['failed'])})"
        terminalreporter.write_line(line)
