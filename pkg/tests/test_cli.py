import json
import random
import socket
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from conftest import make_trace, random_cohort, well_behaved

from beliefsim.cli import main
from beliefsim.core import Cohort, Status, load_cohort, save_cohort

HERE = Path(__file__).parent
DATA = HERE / "data"
GOLDEN = HERE / "golden" / "six"


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


def degroot_config(tmp_path, **extra):
    doc = {
        "agent": {"kind": "degroot", "params": {"alpha": 0.5, "initial": {"kind": "uniform"}}},
        "stimuli": {"source": "synth", "params": {"n_participants": 10}},
        "seed": 7,
        "output_path": "out/degroot.jsonl",
    }
    doc.update(extra)
    return write_config(tmp_path / "run.yaml", doc)


def test_evaluate_matches_golden(tmp_path, capsys):
    out = tmp_path / "report"
    code = main([
        "evaluate", "--subject", str(DATA / "subject.jsonl"), "--reference", str(DATA / "reference.jsonl"),
        "--out", str(out), "--seed", "0",
    ])
    assert code == 0
    for golden in sorted(GOLDEN.iterdir()):
        assert (out / golden.name).read_text(encoding="utf-8") == golden.read_text(encoding="utf-8"), golden.name
    assert "Stage 1: initial belief distributions" in capsys.readouterr().out


def test_evaluate_self_comparison(tmp_path):
    c = random_cohort(random.Random(2), n_participants=10, statuses=False, label="c")
    save_cohort(c, tmp_path / "c.jsonl")
    assert main(["evaluate", "--subject", str(tmp_path / "c.jsonl"), "--reference", str(tmp_path / "c.jsonl"),
                 "--out", str(tmp_path / "r")]) == 0
    m = json.loads((tmp_path / "r" / "metrics.json").read_text())[0]
    assert m["stage1"]["kl"] == 0 and m["stage1"]["wasserstein"] == 0
    assert m["stage1"]["spearman"][0] == pytest.approx(1.0)
    assert m["stage3"]["follow_spearman"][0] == pytest.approx(1.0)


def test_evaluate_disjoint_exit_4(tmp_path, capsys):
    save_cohort(Cohort.from_traces("a", [make_trace(pid="x")]), tmp_path / "a.jsonl")
    save_cohort(Cohort.from_traces("b", [make_trace(pid="y")]), tmp_path / "b.jsonl")
    code = main(["evaluate", "--subject", str(tmp_path / "a.jsonl"), "--reference", str(tmp_path / "b.jsonl"),
                 "--out", str(tmp_path / "r")])
    assert code == 4
    assert "no comparable instances" in capsys.readouterr().err


def test_evaluate_groups(tmp_path):
    args = ["evaluate", "--reference", str(DATA / "reference.jsonl"), "--out", str(tmp_path / "r")]
    args += ["--subject", str(DATA / "subject.jsonl")] * 2
    assert main(args + ["--group", "only-one"]) == 2
    assert main(args + ["--group", "g", "--group", "g"]) == 0
    text = (tmp_path / "r" / "report.txt").read_text()
    assert "Average" in text


def test_validate(tmp_path, capsys):
    assert main(["validate", str(DATA / "reference.jsonl")]) == 0
    assert "ok: 6 traces" in capsys.readouterr().out
    bad = tmp_path / "bad.jsonl"
    lines = (DATA / "reference.jsonl").read_text().splitlines()
    rec = json.loads(lines[2])
    rec["stage1"]["rating"] = 9
    lines[2] = json.dumps(rec)
    bad.write_text("\n".join(lines) + "\n")
    assert main(["validate", str(bad)]) == 4
    assert "line 3" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.jsonl")]) == 4


def test_validate_strict_schema(tmp_path):
    rec = json.loads((DATA / "reference.jsonl").read_text().splitlines()[0])
    rec["extra"] = True
    p = tmp_path / "x.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    assert main(["validate", str(p)]) == 0
    assert main(["validate", "--strict-schema", str(p)]) == 4


def _rated(path, ratings):
    save_cohort(Cohort.from_traces("h", [make_trace(pid=f"p{i:04d}", s1=r) for i, r in enumerate(ratings)]), path)


def test_baseline_constant(tmp_path, capsys):
    _rated(tmp_path / "c.jsonl", [2] * 20)
    assert main(["baseline", str(tmp_path / "c.jsonl"), "--seeds", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "seed,kl,wasserstein"
    assert len(lines) == 7
    assert all(l.endswith(",0.0000,0.0000") for l in lines[1:])


def test_baseline_uniform_and_seed(tmp_path, capsys):
    rng = random.Random(0)
    _rated(tmp_path / "u.jsonl", [rng.randint(0, 4) for _ in range(1000)])
    assert main(["baseline", str(tmp_path / "u.jsonl"), "--seeds", "20", "--seed", "100",
                 "--out", str(tmp_path / "b.csv")]) == 0
    out = capsys.readouterr().out
    assert out == (tmp_path / "b.csv").read_text()
    rows = out.splitlines()
    assert rows[1].startswith("100,")
    kl_mean = float(rows[-1].split(",")[1])
    assert kl_mean < 0.05


def test_baseline_too_small(tmp_path):
    _rated(tmp_path / "one.jsonl", [3])
    assert main(["baseline", str(tmp_path / "one.jsonl")]) == 4


def test_export(tmp_path, capsys):
    assert main(["export", "--subject", str(DATA / "subject.jsonl"), "--which", "bnd", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "hist_bnd_subject.csv").exists()
    assert main(["export", "--subject", str(DATA / "subject.jsonl"), "--out", str(tmp_path / "all")]) == 0
    assert len(list((tmp_path / "all").iterdir())) == 6


# -- simulate --------------------------------------------------------------------


def test_simulate_scripted_is_deterministic(tmp_path):
    cfg = degroot_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == 0
    first = (tmp_path / "out" / "degroot.jsonl").read_bytes()
    assert main(["simulate", "--config", str(cfg), "--parallelism", "8"]) == 0
    assert (tmp_path / "out" / "degroot.jsonl").read_bytes() == first
    assert len(first.splitlines()) == 30
    assert (tmp_path / "out" / "degroot.jsonl.audit.jsonl").exists()
    assert main(["simulate", "--config", str(cfg), "--seed", "8"]) == 0
    assert (tmp_path / "out" / "degroot.jsonl").read_bytes() != first


def test_simulate_missing_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", {"agent": {"kind": "degroot"}, "output_path": "x.jsonl"})
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "stimuli" in capsys.readouterr().err


@pytest.mark.parametrize(
    "doc,field",
    [
        ({"agent": {"kind": "wizard"}}, "agent.kind"),
        ({"agent": {"kind": "degroot", "params": {"alpha": 3}}}, "agent.params"),
        ({"agent": {"kind": "llm"}}, "endpoint"),
        ({"parallelism": 0}, "parallelism"),
        ({"stimuli": {"source": "synth", "params": {"k": 99}}}, "stimuli.params"),
    ],
)
def test_simulate_config_errors(tmp_path, capsys, doc, field):
    cfg = degroot_config(tmp_path, **doc)
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert field in capsys.readouterr().err


def test_simulate_unreadable_config(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.yaml")]) == 2
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    assert main(["simulate", "--config", str(tmp_path / "list.yaml")]) == 2


def test_simulate_replay_from_file(tmp_path):
    cfg = write_config(tmp_path / "replay.yaml", {
        "agent": {"kind": "replay", "params": {"source": str(DATA / "reference.jsonl")}},
        "stimuli": {"source": "file", "path": str(DATA / "reference.jsonl")},
        "rounds": 1,
        "min_complete_fraction": 0.5,
        "output_path": "replayed.jsonl",
        "label": "reference",
    })
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert (tmp_path / "replayed.jsonl").read_text() == (DATA / "reference.jsonl").read_text()


def llm_config(tmp_path, url, **extra):
    doc = {
        "agent": {"kind": "llm", "params": {"parse_retries": 1}},
        "endpoint": {"base_url": url, "model_name": "stub", "max_retries": 1, "backoff": 0.01, "timeout": 5},
        "stimuli": {"source": "synth", "params": {"n_participants": 4}},
        "parallelism": 4,
        "output_path": "llm.jsonl",
    }
    doc.update(extra)
    return write_config(tmp_path / "llm.yaml", doc)


def test_simulate_with_stub_endpoint(tmp_path, stub_server):
    server = stub_server(well_behaved)
    assert main(["simulate", "--config", str(llm_config(tmp_path, server.url))]) == 0
    cohort = load_cohort(tmp_path / "llm.jsonl")
    assert len(cohort) == 12 and all(t.status is Status.COMPLETE for t in cohort)
    audit = (tmp_path / "llm.jsonl.audit.jsonl").read_text().splitlines()
    assert len(audit) == 36


def test_simulate_low_completion_exit_4(tmp_path, stub_server):
    def respond(prompt, n):
        if prompt.startswith("You are a person"):
            return "no json here"
        return well_behaved(prompt, n)

    server = stub_server(respond)
    assert main(["simulate", "--config", str(llm_config(tmp_path, server.url))]) == 4
    cohort = load_cohort(tmp_path / "llm.jsonl")
    assert {t.status for t in cohort} == {Status.FAILED_STAGE3}


def test_simulate_unreachable_exit_3(tmp_path):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert main(["simulate", "--config", str(llm_config(tmp_path, f"http://127.0.0.1:{port}"))]) == 3
    assert (tmp_path / "llm.jsonl.audit.jsonl").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "beliefsim", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "simulate" in out.stdout
