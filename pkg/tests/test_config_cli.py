import json

import pytest

from helpers import normalized_json_bytes
from screencrawl.cli import main
from screencrawl.config import CliConfig, ConfigError, load_config, policy_levels
from screencrawl.scenario import gated86_dir


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for k in list(os.environ):
        if k.startswith("SCREENCRAWL_"):
            monkeypatch.delenv(k)


# ---------------------------------------------------------------- config


def test_defaults():
    cfg = load_config(env={})
    assert cfg == CliConfig()
    assert cfg.hamming_threshold == 5 and cfg.max_steps == 1000 and cfg.idle_window == 10


def test_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "instances": 2, "max_steps": 50, "llm": {"model": "m-file"}}))
    env = {"SCREENCRAWL_INSTANCES": "3", "SCREENCRAWL_MAX_STEPS": "60", "SCREENCRAWL_LLM_MODEL": "m-env"}
    cfg = load_config(p, env=env, overrides={"max_steps": 70, "seed": None})
    assert (cfg.seed, cfg.instances, cfg.max_steps, cfg.llm.model) == (1, 3, 70, "m-env")


def test_env_coercion():
    cfg = load_config(env={"SCREENCRAWL_TRIGGER_KEYWORDS": "login, register", "SCREENCRAWL_LLM_MULTIMODAL": "yes"})
    assert cfg.trigger_keywords == ["login", "register"] and cfg.llm.multimodal is True


@pytest.mark.parametrize(
    "doc",
    [{"nope": 1}, {"seed": "abc"}, {"llm": 3}, {"hamming_threshold": 65}, {"idle_window": 1},
     {"policies": "llm,rules"}, {"policies": "rules,magic"}, {"llm": {"multimodal": "maybe"}}],
)
def test_bad_config(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(p, env={})


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", env={})
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json", env={})


def test_policy_levels():
    assert policy_levels("rules,llm,human-queue") == ["rules", "llm"]
    assert policy_levels("rules") == ["rules"]


# ---------------------------------------------------------------- exit codes


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["analyze", "bogus"]) == 2
    assert main(["crawl", "--root", str(tmp_path)]) == 2  # no inputs named
    assert main(["crawl", "--scenario", str(gated86_dir()), "--root", str(tmp_path), "--policies", "llm"]) == 2


def test_missing_inputs_are_operational(tmp_path):
    assert main(["crawl", "--metadata", str(tmp_path / "m.jsonl"), "--apps", str(tmp_path), "--root",
                 str(tmp_path / "o")]) == 1
    assert main(["analyze", "stats", "--root", str(tmp_path / "nothing")]) == 1
    assert main(["intervene", "list", "--root", str(tmp_path / "nothing")]) == 1


def test_duplicate_metadata_is_usage_error(tmp_path, scenario):
    apps = tmp_path / "apps"
    apps.mkdir()
    (apps / "app001.json").write_bytes((scenario.root / "apps/app001.json").read_bytes())
    m = json.dumps(scenario.metadata[0])
    (tmp_path / "m.jsonl").write_text(m + "\n" + m + "\n")
    assert main(["crawl", "--metadata", str(tmp_path / "m.jsonl"), "--apps", str(apps), "--root",
                 str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------- end to end


@pytest.fixture(scope="module")
def crawled(tmp_path_factory):
    root = tmp_path_factory.mktemp("crawl") / "ds"
    rc = main(["crawl", "--scenario", str(gated86_dir()), "--root", str(root), "--instances", "8"])
    return rc, root


def test_crawl_rules_llm(crawled, capsys):
    rc, root = crawled
    assert rc == 0
    report = json.loads((root / "fleet/report.json").read_text())
    assert report["summary"]["completed"] == 38 and report["summary"]["awaiting_intervention"] == 48
    for name in ("manifest.jsonl", "trajectories.jsonl", "apps.jsonl", "fleet/state.json", "fleet/dispatch_log.jsonl"):
        assert (root / name).exists()


def test_intervene_list_and_bad_ticket(crawled, capsys):
    _, root = crawled
    assert main(["intervene", "list", "--root", str(root)]) == 0
    out = capsys.readouterr().out
    assert "48 open tickets" in out
    acts = root.parent / "acts.json"
    acts.write_text('[{"kind": "human_solve"}]')
    assert main(["intervene", "resume", "ticket-99999", "--actions", str(acts), "--root", str(root)]) == 1
    assert "UnknownTicket" in capsys.readouterr().err


def test_analyze_and_taskgen(crawled, tmp_path):
    _, root = crawled
    assert main(["analyze", "all", "--root", str(root), "--out", str(tmp_path / "an"), "--per-bucket", "20"]) == 0
    stats = json.loads((tmp_path / "an/stats.json").read_text())
    assert stats["similarity_cdf"]["points"][-1][1] == 1.0
    assert {r["bucket"] for r in stats["matching"]["rows"]} == {"B1_5", "B6_10", "B11_15", "B16_20"}
    for task in ("vh-generation", "tappability", "relationship", "component-id"):
        assert main(["taskgen", task, "--root", str(root), "--out", str(tmp_path / "t")]) == 0
    gold = tmp_path / "t/tappability.eval.jsonl"
    assert main(["score", "tappability", "--pred", str(gold), "--gold", str(gold), "--out", str(tmp_path / "s.json")]) == 0
    assert json.loads((tmp_path / "s.json").read_text())["f1"] == 1.0
    assert main(["score", "tappability", "--pred", str(tmp_path / "none"), "--gold", str(gold)]) == 1


def test_taskgen_too_many_vh_samples(crawled, tmp_path):
    _, root = crawled
    assert main(["taskgen", "vh-generation", "--n", "100000", "--root", str(root), "--out", str(tmp_path)]) == 1


def test_rules_only_and_resume_all(tmp_path, capsys):
    root = tmp_path / "ds"
    assert main(["crawl", "--scenario", str(gated86_dir()), "--root", str(root), "--policies", "rules"]) == 0
    report = json.loads((root / "fleet/report.json").read_text())
    assert report["summary"]["completed"] == 16
    before = len((root / "fleet/dispatch_log.jsonl").read_text().splitlines())
    adir = gated86_dir() / "human_actions"
    assert main(["intervene", "resume-all", "--actions-dir", str(adir), "--root", str(root)]) == 0
    report = json.loads((root / "fleet/report.json").read_text())
    assert report["summary"]["completed"] == 86 and report["open_tickets"] == 0
    log = [json.loads(l) for l in (root / "fleet/dispatch_log.jsonl").read_text().splitlines()]
    assert len(log) > before and [e["seq"] for e in log] == list(range(len(log)))
    # a resumed ticket cannot be resumed again
    t = json.loads((root / "fleet/state.json").read_text())["tickets"][0]["ticket_id"]
    acts = tmp_path / "a.json"
    acts.write_text('[{"kind": "human_solve"}]')
    capsys.readouterr()
    assert main(["intervene", "resume", t, "--actions", str(acts), "--root", str(root)]) == 1
    assert "AlreadyResumed" in capsys.readouterr().err


def test_normalized_json_helper():
    a = normalized_json_bytes(b'{"x": 1, "timing": {"wall_seconds": 3}, "l": [{"wall_time": 2, "y": 1}]}')
    assert a == b'{"l": [{"y": 1}], "x": 1}'
