import pytest

from helpers import fake_sig, node, three_screen_app, tree, BUTTON
from screencrawl.llm import LlmPolicy, ScriptedChat
from screencrawl.scenario import TEST_EMAIL, TEST_PASSWORD, llm_transcript, random_app
from screencrawl.sim import HumanSolve, SimDevice, load_app_model
from screencrawl.traversal import (
    Decision,
    RulePolicy,
    Session,
    SessionConfig,
    Utg,
    action_key,
    detect_idle,
    detect_trigger,
    rule_policy_next,
    run_session,
)
from screencrawl.vh import BACK, ActionTarget


def device_for(doc, seed=0):
    dev = SimDevice("t")
    dev.install(load_app_model(doc), seed)
    dev.launch()
    return dev


def scripted_llm():
    return LlmPolicy(ScriptedChat([(r["match"], r["response"]) for r in llm_transcript()]))


def gated(kind, seed=31):
    return random_app(seed, kind, credentials=(TEST_EMAIL, TEST_PASSWORD))


# ---------------------------------------------------------------- examples


def test_three_screen_app_completes():
    res = run_session(device_for(three_screen_app()), [RulePolicy()])
    assert res.status == "completed"
    assert len(res.utg.states) == 3
    # open, more, back, back, then done at the root
    assert res.steps_taken == 4


def test_login_rules_only_pauses_on_trigger():
    res = run_session(device_for(gated("login")), [RulePolicy()])
    assert res.status == "paused_for_human"
    assert res.escalations[-1][1:] == ("human", "trigger:login")
    assert res.steps_taken == 0


def test_login_with_scripted_llm_completes():
    dev = device_for(gated("login"))
    res = run_session(dev, [RulePolicy(), scripted_llm()])
    assert res.status == "completed"
    assert dev.unlocked_gates == {"gate"}
    assert len(res.utg.states) > 2
    levels = [e[1] for e in res.escalations]
    assert levels == ["llm"]


def test_captcha_with_llm_escalates_to_human():
    res = run_session(device_for(gated("captcha")), [RulePolicy(), scripted_llm()])
    assert res.status == "paused_for_human"
    assert [e[1] for e in res.escalations] == ["llm", "human"]
    assert res.escalations[-1][2] == "llm:give_up"


def test_resume_after_pause_completes():
    dev = device_for(gated("captcha"))
    s = Session(dev, [RulePolicy()], SessionConfig(), "s")
    assert s.run().status == "paused_for_human"
    res = s.resume([HumanSolve()])
    assert res.status == "completed"
    assert dev.unlocked_gates == {"gate"}


def test_snapshot_restore_on_fresh_device():
    doc = gated("captcha", seed=40)
    dev = device_for(doc)
    s = Session(dev, [RulePolicy()], SessionConfig(), "s")
    s.run()
    snap = s.snapshot()

    fresh = SimDevice("other")
    fresh.replay(load_app_model(doc), snap["device_log"])
    restored = Session.restore(snap, fresh, [RulePolicy()])
    a = restored.resume([HumanSolve()])
    b = s.resume([HumanSolve()])
    assert (a.status, a.steps_taken) == (b.status, b.steps_taken)
    assert [e.target for e in a.utg.edges] == [e.target for e in b.utg.edges]


def test_resume_requires_pause():
    s = Session(device_for(three_screen_app()), [RulePolicy()])
    s.run()
    with pytest.raises(RuntimeError):
        s.resume([HumanSolve()])


def test_idle_gate_escalation():
    # a policy that only ever taps the first target never leaves an idle loop
    class Stubborn:
        name = "stubborn"

        def next_action(self, vh, utg, history, obs):
            return Decision.act(ActionTarget((1,), "tap"))

    res = run_session(device_for(gated("idle_loop")), [Stubborn()], SessionConfig(idle_window=4))
    assert res.status == "paused_for_human"
    assert res.escalations[-1][2] == "idle"
    assert res.steps_taken == 3


def test_max_steps_budget():
    res = run_session(device_for(random_app(2, n_screens=30)), [RulePolicy()], SessionConfig(max_steps=5))
    assert res.status == "completed" and res.steps_taken == 5


def test_crash_reports_partial_results():
    doc = random_app(12, crash_probability=1.0)
    assert any(t.get("crash_probability") for t in doc["transitions"])
    res = run_session(device_for(doc), [RulePolicy()])
    assert res.status == "crashed"
    assert res.error and res.records


def test_config_validation():
    with pytest.raises(ValueError):
        SessionConfig(max_steps=0)
    with pytest.raises(ValueError):
        SessionConfig(idle_window=1)
    with pytest.raises(ValueError):
        Session(SimDevice("x"), [])


# ---------------------------------------------------------------- rule policy


def _utg_with(targets, step):
    utg = Utg()
    sig = fake_sig(1)
    utg.add_state(sig, step, targets)
    return utg, sig


def test_rule_first_target_in_order():
    t = [ActionTarget((0,), "tap"), ActionTarget((1,), "tap"), ActionTarget((1,), "scroll")]
    utg, sig = _utg_with(t, 3)
    assert rule_policy_next(None, utg, [], sig) == Decision.act(t[0])


def test_rule_exhausted_non_root_goes_back():
    utg, sig = _utg_with([], 3)
    assert rule_policy_next(None, utg, [], sig) == Decision.act(BACK)
    utg.states[sig].back_tried = True
    assert rule_policy_next(None, utg, [], sig).kind == "done"


def test_rule_exhausted_root_done():
    utg, sig = _utg_with([], 0)
    assert rule_policy_next(None, utg, [], sig) == Decision.done()


def test_rule_policy_never_repeats_state_action():
    for seed in range(30):
        res = run_session(device_for(random_app(seed)), [RulePolicy()])
        pairs = [(e.source, action_key(e.action)) for e in res.utg.edges]
        assert len(pairs) == len(set(pairs))


# ---------------------------------------------------------------- triggers and idleness


def test_trigger_examples():
    assert detect_trigger(tree(node(children=[node(text="Sign In to continue")]))) == "sign in"
    assert detect_trigger(tree(node(children=[node(text="Welcome")]))) is None
    assert detect_trigger(tree(node(children=[node(text="LOGIN")])), ["login", "sign in"]) == "login"
    assert detect_trigger(tree(node(children=[node(content_desc="Sign in or login")]))) == "login"


def test_trigger_sees_hidden_nodes_too():
    t = tree(node(children=[node(flags=["enabled"], text="login")]))
    assert detect_trigger(t) == "login"


def test_idle_examples():
    a, b = fake_sig(1), fake_sig(2)
    assert detect_idle([b, a, a, a, a, a], 5)
    assert not detect_idle([a, a, a, a], 5)
    assert not detect_idle([a, a, b, a, a], 5)


def test_trigger_cleared_returns_to_rules():
    s = Session(device_for(gated("login", seed=50)), [RulePolicy(), scripted_llm()])
    assert s.run().status == "completed"
    assert [h.level for h in s.history[:3]] == ["llm"] * 3  # email, password, submit
    assert all(h.level == "rules" for h in s.history[3:])


def test_button_only_screen_taps_then_done():
    doc = three_screen_app()
    doc["screens"] = doc["screens"][:1]
    doc["transitions"] = []
    doc["screens"][0]["root"]["children"].append(node("android.widget.Button", (0, 200, 360, 260), BUTTON, text="Noop"))
    res = run_session(device_for(doc), [RulePolicy()])
    assert res.status == "completed" and res.steps_taken == 2
