"""Per-app traversal sessions and the rules -> LLM -> human escalation ladder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .dedup import ScreenSignature, phash
from .sim import Action, HumanSolve, NotLaunched, SimDevice, SimError, action_from_dict
from .vh import (
    BACK,
    ActionTarget,
    SimplifiedVh,
    VhTree,
    extract_interactables,
    simplify_vh,
    vh_structural_hash,
)

log = logging.getLogger(__name__)

DEFAULT_TRIGGER_KEYWORDS = ("login", "sign in")
HUMAN_LEVEL = "human"


class DeviceFault(Exception):
    pass


@dataclass(frozen=True)
class SessionConfig:
    max_steps: int = 1000
    idle_window: int = 10
    trigger_keywords: tuple[str, ...] = DEFAULT_TRIGGER_KEYWORDS
    input_default_text: str = "hello world"
    llm_failure_budget: int = 3

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.idle_window < 2:
            raise ValueError("idle_window must be >= 2")
        if self.llm_failure_budget < 1:
            raise ValueError("llm_failure_budget must be >= 1")
        object.__setattr__(self, "trigger_keywords", tuple(k.lower() for k in self.trigger_keywords))


def action_to_dict(action: Action | Sequence[Action]) -> dict:
    if isinstance(action, (list, tuple)):
        return {"kind": "human", "actions": [a.to_dict() for a in action]}
    return action.to_dict()


def action_key(action: dict) -> tuple:
    """Hashable identity of a serialized action (input payload ignored)."""
    if action["kind"] == "human":
        return ("human", tuple(action_key(a) for a in action["actions"]))
    return (action["kind"], tuple(action.get("node_path", ())))


@dataclass
class UtgState:
    signature: ScreenSignature
    first_seen_step: int
    pending_targets: list[ActionTarget]
    back_tried: bool = False

    def discard(self, kind: str, node_path: tuple[int, ...]) -> None:
        self.pending_targets = [
            t for t in self.pending_targets if not (t.action_kind == kind and t.node_path == node_path)
        ]


@dataclass(frozen=True)
class UtgEdge:
    source: ScreenSignature
    action: dict
    target: ScreenSignature
    step: int


@dataclass
class Utg:
    states: dict[ScreenSignature, UtgState] = field(default_factory=dict)
    edges: list[UtgEdge] = field(default_factory=list)

    def add_state(self, sig: ScreenSignature, step: int, targets: list[ActionTarget]) -> UtgState:
        st = self.states.get(sig)
        if st is None:
            st = self.states[sig] = UtgState(sig, step, list(targets))
        return st

    def add_edge(self, source: ScreenSignature, action: dict, target: ScreenSignature, step: int) -> None:
        if source not in self.states or target not in self.states:
            raise KeyError("edge endpoint not registered")
        if self.edges and step < self.edges[-1].step:
            raise ValueError("edges must be added in step order")
        self.edges.append(UtgEdge(source, action, target, step))

    def resolved(self, sig: ScreenSignature) -> bool:
        """Some recorded action led from ``sig`` to a different screen."""
        return any(e.source == sig and e.target != sig for e in self.edges)

    def to_obj(self) -> dict:
        return {
            "states": [
                {
                    "signature": s.signature.key(),
                    "first_seen_step": s.first_seen_step,
                    "pending": [t.to_dict() for t in s.pending_targets],
                    "back_tried": s.back_tried,
                }
                for s in self.states.values()
            ],
            "edges": [[e.source.key(), e.action, e.target.key(), e.step] for e in self.edges],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> Utg:
        utg = cls()
        for s in obj["states"]:
            sig = ScreenSignature.from_key(s["signature"])
            utg.states[sig] = UtgState(
                sig, s["first_seen_step"], [ActionTarget.from_dict(t) for t in s["pending"]], s["back_tried"]
            )
        for src, action, dst, step in obj["edges"]:
            utg.edges.append(UtgEdge(ScreenSignature.from_key(src), action, ScreenSignature.from_key(dst), step))
        return utg


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    signature: ScreenSignature
    action: dict
    level: str
    result: str

    def to_obj(self) -> list:
        return [self.step, self.signature.key(), self.action, self.level, self.result]

    @classmethod
    def from_obj(cls, obj: list) -> HistoryEntry:
        step, sig, action, level, result = obj
        return cls(step, ScreenSignature.from_key(sig), action, level, result)


@dataclass(frozen=True)
class Observation:
    signature: ScreenSignature
    screenshot: np.ndarray | None = None
    reason: str | None = None
    step: int = 0


@dataclass(frozen=True)
class Decision:
    kind: str  # act | done | escalate
    action: ActionTarget | None = None
    reason: str | None = None

    @classmethod
    def act(cls, action: ActionTarget) -> Decision:
        return cls("act", action)

    @classmethod
    def done(cls) -> Decision:
        return cls("done")

    @classmethod
    def escalate(cls, reason: str) -> Decision:
        return cls("escalate", reason=reason)


class TraversalPolicy(Protocol):
    name: str

    def next_action(
        self, vh: VhTree, utg: Utg, history: Sequence[HistoryEntry], obs: Observation
    ) -> Decision: ...


class RulePolicy:
    """Fixed-order exploration: each pending target once, then back, then done."""

    name = "rules"

    def next_action(self, vh, utg, history, obs) -> Decision:
        return rule_policy_next(vh, utg, history, obs.signature)


def rule_policy_next(vh: VhTree, utg: Utg, history: Sequence[HistoryEntry], signature: ScreenSignature) -> Decision:
    state = utg.states[signature]
    if state.pending_targets:
        return Decision.act(state.pending_targets[0])
    if state.first_seen_step == 0 or state.back_tried:
        # root has nowhere to go back to; elsewhere a second back would repeat an edge
        return Decision.done()
    return Decision.act(BACK)


def detect_trigger(vh: VhTree, keywords: Sequence[str] = DEFAULT_TRIGGER_KEYWORDS) -> str | None:
    texts = []
    for _, node in vh.walk():
        if node.text:
            texts.append(node.text.lower())
        if node.content_description:
            texts.append(node.content_description.lower())
    for kw in keywords:
        k = kw.lower()
        if any(k in t for t in texts):
            return kw
    return None


def detect_idle(history: Sequence[ScreenSignature], window: int) -> bool:
    if window < 1 or len(history) < window:
        return False
    last = history[-window:]
    return all(s == last[0] for s in last)


@dataclass
class Capture:
    step: int
    image: np.ndarray
    vh: VhTree
    svh: SimplifiedVh
    signature: ScreenSignature
    level: str


@dataclass
class SessionResult:
    session_id: str
    status: str  # completed | paused_for_human | crashed
    steps_taken: int
    utg: Utg
    records: list[Capture]
    escalations: list[tuple[int, str, str]]
    final_signature: ScreenSignature | None = None
    error: str | None = None

    @property
    def completed(self) -> bool:
        return self.status == "completed"


class Session:
    """One traversal over one device. Survives pauses: call :meth:`resume` after a human acts."""

    def __init__(
        self,
        device: SimDevice,
        policies: Sequence[TraversalPolicy],
        config: SessionConfig = SessionConfig(),
        session_id: str = "session",
        on_event: Callable[[dict], None] | None = None,
    ):
        if not policies:
            raise ValueError("at least one policy is required")
        self.device = device
        self.policies = list(policies)
        self.config = config
        self.session_id = session_id
        self.on_event = on_event
        self.utg = Utg()
        self.history: list[HistoryEntry] = []
        self.signatures: list[ScreenSignature] = []
        self.escalations: list[tuple[int, str, str]] = []
        self.events: list[dict] = []
        self.n_events = 0
        self.steps_taken = 0
        self.n_captures = 0
        self.status = "running"
        self.frozen: ScreenSignature | None = None
        self._pending_edge: tuple[ScreenSignature, dict] | None = None
        self._phash_memo: dict[int, tuple[np.ndarray, object]] = {}
        self._vh_memo: dict[int, tuple[VhTree, SimplifiedVh, int]] = {}

    # ------------------------------------------------------------ helpers
    def _emit(self, event: dict) -> None:
        self.events.append(event)
        self.n_events += 1
        if self.on_event is not None:
            self.on_event(event)

    def level_name(self, level: int) -> str:
        return self.policies[level].name if level < len(self.policies) else HUMAN_LEVEL

    def signature_of(self, image: np.ndarray, vh: VhTree) -> tuple[ScreenSignature, SimplifiedVh]:
        hit = self._phash_memo.get(id(image))
        if hit is None or hit[0] is not image:
            hit = self._phash_memo[id(image)] = (image, phash(image))
        vhit = self._vh_memo.get(id(vh))
        if vhit is None or vhit[0] is not vh:
            svh = simplify_vh(vh)
            vhit = self._vh_memo[id(vh)] = (vh, svh, vh_structural_hash(svh))
        return ScreenSignature(hit[1], vhit[2]), vhit[1]

    def _capture(self, level: int, records: list[Capture]) -> tuple[VhTree, np.ndarray, ScreenSignature]:
        image = self.device.screenshot()
        vh = self.device.dump_vh()
        sig, svh = self.signature_of(image, vh)
        records.append(Capture(self.n_captures, image, vh, svh, sig, self.level_name(level)))
        self.n_captures += 1
        self.utg.add_state(sig, self.steps_taken, extract_interactables(vh, self.config.input_default_text))
        if self._pending_edge is not None:
            src, action = self._pending_edge
            self.utg.add_edge(src, action, sig, self.steps_taken)
            self._pending_edge = None
        self.signatures.append(sig)
        return vh, image, sig

    def _escalate(self, level: int, reason: str, sig: ScreenSignature) -> int:
        level += 1
        name = self.level_name(level)
        self.escalations.append((self.steps_taken, name, reason))
        self._emit(
            {
                "step": self.steps_taken,
                "signature": sig.key(),
                "action": None,
                "policy_level": name,
                "escalation": {"level": name, "reason": reason},
            }
        )
        log.debug("%s: escalate to %s (%s) at step %d", self.session_id, name, reason, self.steps_taken)
        if level < len(self.policies):
            begin = getattr(self.policies[level], "begin_episode", None)
            if begin is not None:
                begin(reason)
        return level

    def _result(self, records: list[Capture], error: str | None = None) -> SessionResult:
        return SessionResult(
            session_id=self.session_id,
            status=self.status,
            steps_taken=self.steps_taken,
            utg=self.utg,
            records=records,
            escalations=list(self.escalations),
            final_signature=self.signatures[-1] if self.signatures else None,
            error=error,
        )

    # ------------------------------------------------------------ main loop
    def run(self) -> SessionResult:
        records: list[Capture] = []
        cfg = self.config
        level = 0
        reason: str | None = None
        try:
            while True:
                vh, image, sig = self._capture(level, records)
                if self.steps_taken >= cfg.max_steps:
                    self.status = "completed"
                    break
                trigger = detect_trigger(vh, cfg.trigger_keywords)
                idle = detect_idle(self.signatures, cfg.idle_window)
                blocked_reason = None
                if trigger is not None and not self.utg.resolved(sig):
                    blocked_reason = f"trigger:{trigger}"
                elif idle:
                    blocked_reason = "idle"
                if level > 0 and trigger is None and not idle:
                    level, reason = 0, None

                decision = None
                while decision is None:
                    if level >= len(self.policies):
                        break
                    if level == 0 and blocked_reason is not None:
                        reason = blocked_reason
                        level = self._escalate(level, reason, sig)
                        continue
                    d = self.policies[level].next_action(
                        vh, self.utg, self.history, Observation(sig, image, reason, self.steps_taken)
                    )
                    if d.kind == "escalate":
                        level = self._escalate(level, d.reason or "declined", sig)
                    elif d.kind == "done":
                        if level == 0:
                            decision = d
                        elif blocked_reason is not None:
                            level = self._escalate(level, "declared_done_while_blocked", sig)
                        else:
                            level, reason = 0, None
                    else:
                        decision = d

                if level >= len(self.policies):
                    self.status = "paused_for_human"
                    self.frozen = sig
                    break
                if decision.kind == "done":
                    self.status = "completed"
                    break

                action = decision.action
                name = self.level_name(level)
                state = self.utg.states[sig]
                if action.action_kind == "back":
                    if level == 0:
                        state.back_tried = True
                else:
                    state.discard(action.action_kind, action.node_path)
                try:
                    res = self.device.perform(action)
                except (NotLaunched, SimError) as exc:
                    raise DeviceFault(str(exc)) from exc
                adict = action.to_dict()
                self.history.append(HistoryEntry(self.steps_taken, sig, adict, name, res.kind))
                self._emit({"step": self.steps_taken, "signature": sig.key(), "action": adict, "policy_level": name})
                self.steps_taken += 1
                if res.kind == "app_crashed":
                    raise DeviceFault(f"app crashed after {action.describe()}")
                self._pending_edge = (sig, adict)
        except DeviceFault as exc:
            self.status = "crashed"
            log.info("%s crashed: %s", self.session_id, exc)
            return self._result(records, error=str(exc))
        return self._result(records)

    def resume(self, human_actions: Sequence[Action]) -> SessionResult:
        """Apply human actions on the (already restored) device, then continue automatically."""
        if self.status != "paused_for_human":
            raise RuntimeError(f"session {self.session_id} is {self.status}, not paused")
        sig = self.frozen
        results = []
        for a in human_actions:
            results.append(self.device.perform(a).kind)
        adict = action_to_dict(list(human_actions))
        self.history.append(HistoryEntry(self.steps_taken, sig, adict, HUMAN_LEVEL, ",".join(results)))
        self._emit({"step": self.steps_taken, "signature": sig.key(), "action": adict, "policy_level": HUMAN_LEVEL})
        if human_actions:
            self._pending_edge = (sig, adict)
        self.status = "running"
        self.frozen = None
        return self.run()

    # ------------------------------------------------------------ persistence
    def snapshot(self) -> dict:
        return {
            "session_id": self.session_id,
            "status": self.status,
            "steps_taken": self.steps_taken,
            "n_captures": self.n_captures,
            "frozen": self.frozen.key() if self.frozen else None,
            "utg": self.utg.to_obj(),
            "history": [h.to_obj() for h in self.history],
            "signatures": [s.key() for s in self.signatures],
            "escalations": [list(e) for e in self.escalations],
            "n_events": self.n_events,
            "device_log": [e for e in self.device.action_log if e["call"] in ("install", "launch", "perform")],
        }

    @classmethod
    def restore(
        cls,
        snap: dict,
        device: SimDevice,
        policies: Sequence[TraversalPolicy],
        config: SessionConfig = SessionConfig(),
        on_event: Callable[[dict], None] | None = None,
    ) -> Session:
        """Rebuild a paused session. ``device`` must already be replayed to the frozen screen."""
        s = cls(device, policies, config, snap["session_id"], on_event)
        s.status = snap["status"]
        s.steps_taken = snap["steps_taken"]
        s.n_captures = snap["n_captures"]
        s.frozen = ScreenSignature.from_key(snap["frozen"]) if snap["frozen"] else None
        s.utg = Utg.from_obj(snap["utg"])
        s.history = [HistoryEntry.from_obj(h) for h in snap["history"]]
        s.signatures = [ScreenSignature.from_key(k) for k in snap["signatures"]]
        s.escalations = [tuple(e) for e in snap["escalations"]]
        s.n_events = snap["n_events"]
        return s


def run_session(
    device: SimDevice,
    policies: Sequence[TraversalPolicy],
    config: SessionConfig = SessionConfig(),
    session_id: str = "session",
) -> SessionResult:
    return Session(device, policies, config, session_id).run()


def replay_actions(device: SimDevice, actions: Sequence[dict]) -> list[str]:
    out = []
    for a in actions:
        if a["kind"] == "human":
            for sub in a["actions"]:
                out.append(device.perform(action_from_dict(sub)).kind)
        else:
            out.append(device.perform(action_from_dict(a)).kind)
    return out


__all__ = [
    "Capture",
    "Decision",
    "DeviceFault",
    "HistoryEntry",
    "HumanSolve",
    "Observation",
    "RulePolicy",
    "Session",
    "SessionConfig",
    "SessionResult",
    "TraversalPolicy",
    "Utg",
    "UtgEdge",
    "UtgState",
    "detect_idle",
    "detect_trigger",
    "rule_policy_next",
    "run_session",
]
