"""Chat-completion endpoints as traversal policies.

The model answers with exactly one line::

    ACTION <kind> [<index>] ["<text>"]

where ``kind`` is one of tap, input_text, scroll, back, declare_done, give_up and
``index`` is a 1-based position in the numbered element list of the prompt.
Prompt templates here are original to this package.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence, Union

from .traversal import Decision, HistoryEntry, Observation, Utg
from .vh import (
    BACK,
    ActionTarget,
    SimpleNode,
    SimplifiedVh,
    VhTree,
    effectively_visible,
    permitted_actions,
    simplify_vh,
)

log = logging.getLogger(__name__)

LLM_KINDS = ("tap", "input_text", "scroll", "back", "declare_done", "give_up")
DEFAULT_FAILURE_BUDGET = 3
DEFAULT_HISTORY = 5
DEFAULT_EPISODE_ACTIONS = 30

SYSTEM_PROMPT = (
    "You control an Android app for an automated screen crawler. "
    "Pick one action per turn from the numbered element list."
)
GOALS = {
    "pass_login": (
        "Goal: get past this login or registration screen (sign in with valid account details) "
        "so the crawler can reach the screens behind it. Reply declare_done once past it."
    ),
    "explore": (
        "Goal: the crawler is stuck on this screen. Explore the app and reach screens "
        "that have not been visited yet."
    ),
}
GRAMMAR_FOOTER = (
    "Reply with exactly one line:\n"
    'ACTION <kind> [<index>] ["<text>"]\n'
    "kinds: tap <index> | input_text <index> \"<text>\" | scroll <index> | back | declare_done | give_up"
)

_ACTION_RE = re.compile(
    r'^ACTION\s+(?P<kind>[a-z_]+)(?:\s+(?P<index>\d+))?(?:\s+"(?P<text>(?:[^"\\]|\\.)*)")?$'
)


class LlmError(Exception):
    pass


class UnparseableResponse(LlmError):
    pass


class IndexOutOfRange(LlmError):
    pass


class ActionNotPermitted(LlmError):
    pass


class NoMatchingRule(LlmError):
    pass


class ChatTransportError(LlmError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    messages: tuple[dict, ...]

    def text(self) -> str:
        parts = [self.system_prompt]
        for m in self.messages:
            c = m["content"]
            if isinstance(c, str):
                parts.append(c)
            else:
                parts.extend(p["text"] for p in c if p.get("type") == "text")
        return "\n".join(parts)

    def to_obj(self) -> dict:
        return {"system_prompt": self.system_prompt, "messages": list(self.messages)}

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True)


@dataclass(frozen=True)
class ChatResponse:
    content: str


class ChatEndpoint(Protocol):
    multimodal: bool

    def complete(self, request: ChatRequest) -> ChatResponse: ...


@dataclass(frozen=True)
class LlmAction:
    kind: str
    target_index: int | None = None
    text: str | None = None


@dataclass(frozen=True)
class PromptElement:
    index: int
    path: tuple[int, ...]  # path in the simplified tree
    node: SimpleNode
    kinds: tuple[str, ...]


def prompt_elements(svh: SimplifiedVh) -> list[PromptElement]:
    out = []
    for path, node in svh.walk():
        kinds = tuple(
            k for k, f in (("tap", "clickable"), ("input_text", "editable"), ("scroll", "scrollable")) if f in node.flags
        )
        if kinds:
            out.append(PromptElement(len(out) + 1, path, node, kinds))
    return out


def _describe_history(entry: HistoryEntry) -> str:
    a = entry.action
    if a["kind"] == "human":
        desc = "human intervention"
    else:
        desc = a["kind"]
        if a.get("node_path"):
            desc += " " + "/".join(map(str, a["node_path"]))
        if a.get("text") is not None:
            desc += f' "{a["text"]}"'
    return f"- step {entry.step} [{entry.level}] {desc} -> {entry.result}"


def build_prompt(
    goal: str,
    svh: SimplifiedVh,
    history: Sequence[HistoryEntry] = (),
    k: int = DEFAULT_HISTORY,
    screenshot_png: bytes | None = None,
) -> ChatRequest:
    if goal not in GOALS:
        raise ValueError(f"unknown goal {goal!r}")
    lines = [GOALS[goal], "", "Screen elements (index. class label text [left, top, right, bottom] actions):"]
    for el in prompt_elements(svh):
        n = el.node
        b = ", ".join(f"{v:.3f}" for v in n.bounds)
        label = json.dumps(n.label or "", ensure_ascii=False)
        text = json.dumps(n.text or "", ensure_ascii=False)
        lines.append(f"{el.index}. {n.class_name} label={label} text={text} [{b}] {'/'.join(el.kinds)}")
    if not prompt_elements(svh):
        lines.append("(no interactable elements)")
    lines += ["", GRAMMAR_FOOTER, "", "Recent actions:"]
    recent = list(history)[-k:] if k > 0 else []
    lines += [_describe_history(h) for h in recent] or ["(none)"]
    text = "\n".join(lines)
    if screenshot_png is None:
        content: Union[str, list] = text
    else:
        url = "data:image/png;base64," + base64.b64encode(screenshot_png).decode("ascii")
        content = [{"type": "text", "text": text}, {"type": "image_url", "image_url": {"url": url}}]
    return ChatRequest(SYSTEM_PROMPT, ({"role": "user", "content": content},))


def parse_action(response: ChatResponse, n_targets: int) -> LlmAction:
    content = (response.content or "").strip()
    m = _ACTION_RE.match(content)
    if m is None or m.group("kind") not in LLM_KINDS:
        raise UnparseableResponse(content[:200])
    kind = m.group("kind")
    index = int(m.group("index")) if m.group("index") is not None else None
    text = m.group("text")
    if text is not None:
        text = re.sub(r"\\(.)", r"\1", text)
    if kind in ("tap", "scroll", "input_text"):
        if index is None:
            raise UnparseableResponse(f"{kind} needs an index")
        if not 1 <= index <= n_targets:
            raise IndexOutOfRange(f"index {index} not in 1..{n_targets}")
    if kind == "input_text" and text is None:
        raise UnparseableResponse("input_text needs a quoted text")
    if kind in ("back", "declare_done", "give_up") and (index is not None or text is not None):
        raise UnparseableResponse(f"{kind} takes no arguments")
    if kind in ("tap", "scroll") and text is not None:
        raise UnparseableResponse(f"{kind} takes no text")
    return LlmAction(kind, index, text)


# ---------------------------------------------------------------- endpoints

Matcher = Union[str, Callable[[str], bool]]


class ScriptedChat:
    """Deterministic stand-in for a chat model: first matching rule wins."""

    multimodal = False

    def __init__(self, transcript: Sequence[tuple[Matcher, str]]):
        if not transcript:
            raise ValueError("transcript must not be empty")
        self._rules = []
        for matcher, response in transcript:
            if isinstance(matcher, str):
                rx = re.compile(matcher)
                self._rules.append((lambda s, rx=rx: rx.search(s) is not None, response))
            else:
                self._rules.append((matcher, response))
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
        text = request.text()
        for match, response in self._rules:
            if match(text):
                return ChatResponse(response)
        raise NoMatchingRule(text[:120])

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedChat:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = doc["rules"] if isinstance(doc, dict) else doc
        return cls([(r["match"], r["response"]) for r in rules])


def scripted_double(transcript: Sequence[tuple[Matcher, str]]) -> ScriptedChat:
    return ScriptedChat(transcript)


@dataclass
class HttpChatClient:
    """Client for the common ``/chat/completions`` JSON shape."""

    url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    retries: int = 2
    multimodal: bool = False
    transport: object = None  # httpx transport override, for tests
    temperature: float = 0.0
    _client: object = field(default=None, repr=False)

    def _http(self):
        import httpx

        if self._client is None:
            kw = {"timeout": self.timeout}
            if self.transport is not None:
                kw["transport"] = self.transport
            self._client = httpx.Client(**kw)
        return self._client

    def body(self, request: ChatRequest) -> dict:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "system", "content": request.system_prompt}, *request.messages],
        }

    def complete(self, request: ChatRequest) -> ChatResponse:
        import httpx

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                r = self._http().post(self.url, json=self.body(request), headers=headers)
                if r.status_code >= 500:
                    raise ChatTransportError(f"HTTP {r.status_code}")
                r.raise_for_status()
                content = r.json()["choices"][0]["message"]["content"]
                if content is None:
                    raise ChatTransportError("null content")
                return ChatResponse(content)
            except (httpx.HTTPError, ChatTransportError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(min(0.5 * 2**attempt, 4.0))
        raise ChatTransportError(str(last))


# ---------------------------------------------------------------- policy


def _png_bytes(image) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


class LlmPolicy:
    """Traversal policy backed by a chat endpoint, with a per-episode failure budget."""

    name = "llm"

    def __init__(
        self,
        chat: ChatEndpoint,
        failure_budget: int = DEFAULT_FAILURE_BUDGET,
        history_k: int = DEFAULT_HISTORY,
        max_episode_actions: int = DEFAULT_EPISODE_ACTIONS,
    ):
        self.chat = chat
        self.failure_budget = failure_budget
        self.history_k = history_k
        self.max_episode_actions = max_episode_actions
        self.failures = 0
        self.episode_actions = 0
        self.calls = 0

    def begin_episode(self, reason: str) -> None:
        self.failures = 0
        self.episode_actions = 0

    def next_action(self, vh: VhTree, utg: Utg, history: Sequence[HistoryEntry], obs: Observation) -> Decision:
        if self.episode_actions >= self.max_episode_actions:
            return Decision.escalate("llm:episode_budget")
        goal = "pass_login" if (obs.reason or "").startswith("trigger") else "explore"
        svh = simplify_vh(vh)
        elements = prompt_elements(svh)
        # simplified pre-order lines up with the raw effectively-visible pre-order
        raw = dict(zip((p for p, _ in svh.walk()), effectively_visible(vh)))
        png = _png_bytes(obs.screenshot) if getattr(self.chat, "multimodal", False) and obs.screenshot is not None else None
        request = build_prompt(goal, svh, history, self.history_k, png)
        while True:
            self.calls += 1
            try:
                action = parse_action(self.chat.complete(request), len(elements))
                decision = self._to_decision(action, elements, raw)
            except NoMatchingRule:
                return Decision.escalate("llm:give_up")
            except LlmError as exc:
                self.failures += 1
                log.debug("llm failure %d/%d: %s", self.failures, self.failure_budget, exc)
                if self.failures >= self.failure_budget:
                    return Decision.escalate("llm:failure_budget")
                continue
            self.failures = 0
            if decision.kind == "act":
                self.episode_actions += 1
            return decision

    @staticmethod
    def _to_decision(action: LlmAction, elements: list[PromptElement], raw: dict) -> Decision:
        if action.kind == "give_up":
            return Decision.escalate("llm:give_up")
        if action.kind == "declare_done":
            return Decision.done()
        if action.kind == "back":
            return Decision.act(BACK)
        el = elements[action.target_index - 1]
        raw_path, raw_node = raw[el.path]
        if action.kind not in permitted_actions(raw_node):
            raise ActionNotPermitted(f"{action.kind} on element {action.target_index}")
        return Decision.act(ActionTarget(raw_path, action.kind, action.text))
