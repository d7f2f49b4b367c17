"""Deterministic app models and simulated devices.

An app model is a JSON document::

    {
      "app_id": "a001", "package": "com.example.notes", "category": "PRODUCTIVITY",
      "width": 360, "height": 640, "initial_screen": "home",
      "screens": [{"id": "home", "activity": ".Main", "parent": null,
                   "render_seed": 7, "root": <VH JSON node>}],
      "transitions": [{"from": "home", "node": "btn_open", "action": "tap",
                       "to": "detail", "crash_probability": 0.0}],
      "gates": [{"kind": "login", "guard_screen": "login", "submit": "btn_sign_in",
                 "credentials": {"field_email": "...", "field_password": "..."},
                 "target": "home"}]
    }

Transitions match on the acting node's ``resource_id`` plus the action kind.
``back`` follows the screen's ``parent`` (a self-loop when there is none).
Gate kinds: ``login`` (typed credentials then tap ``submit``), ``captcha``
(only :class:`HumanSolve` passes) and ``idle_loop`` (taps self-loop, a scroll on
``exit_node`` leaves).
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .vh import (
    ActionTarget,
    VhError,
    VhTree,
    effectively_visible,
    label_of,
    permitted_actions,
    tree_from_obj,
)

STORE_CATEGORIES = (
    "ART_AND_DESIGN", "AUTO_AND_VEHICLES", "BEAUTY", "BOOKS_AND_REFERENCE", "BUSINESS",
    "COMICS", "COMMUNICATION", "DATING", "EDUCATION", "ENTERTAINMENT", "EVENTS",
    "FINANCE", "FOOD_AND_DRINK", "HEALTH_AND_FITNESS", "HOUSE_AND_HOME",
    "LIBRARIES_AND_DEMO", "LIFESTYLE", "MAPS_AND_NAVIGATION", "MEDICAL",
    "MUSIC_AND_AUDIO", "NEWS_AND_MAGAZINES", "PARENTING", "PERSONALIZATION",
    "PHOTOGRAPHY", "PRODUCTIVITY", "SHOPPING", "SOCIAL", "SPORTS", "TOOLS",
    "TRAVEL_AND_LOCAL", "VIDEO_PLAYERS", "WEATHER", "GAME",
)
assert len(STORE_CATEGORIES) == 33

LOGIN_KEYWORDS = ("login", "sign in")


class SimError(Exception):
    pass


class MalformedSpec(SimError):
    pass


class DanglingTransition(MalformedSpec):
    def __init__(self, screen_id: str):
        super().__init__(f"reference to undefined screen {screen_id!r}")
        self.screen_id = screen_id


class NotInstalled(SimError):
    pass


class NotLaunched(SimError):
    pass


class UnknownAction(SimError):
    pass


class GateKind(str, enum.Enum):
    LOGIN = "login"
    CAPTCHA = "captcha"
    IDLE_LOOP = "idle_loop"


@dataclass(frozen=True)
class HumanSolve:
    """A human resolving whatever blocks the current screen."""

    def to_dict(self) -> dict:
        return {"kind": "human_solve"}

    def describe(self) -> str:
        return "human_solve"


Action = Union[ActionTarget, HumanSolve]


def action_from_dict(d: dict) -> Action:
    if d.get("kind") == "human_solve":
        return HumanSolve()
    return ActionTarget.from_dict(d)


@dataclass(frozen=True)
class ScreenSpec:
    screen_id: str
    vh_template: dict
    render_seed: int
    activity: str = ""
    parent: str | None = None


@dataclass(frozen=True)
class GateSpec:
    kind: GateKind
    guard_screen: str
    target: str
    submit: str | None = None
    credentials: dict = field(default_factory=dict)
    exit_node: str | None = None


@dataclass(frozen=True)
class Transition:
    source: str
    node: str
    action: str
    target: str
    crash_probability: float = 0.0


@dataclass(frozen=True)
class PerformResult:
    kind: str  # transitioned | no_effect | app_crashed
    screen_id: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "screen": self.screen_id}


class AppModel:
    def __init__(
        self,
        app_id: str,
        package_name: str,
        category: str,
        screens: dict[str, ScreenSpec],
        transitions: dict[tuple[str, str, str], Transition],
        initial_screen: str,
        gates: list[GateSpec] = (),
        width: int = 360,
        height: int = 640,
    ):
        self.app_id = app_id
        self.package_name = package_name
        self.category = category
        self.screens = screens
        self.transitions = transitions
        self.initial_screen = initial_screen
        self.gates = list(gates)
        self.width = width
        self.height = height
        self.gate_by_screen = {g.guard_screen: g for g in self.gates}
        self._vh_cache: dict[str, VhTree] = {}
        self._image_cache: dict[str, np.ndarray] = {}

    @property
    def gate_class(self) -> str:
        kinds = {g.kind for g in self.gates}
        for k in (GateKind.CAPTCHA, GateKind.LOGIN, GateKind.IDLE_LOOP):
            if k in kinds:
                return k.value
        return "none"

    def vh(self, screen_id: str) -> VhTree:
        tree = self._vh_cache.get(screen_id)
        if tree is None:
            spec = self.screens[screen_id]
            tree = build_vh(spec, self.width, self.height, self.package_name)
            self._vh_cache[screen_id] = tree
        return tree

    def image(self, screen_id: str) -> np.ndarray:
        img = self._image_cache.get(screen_id)
        if img is None:
            img = render(self.screens[screen_id], self.width, self.height, self.vh(screen_id))
            img.setflags(write=False)
            self._image_cache[screen_id] = img
        return img

    def release_images(self) -> None:
        self._image_cache.clear()

    def to_obj(self) -> dict:
        return {
            "app_id": self.app_id,
            "package": self.package_name,
            "category": self.category,
            "width": self.width,
            "height": self.height,
            "initial_screen": self.initial_screen,
            "screens": [
                {
                    "id": s.screen_id,
                    "activity": s.activity,
                    "parent": s.parent,
                    "render_seed": s.render_seed,
                    "root": s.vh_template,
                }
                for s in self.screens.values()
            ],
            "transitions": [
                {
                    "from": t.source,
                    "node": t.node,
                    "action": t.action,
                    "to": t.target,
                    **({"crash_probability": t.crash_probability} if t.crash_probability else {}),
                }
                for t in self.transitions.values()
            ],
            "gates": [_gate_to_obj(g) for g in self.gates],
        }


def _gate_to_obj(g: GateSpec) -> dict:
    d: dict = {"kind": g.kind.value, "guard_screen": g.guard_screen, "target": g.target}
    if g.submit is not None:
        d["submit"] = g.submit
    if g.credentials:
        d["credentials"] = dict(g.credentials)
    if g.exit_node is not None:
        d["exit_node"] = g.exit_node
    return d


def build_vh(spec: ScreenSpec, width: int, height: int, package: str) -> VhTree:
    return tree_from_obj(
        {"width": width, "height": height, "package": package, "activity": spec.activity, "root": spec.vh_template}
    )


def _nodes_by_rid(tree: VhTree) -> dict[str, object]:
    out = {}
    for _, node in tree.walk():
        if node.resource_id:
            out.setdefault(node.resource_id, node)
    return out


def load_app_model(spec: bytes | str | dict) -> AppModel:
    if isinstance(spec, dict):
        doc = spec
    else:
        try:
            doc = json.loads(spec)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedSpec(f"not JSON: {exc}") from exc
    try:
        width, height = int(doc.get("width", 360)), int(doc.get("height", 640))
        screens: dict[str, ScreenSpec] = {}
        for s in doc["screens"]:
            sid = s["id"]
            if sid in screens:
                raise MalformedSpec(f"duplicate screen {sid!r}")
            screens[sid] = ScreenSpec(
                screen_id=sid,
                vh_template=s["root"],
                render_seed=int(s.get("render_seed", 0)),
                activity=s.get("activity", ""),
                parent=s.get("parent"),
            )
        transitions: dict[tuple[str, str, str], Transition] = {}
        for t in doc.get("transitions", []):
            tr = Transition(t["from"], t["node"], t["action"], t["to"], float(t.get("crash_probability", 0.0)))
            key = (tr.source, tr.node, tr.action)
            if key in transitions:
                raise MalformedSpec(f"nondeterministic transition {key}")
            transitions[key] = tr
        gates = []
        for g in doc.get("gates", []):
            gates.append(
                GateSpec(
                    kind=GateKind(g["kind"]),
                    guard_screen=g["guard_screen"],
                    target=g["target"],
                    submit=g.get("submit"),
                    credentials=dict(g.get("credentials", {})),
                    exit_node=g.get("exit_node"),
                )
            )
        model = AppModel(
            app_id=doc["app_id"],
            package_name=doc["package"],
            category=doc.get("category", "TOOLS"),
            screens=screens,
            transitions=transitions,
            initial_screen=doc["initial_screen"],
            gates=gates,
            width=width,
            height=height,
        )
    except KeyError as exc:
        raise MalformedSpec(f"missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise MalformedSpec(str(exc)) from exc
    validate_app_model(model)
    return model


def validate_app_model(m: AppModel) -> None:
    def need(sid):
        if sid not in m.screens:
            raise DanglingTransition(sid)

    need(m.initial_screen)
    if m.category not in STORE_CATEGORIES:
        raise MalformedSpec(f"unknown category {m.category!r}")
    for spec in m.screens.values():
        if spec.parent is not None:
            need(spec.parent)
        try:
            m.vh(spec.screen_id)
        except VhError as exc:
            raise MalformedSpec(f"screen {spec.screen_id!r}: {exc}") from exc
    for (src, rid, action), tr in m.transitions.items():
        need(src)
        need(tr.target)
        if action not in ("tap", "long_tap", "input_text", "scroll"):
            raise MalformedSpec(f"transition action {action!r}")
        if rid not in _nodes_by_rid(m.vh(src)):
            raise MalformedSpec(f"transition from {src!r} names missing node {rid!r}")
        if not 0.0 <= tr.crash_probability <= 1.0:
            raise MalformedSpec("crash_probability outside [0, 1]")
    seen = set()
    for g in m.gates:
        need(g.guard_screen)
        need(g.target)
        if g.guard_screen in seen:
            raise MalformedSpec(f"two gates on {g.guard_screen!r}")
        seen.add(g.guard_screen)
        nodes = _nodes_by_rid(m.vh(g.guard_screen))
        if g.kind is GateKind.LOGIN:
            if not g.credentials or g.submit is None:
                raise MalformedSpec("login gate needs credentials and submit")
            for rid in g.credentials:
                if rid not in nodes or not nodes[rid].has("editable"):
                    raise MalformedSpec(f"credential field {rid!r} is not an editable node")
            text = " ".join(
                (n.text or "") + " " + (n.content_description or "") for _, n in m.vh(g.guard_screen).walk()
            ).lower()
            if not any(k in text for k in LOGIN_KEYWORDS):
                raise MalformedSpec(f"login screen {g.guard_screen!r} shows no login keyword")
        if g.submit is not None:
            if g.submit not in nodes:
                raise MalformedSpec(f"gate submit node {g.submit!r} missing")
            if (g.guard_screen, g.submit, "tap") in m.transitions:
                raise MalformedSpec("ordinary transition shadows a gate submit")
        if g.kind is GateKind.IDLE_LOOP:
            if g.exit_node is None or g.exit_node not in nodes or not nodes[g.exit_node].has("scrollable"):
                raise MalformedSpec("idle_loop gate needs a scrollable exit_node")


# ---------------------------------------------------------------- rendering


def _color(key: str) -> np.ndarray:
    return np.frombuffer(hashlib.blake2b(key.encode("utf-8"), digest_size=3).digest(), dtype=np.uint8)


def background_color(render_seed: int) -> np.ndarray:
    return _color(f"background:{render_seed}")


def node_color(class_name: str, label: str | None) -> np.ndarray:
    return _color(f"node:{class_name}\x00{label or ''}")


def _packed(color: np.ndarray) -> int:
    return int(color[0]) | int(color[1]) << 8 | int(color[2]) << 16


def render(spec: ScreenSpec, width: int, height: int, tree: VhTree | None = None) -> np.ndarray:
    """Solid background plus one filled rectangle per visible node, painted in pre-order."""
    if tree is None:
        tree = build_vh(spec, width, height, "")
    # paint packed little-endian RGBX words, then drop the pad byte
    canvas = np.full((height, width), _packed(background_color(spec.render_seed)), dtype="<u4")
    for _, node in effectively_visible(tree):
        l, t, r, b = (int(v) for v in node.bounds_px)
        if r > l and b > t:
            canvas[t:b, l:r] = _packed(node_color(node.class_name, label_of(node)))
    return np.ascontiguousarray(canvas.view(np.uint8).reshape(height, width, 4)[:, :, :3])


# ---------------------------------------------------------------- devices


class SimDevice:
    """One simulated Android instance. Not thread-safe: one session owns it at a time."""

    def __init__(self, instance_id: str):
        self.instance_id = instance_id
        self.status = "idle"
        self.installed: AppModel | None = None
        self.current_screen: str | None = None
        self.launched = False
        self.action_log: list[dict] = []
        self._seed = 0
        self._rng = random.Random(0)
        self._fields: dict[tuple[str, str], str] = {}
        self._unlocked: set[str] = set()

    # lifecycle ----------------------------------------------------------
    def install(self, app: AppModel, seed: int = 0) -> None:
        self.installed = app
        self._seed = seed
        self._rng = random.Random(seed)
        self._fields.clear()
        self._unlocked.clear()
        self.launched = False
        self.current_screen = None
        self.status = "busy"
        self.action_log = [{"call": "install", "app": app.app_id, "seed": seed}]

    def uninstall(self) -> None:
        self.installed = None
        self.launched = False
        self.current_screen = None
        if self.status != "faulted":
            self.status = "idle"

    def launch(self) -> None:
        if self.installed is None:
            raise NotInstalled(self.instance_id)
        self.launched = True
        self.current_screen = self.installed.initial_screen
        self.action_log.append({"call": "launch", "screen": self.current_screen})

    def _check(self) -> AppModel:
        if self.installed is None:
            raise NotInstalled(self.instance_id)
        if not self.launched:
            raise NotLaunched(self.instance_id)
        return self.installed

    # observation --------------------------------------------------------
    def screenshot(self) -> np.ndarray:
        app = self._check()
        self.action_log.append({"call": "screenshot", "screen": self.current_screen})
        return app.image(self.current_screen)

    def dump_vh(self) -> VhTree:
        app = self._check()
        self.action_log.append({"call": "dump_vh", "screen": self.current_screen})
        return app.vh(self.current_screen)

    @property
    def unlocked_gates(self) -> frozenset[str]:
        return frozenset(self._unlocked)

    # actions ------------------------------------------------------------
    def perform(self, action: Action) -> PerformResult:
        app = self._check()
        result = self._apply(app, action)
        self.action_log.append({"call": "perform", "action": action.to_dict(), "result": result.to_dict()})
        return result

    def _move(self, target: str) -> PerformResult:
        if target == self.current_screen:
            return PerformResult("no_effect", target)
        self.current_screen = target
        return PerformResult("transitioned", target)

    def _apply(self, app: AppModel, action: Action) -> PerformResult:
        screen = self.current_screen
        gate = app.gate_by_screen.get(screen)
        if isinstance(action, HumanSolve):
            if gate is None:
                return PerformResult("no_effect", screen)
            self._unlocked.add(gate.guard_screen)
            return self._move(gate.target)
        if not isinstance(action, ActionTarget):
            raise UnknownAction(repr(action))
        if action.action_kind == "back":
            parent = app.screens[screen].parent
            return self._move(parent if parent is not None else screen)

        tree = app.vh(screen)
        try:
            node = tree.node_at(action.node_path)
        except (IndexError, TypeError):
            raise UnknownAction(f"no node at {action.node_path} on {screen!r}") from None
        if action.action_kind not in permitted_actions(node):
            raise UnknownAction(f"{action.action_kind} not permitted on {node.class_name} at {action.node_path}")
        rid = node.resource_id or ""

        if gate is not None:
            if gate.kind is GateKind.IDLE_LOOP:
                if action.action_kind == "scroll" and rid == gate.exit_node:
                    return self._move(gate.target)
                return PerformResult("no_effect", screen)
            if action.action_kind == "input_text":
                self._fields[(screen, rid)] = action.input_payload or ""
                return PerformResult("no_effect", screen)
            if action.action_kind == "tap" and rid == gate.submit:
                if gate.guard_screen in self._unlocked or (
                    gate.kind is GateKind.LOGIN
                    and all(self._fields.get((screen, f)) == v for f, v in gate.credentials.items())
                ):
                    self._unlocked.add(gate.guard_screen)
                    return self._move(gate.target)
                return PerformResult("no_effect", screen)

        tr = app.transitions.get((screen, rid, action.action_kind)) if rid else None
        if tr is None:
            return PerformResult("no_effect", screen)
        if tr.crash_probability > 0.0 and self._rng.random() < tr.crash_probability:
            self.launched = False
            return PerformResult("app_crashed", screen)
        return self._move(tr.target)

    # replay -------------------------------------------------------------
    def replay(self, app: AppModel, log: list[dict]) -> None:
        """Rebuild device state by re-running the install/launch/perform entries of ``log``."""
        for entry in log:
            call = entry["call"]
            if call == "install":
                self.install(app, entry.get("seed", 0))
            elif call == "launch":
                self.launch()
            elif call == "perform":
                self.perform(action_from_dict(entry["action"]))


def performed_actions(log: list[dict]) -> list[dict]:
    return [e for e in log if e["call"] in ("install", "launch", "perform")]
