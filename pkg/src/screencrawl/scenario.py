"""Generated app-model fixtures: the versioned 86-app gate scenario and random models for fuzzing.

The scenario files under ``data/gated86`` are produced by :func:`generate_gated86`
and checked in; a test asserts they still match the generator byte for byte.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .sim import STORE_CATEGORIES, AppModel, HumanSolve, action_from_dict, load_app_model

GATED86_SEED = 20240607
GATED86_COUNTS = {"none": 16, "login": 22, "captcha": 48}
GATED86_EXPECTED = {"rules": 16, "rules_llm": 38, "resume_all": 86}

TEST_EMAIL = "crawler.test@example.com"
TEST_PASSWORD = "Tr4versal!"

WIDTH, HEIGHT = 360, 640
MAX_TARGETS = 6

_WORDS = (
    "news", "photo", "music", "maps", "notes", "shop", "cart", "profile", "settings", "feed",
    "search", "video", "weather", "budget", "recipe", "travel", "fitness", "chat", "library",
    "calendar", "wallet", "garden", "comics", "radio", "podcast", "tickets", "health", "study",
)
_NOUNS = (
    "Overview", "Details", "Gallery", "Favorites", "History", "Explore", "Trending", "Inbox",
    "Preferences", "About", "Help", "Stats", "Archive", "Offers", "Reviews", "Downloads",
    "Playlist", "Schedule", "Contacts", "Filters", "Messages", "Topics", "Editor", "Preview",
)
_FLAGS_BUTTON = ["clickable", "enabled", "focusable", "visible"]
_FLAGS_EDIT = ["clickable", "editable", "enabled", "focusable", "visible"]
_FLAGS_SCROLL = ["enabled", "scrollable", "visible"]
_FLAGS_STATIC = ["enabled", "visible"]
_FLAGS_GROUP = ["enabled", "focusable", "visible"]

_TRIGGER_RE = re.compile(r"login|sign in", re.IGNORECASE)


def _row(i: int) -> list[int]:
    top = 80 + 80 * i
    return [16, top, WIDTH - 16, top + 64]


def _node(cls: str, bounds, flags, text=None, rid=None, desc=None, children=None) -> dict:
    n = {"class": cls, "bounds": list(bounds), "flags": list(flags)}
    if text is not None:
        n["text"] = text
    if rid is not None:
        n["resource_id"] = rid
    if desc is not None:
        n["content_desc"] = desc
    if children:
        n["children"] = children
    return n


def _screen_root(title: str, rows: list[dict], grouped: bool = False) -> dict:
    header = _node("android.widget.TextView", [0, 0, WIDTH, 64], _FLAGS_STATIC, text=title)
    if grouped and rows:
        rows = [_node("android.widget.LinearLayout", [0, 72, WIDTH, HEIGHT], _FLAGS_GROUP, children=rows)]
    return _node("android.widget.FrameLayout", [0, 0, WIDTH, HEIGHT], _FLAGS_STATIC, children=[header, *rows])


def _label(rng: random.Random, used: set[str]) -> str:
    while True:
        s = f"{rng.choice(_NOUNS)} {rng.randint(1, 99)}"
        if s not in used and not _TRIGGER_RE.search(s):
            used.add(s)
            return s


def _explore_screens(rng: random.Random, n: int, prefix: str, crash_probability: float = 0.0):
    """A tree of ``n`` screens rooted at ``{prefix}0`` plus a few cross links; no trigger words."""
    ids = [f"{prefix}{i}" for i in range(n)]
    parent = {ids[0]: None}
    kids: dict[str, list[str]] = {s: [] for s in ids}
    for i in range(1, n):
        while True:
            p = ids[rng.randrange(i)]
            if len(kids[p]) < MAX_TARGETS - 2:
                break
        parent[ids[i]] = p
        kids[p].append(ids[i])
    used: set[str] = set()
    screens, transitions = [], []
    for sid in ids:
        rows, k = [], 0
        for child in kids[sid]:
            rid = f"{sid}_to_{child}"
            rows.append(_node("android.widget.Button", _row(k), _FLAGS_BUTTON, text=_label(rng, used), rid=rid))
            t = {"from": sid, "node": rid, "action": "tap", "to": child}
            if crash_probability:
                t["crash_probability"] = crash_probability
            transitions.append(t)
            k += 1
        if rng.random() < 0.3 and len(ids) > 1:
            dest = rng.choice([s for s in ids if s != sid])
            rid = f"{sid}_link"
            rows.append(_node("android.widget.Button", _row(k), _FLAGS_BUTTON, text=_label(rng, used), rid=rid))
            transitions.append({"from": sid, "node": rid, "action": "tap", "to": dest})
            k += 1
        if rng.random() < 0.25:
            rows.append(_node("android.widget.EditText", _row(k), _FLAGS_EDIT, rid=f"{sid}_field", desc="Search"))
            k += 1
        if rng.random() < 0.5:
            rows.append(_node("android.widget.TextView", _row(k), _FLAGS_STATIC, text=_label(rng, used)))
            k += 1
        if rng.random() < 0.2:
            rows.append(_node("android.widget.ImageView", _row(k), _FLAGS_STATIC))
        screens.append(
            {
                "id": sid,
                "activity": f".{sid.capitalize()}Activity",
                "parent": parent[sid],
                "render_seed": rng.randrange(1 << 30),
                "root": _screen_root(_label(rng, used), rows, grouped=True),
            }
        )
    return screens, transitions


def _login_screen(render_seed: int) -> dict:
    rows = [
        _node("android.widget.EditText", _row(0), _FLAGS_EDIT, rid="email", desc="Email"),
        _node("android.widget.EditText", _row(1), _FLAGS_EDIT, rid="password", desc="Password"),
        _node("android.widget.Button", _row(2), _FLAGS_BUTTON, text="Sign in", rid="submit"),
    ]
    return {"id": "gate", "activity": ".LoginActivity", "parent": None, "render_seed": render_seed,
            "root": _screen_root("Login", rows)}


def _captcha_screen(render_seed: int) -> dict:
    rows = [
        _node("android.widget.CheckBox", _row(0), _FLAGS_BUTTON, text="I'm not a robot", rid="captcha"),
        _node("android.widget.Button", _row(1), _FLAGS_BUTTON, text="Sign in", rid="submit"),
    ]
    return {"id": "gate", "activity": ".VerifyActivity", "parent": None, "render_seed": render_seed,
            "root": _screen_root("Verify", rows)}


def _idle_screen(render_seed: int) -> dict:
    rows = [
        _node("android.widget.Button", _row(0), _FLAGS_BUTTON, text="Refresh", rid="refresh"),
        _node("android.widget.ScrollView", [16, 160, WIDTH - 16, 600], _FLAGS_SCROLL, rid="feed_list"),
    ]
    return {"id": "gate", "activity": ".SplashActivity", "parent": None, "render_seed": render_seed,
            "root": _screen_root("Loading", rows)}


def random_app(
    seed: int,
    gate: str | None = None,
    n_screens: int | None = None,
    crash_probability: float = 0.0,
    app_id: str | None = None,
    category: str | None = None,
    credentials: tuple[str, str] | None = None,
) -> dict:
    """App-model document. Gated apps start on the guard screen; everything else sits behind it."""
    rng = random.Random(seed)
    n = n_screens if n_screens is not None else rng.randint(10, 30)
    app_id = app_id or f"rand{seed}"
    screens, transitions = _explore_screens(rng, n, "s", crash_probability)
    doc = {
        "app_id": app_id,
        "package": f"com.sim.{rng.choice(_WORDS)}.{app_id.lower()}",
        "category": category or rng.choice(STORE_CATEGORIES),
        "width": WIDTH,
        "height": HEIGHT,
        "initial_screen": "s0",
        "screens": screens,
        "transitions": transitions,
        "gates": [],
    }
    if gate is None:
        return doc
    seed_g = rng.randrange(1 << 30)
    if gate == "login":
        email, password = credentials or (f"user{rng.randrange(10**6)}@example.com", f"pw{rng.randrange(10**9)}")
        guard = _login_screen(seed_g)
        doc["gates"] = [{"kind": "login", "guard_screen": "gate", "target": "s0", "submit": "submit",
                         "credentials": {"email": email, "password": password}}]
    elif gate == "captcha":
        guard = _captcha_screen(seed_g)
        doc["gates"] = [{"kind": "captcha", "guard_screen": "gate", "target": "s0", "submit": "submit"}]
    elif gate == "idle_loop":
        guard = _idle_screen(seed_g)
        doc["gates"] = [{"kind": "idle_loop", "guard_screen": "gate", "target": "s0", "exit_node": "feed_list"}]
    else:
        raise ValueError(f"unknown gate kind {gate!r}")
    screens[0]["parent"] = "gate"
    doc["screens"] = [guard, *screens]
    doc["initial_screen"] = "gate"
    return doc


# ---------------------------------------------------------------- the 86-app scenario


def llm_transcript() -> list[dict]:
    pw, email = re.escape(TEST_PASSWORD), re.escape(TEST_EMAIL)
    return [
        {"match": "(?i)not a robot", "response": "ACTION give_up"},
        {"match": f'input_text \\S+ "{pw}"', "response": "ACTION tap 3"},
        {"match": f'input_text \\S+ "{email}"', "response": f'ACTION input_text 2 "{TEST_PASSWORD}"'},
        {"match": "Goal: get past this login", "response": f'ACTION input_text 1 "{TEST_EMAIL}"'},
    ]


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def generate_gated86(seed: int = GATED86_SEED) -> dict[str, bytes]:
    """All scenario files keyed by relative path."""
    rng = random.Random(seed)
    classes = [k for k, n in GATED86_COUNTS.items() for _ in range(n)]
    rng.shuffle(classes)
    files: dict[str, bytes] = {}
    entries, metadata = [], []
    for i, cls in enumerate(classes, start=1):
        app_id = f"app{i:03d}"
        word = rng.choice(_WORDS)
        category = STORE_CATEGORIES[rng.randrange(len(STORE_CATEGORIES))]
        doc = random_app(
            rng.randrange(1 << 30),
            gate=None if cls == "none" else cls,
            app_id=app_id,
            category=category,
            credentials=(TEST_EMAIL, TEST_PASSWORD),
        )
        doc["package"] = f"com.sim.{word}.{app_id}"
        files[f"apps/{app_id}.json"] = _dumps(doc)
        name = f"{word.capitalize()} {app_id[3:]}"
        metadata.append({"app_id": app_id, "name": name, "package": doc["package"], "category": category})
        entries.append({"app_id": app_id, "spec": f"apps/{app_id}.json", "gate_class": cls})
        if cls != "none":
            files[f"human_actions/{app_id}.json"] = _dumps([HumanSolve().to_dict()])
    files["metadata.jsonl"] = "".join(json.dumps(m, sort_keys=True) + "\n" for m in metadata).encode("utf-8")
    files["llm_transcript.json"] = _dumps({"rules": llm_transcript()})
    files["manifest.json"] = _dumps(
        {
            "name": "gated86",
            "seed": seed,
            "apps": entries,
            "metadata": "metadata.jsonl",
            "llm_transcript": "llm_transcript.json",
            "human_actions": "human_actions",
            "expected": {"gate_classes": GATED86_COUNTS, "completed": GATED86_EXPECTED},
        }
    )
    return files


def write_files(files: dict[str, bytes], root: str | Path) -> None:
    root = Path(root)
    for rel, data in files.items():
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)


def gated86_dir() -> Path:
    return Path(str(resources.files("screencrawl") / "data" / "gated86"))


@dataclass
class Scenario:
    root: Path
    manifest: dict
    apps: dict[str, AppModel]
    metadata: list[dict]

    @property
    def transcript_path(self) -> Path:
        return self.root / self.manifest["llm_transcript"]

    def gate_classes(self) -> dict[str, str]:
        return {e["app_id"]: e["gate_class"] for e in self.manifest["apps"]}

    def human_actions(self, app_id: str) -> list:
        p = self.root / self.manifest.get("human_actions", "human_actions") / f"{app_id}.json"
        if not p.exists():
            return []
        return [action_from_dict(d) for d in json.loads(p.read_text(encoding="utf-8"))]


def load_scenario(root: str | Path | None = None) -> Scenario:
    root = Path(root) if root is not None else gated86_dir()
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    apps = {}
    for e in manifest["apps"]:
        apps[e["app_id"]] = load_app_model((root / e["spec"]).read_bytes())
    meta_path = root / manifest.get("metadata", "metadata.jsonl")
    metadata = [json.loads(l) for l in meta_path.read_text(encoding="utf-8").splitlines() if l.strip()]
    return Scenario(root, manifest, apps, metadata)


def load_apps_dir(path: str | Path) -> dict[str, AppModel]:
    """Every ``*.json`` app model in a directory (or a scenario root with ``manifest.json``)."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return load_scenario(path).apps
    apps = {}
    for p in sorted(path.glob("*.json")):
        m = load_app_model(p.read_bytes())
        apps[m.app_id] = m
    return apps


if __name__ == "__main__":  # regenerate the checked-in fixture
    write_files(generate_gated86(), Path(__file__).parent / "data" / "gated86")
