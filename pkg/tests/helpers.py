from __future__ import annotations

import hashlib
import json
import random

import numpy as np

from screencrawl.dedup import PerceptualHash, ScreenSignature
from screencrawl.store import DatasetStore, ScreenRecord
from screencrawl.vh import simplify_vh, tree_from_obj

BASE = ["enabled", "visible"]
BUTTON = ["clickable", "enabled", "focusable", "visible"]
EDIT = ["clickable", "editable", "enabled", "focusable", "visible"]
FOCUS = ["enabled", "focusable", "visible"]


def node(cls="android.view.View", bounds=(0, 0, 10, 10), flags=BASE, children=(), **kw):
    d = {"class": cls, "bounds": list(bounds), "flags": list(flags), "children": list(children)}
    for key in ("text", "content_desc", "resource_id"):
        if key in kw:
            d[key] = kw[key]
    return d


def tree(root, width=100, height=200, package="com.example.app", activity=".Main"):
    return tree_from_obj({"width": width, "height": height, "package": package, "activity": activity, "root": root})


def screen(sid, rows, parent=None, seed=0, title=None):
    kids = []
    if title:
        kids.append(node("android.widget.TextView", (0, 0, 360, 60), BASE, text=title))
    kids += rows
    return {"id": sid, "activity": ".Main", "parent": parent, "render_seed": seed,
            "root": node("android.widget.FrameLayout", (0, 0, 360, 640), BASE, kids)}


def three_screen_app():
    """home -> detail -> extra, each reached by one button."""
    return {
        "app_id": "tiny", "package": "com.example.tiny", "category": "TOOLS",
        "width": 360, "height": 640, "initial_screen": "home",
        "screens": [
            screen("home", [node("android.widget.Button", (0, 100, 360, 160), BUTTON, text="Open", resource_id="open")],
                   seed=1, title="Home"),
            screen("detail", [node("android.widget.Button", (0, 100, 360, 160), BUTTON, text="More", resource_id="more")],
                   parent="home", seed=2, title="Detail"),
            screen("extra", [node("android.widget.TextView", (0, 100, 360, 160), BASE, text="The end")],
                   parent="detail", seed=3, title="Extra"),
        ],
        "transitions": [
            {"from": "home", "node": "open", "action": "tap", "to": "detail"},
            {"from": "detail", "node": "more", "action": "tap", "to": "extra"},
        ],
        "gates": [],
    }


def fake_sig(i: int) -> ScreenSignature:
    return ScreenSignature(PerceptualHash(i & ((1 << 64) - 1)), (i * 2654435761) & ((1 << 64) - 1))


def add_screen(store: DatasetStore, app_id: str, step: int, root: dict, sig=None, session="s1",
               width=360, height=640, category="TOOLS") -> ScreenRecord:
    """Append a record without rendering; the signature defaults to something unique per (app, step)."""
    raw = tree(root, width, height, package=f"com.example.{app_id}")
    if sig is None:
        digest = hashlib.blake2b(f"{app_id}/{session}/{step}".encode(), digest_size=8).digest()
        sig = fake_sig(int.from_bytes(digest, "big"))
    rec = ScreenRecord(
        record_id=f"{app_id}/{session}/{step}", app_id=app_id, session_id=session, step=step,
        screenshot_ref=f"images/{app_id}/{session}/{step}.png", raw_vh=raw, simplified_vh=simplify_vh(raw),
        signature=sig, category=category,
    )
    store.write_record(rec)
    return rec


def solid(color, h=64, w=48):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:] = color
    return img


def strip_volatile(obj):
    """Drop wall-clock fields so two runs can be compared."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in ("wall_time", "timing", "created_at")}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def normalized_json_bytes(raw: bytes) -> bytes:
    return json.dumps(strip_volatile(json.loads(raw)), sort_keys=True).encode()


def random_root(rng, depth=0):
    kids = []
    if depth < 3:
        for _ in range(rng.randint(0, 3)):
            kids.append(random_root(rng, depth + 1))
    cls = rng.choice(["android.widget.Button", "android.widget.TextView", "android.widget.CheckBox",
                      "android.widget.EditText", "android.widget.LinearLayout"])
    flags = rng.choice([BASE, BUTTON, EDIT, FOCUS, ["enabled"], ["enabled", "scrollable", "visible"]])
    l, t = rng.randrange(0, 300), rng.randrange(0, 600)
    kw = {"text": rng.choice(["ok", "go on", "x"])} if rng.random() < 0.5 else {}
    return node(cls, (l, t, l + rng.randrange(0, 60), t + rng.randrange(0, 40)), flags, kids, **kw)


def random_store(n=60, seed=0):
    """Unique screens with random small trees; the root is always focusable."""
    rng = random.Random(seed)
    s = DatasetStore()
    for i in range(n):
        root = random_root(rng)
        root["flags"] = FOCUS
        add_screen(s, f"app{i % 7}", i, root)
    return s
