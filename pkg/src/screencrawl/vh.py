"""View hierarchy parsing, simplification and interrogation.

Wire format (JSON)::

    tree = {"width": int, "height": int, "package": str, "activity": str, "root": node}
    node = {"class": str, "resource_id"?: str, "text"?: str, "content_desc"?: str,
            "bounds": [l, t, r, b], "flags": [flag, ...], "children"?: [node, ...]}

``flags`` lists exactly the flags that are set; a node without ``"visible"`` is
invisible. UIAutomator XML dumps are accepted through ``parse_vh(raw, "xml")``.
"""

from __future__ import annotations

import enum
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Iterator, NamedTuple

FLAG_NAMES = (
    "clickable",
    "long_clickable",
    "editable",
    "scrollable",
    "focusable",
    "enabled",
    "visible",
)
SIMPLIFIED_FLAGS = frozenset({"clickable", "editable", "scrollable", "focusable"})
INTERACTION_FLAGS = frozenset({"clickable", "long_clickable", "editable", "scrollable"})
# action order within one node
ACTION_KINDS = ("tap", "long_tap", "input_text", "scroll")
ACTION_FLAG = {
    "tap": "clickable",
    "long_tap": "long_clickable",
    "input_text": "editable",
    "scroll": "scrollable",
}
DEFAULT_INPUT_TEXT = "hello world"


class VhError(ValueError):
    pass


class MalformedInput(VhError):
    pass


class SchemaViolation(VhError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DegenerateScreen(VhError):
    pass


class Rect(NamedTuple):
    left: float
    top: float
    right: float
    bottom: float

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class VhNode:
    class_name: str
    bounds_px: Rect
    resource_id: str | None = None
    text: str | None = None
    content_description: str | None = None
    flags: frozenset[str] = frozenset({"enabled", "visible"})
    children: tuple[VhNode, ...] = ()

    def __post_init__(self) -> None:
        b = self.bounds_px
        if not isinstance(b, Rect):
            object.__setattr__(self, "bounds_px", Rect(*b))
            b = self.bounds_px
        if b.left > b.right or b.top > b.bottom:
            raise SchemaViolation(self.class_name, f"inverted bounds {tuple(b)}")
        if not isinstance(self.flags, frozenset):
            object.__setattr__(self, "flags", frozenset(self.flags))
        unknown = self.flags - set(FLAG_NAMES)
        if unknown:
            raise SchemaViolation(self.class_name, f"unknown flags {sorted(unknown)}")
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    def has(self, flag: str) -> bool:
        return flag in self.flags

    @property
    def visible(self) -> bool:
        return "visible" in self.flags


@dataclass(frozen=True)
class VhTree:
    root: VhNode
    screen_width_px: int
    screen_height_px: int
    package_name: str = ""
    activity_name: str = ""

    def walk(self) -> Iterator[tuple[tuple[int, ...], VhNode]]:
        """Pre-order (path, node) pairs."""
        return walk(self.root)

    def node_at(self, path: tuple[int, ...] | list[int]) -> VhNode:
        node = self.root
        for i in path:
            node = node.children[i]
        return node


@dataclass(frozen=True)
class SimpleNode:
    class_name: str
    bounds: Rect
    label: str | None = None
    text: str | None = None
    flags: frozenset[str] = frozenset()
    children: tuple[SimpleNode, ...] = ()


@dataclass(frozen=True)
class SimplifiedVh:
    root: SimpleNode

    def walk(self) -> Iterator[tuple[tuple[int, ...], SimpleNode]]:
        return walk(self.root)

    def to_json(self) -> str:
        return json.dumps(_simple_to_obj(self.root), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, raw: str | bytes) -> SimplifiedVh:
        try:
            obj = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedInput(str(exc)) from exc
        return cls(_simple_from_obj(obj, "root"))


class ComponentType(str, enum.Enum):
    BUTTON = "BUTTON"
    CHECKBOX = "CHECKBOX"
    TEXT = "TEXT"
    INPUT_FIELD = "INPUT_FIELD"
    SCROLL_ITEM = "SCROLL_ITEM"
    OTHER = "OTHER"


@dataclass(frozen=True)
class ActionTarget:
    node_path: tuple[int, ...]
    action_kind: str
    input_payload: str | None = None

    def __post_init__(self) -> None:
        if self.action_kind not in ACTION_KINDS + ("back",):
            raise ValueError(f"unknown action kind {self.action_kind!r}")
        if not isinstance(self.node_path, tuple):
            object.__setattr__(self, "node_path", tuple(self.node_path))
        if self.action_kind == "back" and self.node_path:
            raise ValueError("back takes no node path")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.action_kind, "node_path": list(self.node_path)}
        if self.input_payload is not None:
            d["text"] = self.input_payload
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ActionTarget:
        return cls(tuple(d.get("node_path", ())), d["kind"], d.get("text"))

    def describe(self) -> str:
        path = "/".join(map(str, self.node_path))
        s = f"{self.action_kind}@{path}" if path or self.action_kind != "back" else "back"
        if self.input_payload is not None:
            s += f"={self.input_payload!r}"
        return s


BACK = ActionTarget((), "back")


def walk(root) -> Iterator[tuple[tuple[int, ...], object]]:
    stack = [((), root)]
    while stack:
        path, node = stack.pop()
        yield path, node
        for i in range(len(node.children) - 1, -1, -1):
            stack.append((path + (i,), node.children[i]))


# ---------------------------------------------------------------- parsing


def parse_vh(raw: bytes | str, format: str = "json") -> VhTree:
    if not raw:
        raise MalformedInput("empty input")
    if format == "json":
        return _parse_json(raw)
    if format == "xml":
        return _parse_xml(raw)
    raise ValueError(f"unknown VH format {format!r}")


def _parse_json(raw: bytes | str) -> VhTree:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedInput(str(exc)) from exc
    if not isinstance(obj, dict):
        raise MalformedInput("top level must be an object")
    return tree_from_obj(obj)


def tree_from_obj(obj: dict) -> VhTree:
    try:
        width, height = int(obj["width"]), int(obj["height"])
    except (KeyError, TypeError, ValueError):
        raise SchemaViolation("tree", "width and height are required integers") from None
    if width < 0 or height < 0:
        raise SchemaViolation("tree", "negative screen size")
    if "root" not in obj:
        raise SchemaViolation("tree", "missing root")
    root = _node_from_obj(obj["root"], "root", width, height)
    return VhTree(root, width, height, obj.get("package", "") or "", obj.get("activity", "") or "")


def _node_from_obj(obj, path: str, width: int, height: int) -> VhNode:
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "node must be an object")
    cls = obj.get("class")
    if not isinstance(cls, str) or not cls:
        raise SchemaViolation(path, "missing class")
    if "bounds" not in obj:
        raise SchemaViolation(path, "missing bounds")
    bounds = obj["bounds"]
    if not (isinstance(bounds, (list, tuple)) and len(bounds) == 4):
        raise SchemaViolation(path, "bounds must be [left, top, right, bottom]")
    try:
        rect = _clamp([int(v) for v in bounds], width, height)
    except (TypeError, ValueError):
        raise SchemaViolation(path, "bounds must be integers") from None
    if rect.left > rect.right or rect.top > rect.bottom:
        raise SchemaViolation(path, f"inverted bounds {bounds}")
    flags = obj.get("flags", [])
    if not isinstance(flags, list) or any(f not in FLAG_NAMES for f in flags):
        raise SchemaViolation(path, f"bad flags {flags!r}")
    children = obj.get("children", [])
    if not isinstance(children, list):
        raise SchemaViolation(path, "children must be a list")
    kids = tuple(
        _node_from_obj(c, f"{path}.children[{i}]", width, height) for i, c in enumerate(children)
    )
    return VhNode(
        class_name=cls,
        bounds_px=rect,
        resource_id=obj.get("resource_id") or None,
        text=obj.get("text") or None,
        content_description=obj.get("content_desc") or None,
        flags=frozenset(flags),
        children=kids,
    )


def _clamp(b: list[int], width: int, height: int) -> Rect:
    left, top, right, bottom = b
    return Rect(
        min(max(left, 0), width),
        min(max(top, 0), height),
        min(max(right, 0), width),
        min(max(bottom, 0), height),
    )


def _parse_bounds_attr(s: str, path: str) -> list[int]:
    # "[0,0][1080,1920]"
    try:
        a, b = s.strip()[1:-1].split("][")
        return [int(v) for v in a.split(",")] + [int(v) for v in b.split(",")]
    except ValueError:
        raise SchemaViolation(path, f"bad bounds attribute {s!r}") from None


_XML_FLAG_ATTRS = {
    "clickable": "clickable",
    "long-clickable": "long_clickable",
    "scrollable": "scrollable",
    "focusable": "focusable",
    "enabled": "enabled",
}


def _parse_xml(raw: bytes | str) -> VhTree:
    try:
        doc = ET.fromstring(raw)
    except ET.ParseError as exc:
        raise MalformedInput(str(exc)) from exc
    top = doc if doc.tag == "node" else doc.find("node")
    if top is None:
        raise SchemaViolation("root", "no <node> element")
    if "bounds" not in top.attrib:
        raise SchemaViolation("root", "missing bounds")
    width, height = _parse_bounds_attr(top.attrib["bounds"], "root")[2:]

    def convert(el: ET.Element, path: str) -> VhNode:
        a = el.attrib
        if not a.get("class"):
            raise SchemaViolation(path, "missing class")
        if "bounds" not in a:
            raise SchemaViolation(path, "missing bounds")
        rect = _clamp(_parse_bounds_attr(a["bounds"], path), width, height)
        if rect.left > rect.right or rect.top > rect.bottom:
            raise SchemaViolation(path, f"inverted bounds {a['bounds']}")
        flags = {name for attr, name in _XML_FLAG_ATTRS.items() if a.get(attr) == "true"}
        if a.get("visible-to-user", "true") == "true":
            flags.add("visible")
        cls = a["class"]
        if "EditText" in cls or a.get("editable") == "true":
            flags.add("editable")
        kids = tuple(convert(c, f"{path}.children[{i}]") for i, c in enumerate(el.findall("node")))
        return VhNode(
            class_name=cls,
            bounds_px=rect,
            resource_id=a.get("resource-id") or None,
            text=a.get("text") or None,
            content_description=a.get("content-desc") or None,
            flags=frozenset(flags),
            children=kids,
        )

    root = convert(top, "root")
    return VhTree(root, width, height, top.attrib.get("package", ""), "")


def node_to_obj(node: VhNode) -> dict:
    obj: dict = {"class": node.class_name, "bounds": [int(v) for v in node.bounds_px]}
    if node.resource_id:
        obj["resource_id"] = node.resource_id
    if node.text:
        obj["text"] = node.text
    if node.content_description:
        obj["content_desc"] = node.content_description
    obj["flags"] = sorted(node.flags)
    if node.children:
        obj["children"] = [node_to_obj(c) for c in node.children]
    return obj


def tree_to_obj(tree: VhTree) -> dict:
    return {
        "width": tree.screen_width_px,
        "height": tree.screen_height_px,
        "package": tree.package_name,
        "activity": tree.activity_name,
        "root": node_to_obj(tree.root),
    }


def serialize_vh(tree: VhTree) -> str:
    return json.dumps(tree_to_obj(tree), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------- simplification


PLACEHOLDER_CLASS = "placeholder"


def simplify_vh(tree: VhTree) -> SimplifiedVh:
    """Drop invisible subtrees, app identity and non-visual flags; normalize bounds to [0, 1]."""
    w, h = tree.screen_width_px, tree.screen_height_px
    if w <= 0 or h <= 0:
        raise DegenerateScreen(f"screen is {w}x{h}")

    def conv(node: VhNode) -> SimpleNode:
        b = node.bounds_px
        return SimpleNode(
            class_name=node.class_name,
            bounds=Rect(b.left / w, b.top / h, b.right / w, b.bottom / h),
            label=node.content_description,
            text=node.text,
            flags=node.flags & SIMPLIFIED_FLAGS,
            children=tuple(conv(c) for c in node.children if c.visible),
        )

    if not tree.root.visible:
        return SimplifiedVh(SimpleNode(PLACEHOLDER_CLASS, Rect(0.0, 0.0, 0.0, 0.0)))
    return SimplifiedVh(conv(tree.root))


def _simple_to_obj(node: SimpleNode, precision: int | None = None) -> dict:
    if precision is None:
        bounds = [float(v) for v in node.bounds]
    else:
        bounds = [f"{v:.{precision}f}" for v in node.bounds]
    obj: dict = {"class": node.class_name, "bounds": bounds, "flags": sorted(node.flags)}
    if node.label is not None:
        obj["label"] = node.label
    if node.text is not None:
        obj["text"] = node.text
    obj["children"] = [_simple_to_obj(c, precision) for c in node.children]
    return obj


def _simple_from_obj(obj, path: str) -> SimpleNode:
    if not isinstance(obj, dict) or "class" not in obj or "bounds" not in obj:
        raise SchemaViolation(path, "simplified node needs class and bounds")
    bounds = Rect(*(float(v) for v in obj["bounds"]))
    return SimpleNode(
        class_name=obj["class"],
        bounds=bounds,
        label=obj.get("label"),
        text=obj.get("text"),
        flags=frozenset(obj.get("flags", ())),
        children=tuple(
            _simple_from_obj(c, f"{path}.children[{i}]") for i, c in enumerate(obj.get("children", ()))
        ),
    )


# ---------------------------------------------------------------- queries


def effectively_visible(tree: VhTree) -> Iterator[tuple[tuple[int, ...], VhNode]]:
    """Pre-order nodes whose whole ancestor chain is visible."""
    stack = [((), tree.root)]
    while stack:
        path, node = stack.pop()
        if not node.visible:
            continue
        yield path, node
        for i in range(len(node.children) - 1, -1, -1):
            stack.append((path + (i,), node.children[i]))


def permitted_actions(node: VhNode) -> list[str]:
    if not ("visible" in node.flags and "enabled" in node.flags) or node.bounds_px.area <= 0:
        return []
    return [k for k in ACTION_KINDS if ACTION_FLAG[k] in node.flags]


def extract_interactables(tree: VhTree, default_text: str = DEFAULT_INPUT_TEXT) -> list[ActionTarget]:
    out = []
    for path, node in effectively_visible(tree):
        for kind in permitted_actions(node):
            payload = default_text if kind == "input_text" else None
            out.append(ActionTarget(path, kind, payload))
    return out


def classify_component(node: VhNode | SimpleNode) -> ComponentType:
    cls = node.class_name
    flags = node.flags
    if "CheckBox" in cls or "Switch" in cls or "Toggle" in cls:
        return ComponentType.CHECKBOX
    if "editable" in flags:
        return ComponentType.INPUT_FIELD
    if "scrollable" in flags:
        return ComponentType.SCROLL_ITEM
    if "clickable" in flags or "Button" in cls:
        return ComponentType.BUTTON
    if node.text and not (flags & INTERACTION_FLAGS):
        return ComponentType.TEXT
    return ComponentType.OTHER


def label_of(node: VhNode) -> str | None:
    if node.content_description:
        return node.content_description
    if node.text:
        return node.text
    return None


def is_labeled(node: VhNode) -> bool:
    return label_of(node) is not None


# ---------------------------------------------------------------- hashing

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def hash_form(svh: SimplifiedVh) -> str:
    """Canonical string hashed by vh_structural_hash (bounds quantized to 3 decimals)."""
    return json.dumps(_simple_to_obj(svh.root, precision=3), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def vh_structural_hash(svh: SimplifiedVh) -> int:
    return fnv1a64(hash_form(svh).encode("utf-8"))


def count_nodes(root) -> int:
    return sum(1 for _ in walk(root))
