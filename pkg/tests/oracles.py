"""Slow, independent reference implementations used to cross-check the package.

Nothing here imports the code under test except plain data types.
"""

from __future__ import annotations

import math
from fractions import Fraction


# ---------------------------------------------------------------- pHash


def scalar_luma(rgb_rows):
    """Per-pixel loop; ``rgb_rows`` is a nested list [row][col] -> (r, g, b)."""
    return [[0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] for p in row] for row in rgb_rows]


def _cells(n_in, n_out):
    # (source index, weight) lists per output cell, bounds kept as exact fractions
    out = []
    for i in range(n_out):
        lo = Fraction(i * n_in, n_out)
        hi = Fraction((i + 1) * n_in, n_out)
        parts = []
        j = math.floor(lo)
        while j < hi and j < n_in:
            overlap = min(hi, j + 1) - max(lo, Fraction(j))
            if overlap > 0:
                parts.append((j, float(overlap / (hi - lo))))
            j += 1
        out.append(parts)
    return out


def scalar_resize(luma, size=32):
    h, w = len(luma), len(luma[0])
    rows, cols = _cells(h, size), _cells(w, size)
    out = []
    for rparts in rows:
        line = []
        for cparts in cols:
            acc = 0.0
            for y, wy in rparts:
                src = luma[y]
                for x, wx in cparts:
                    acc += src[x] * wy * wx
            line.append(acc)
        out.append(line)
    return out


def scalar_dct_coeff(block, u, v):
    n = len(block)
    au = math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)
    av = math.sqrt(1.0 / n) if v == 0 else math.sqrt(2.0 / n)
    total = 0.0
    for x in range(n):
        cx = math.cos(math.pi * (2 * x + 1) * u / (2 * n))
        for y in range(n):
            total += block[x][y] * cx * math.cos(math.pi * (2 * y + 1) * v / (2 * n))
    return au * av * total


def scalar_phash_from_luma(luma) -> int:
    small = scalar_resize(luma)
    coords = [(u, v) for u in range(8) for v in range(8)][1:] + [(8, 0)]
    vals = [round(scalar_dct_coeff(small, u, v), 6) for u, v in coords]
    s = sorted(vals)
    med = (s[31] + s[32]) / 2
    bits = 0
    for v in vals:
        bits = bits * 2 + (1 if v > med else 0)
    return bits


def scalar_phash(array) -> int:
    """``array`` is an HxWx3 uint8 numpy array; converted to nested lists first."""
    rows = [[tuple(int(c) for c in px) for px in row] for row in array.tolist()]
    return scalar_phash_from_luma(scalar_luma(rows))


# ---------------------------------------------------------------- hamming


def hamming_str(a: int, b: int) -> int:
    sa, sb = format(a, "064b"), format(b, "064b")
    return sum(1 for x, y in zip(sa, sb) if x != y)


def brute_counts(hashes, r):
    """For each distinct hash: number of other distinct hashes within r."""
    keys = sorted(set(hashes))
    return {k: sum(1 for o in keys if o != k and hamming_str(k, o) <= r) for k in keys}


def brute_similar_counts(hashes, r):
    """Per position, number of other positions within r (duplicates included)."""
    return [sum(1 for j, o in enumerate(hashes) if j != i and hamming_str(h, o) <= r) for i, h in enumerate(hashes)]


# ---------------------------------------------------------------- view hierarchies


def visible_nodes(node, path=()):
    """Recursive: nodes whose whole ancestor chain is visible."""
    if "visible" not in node.flags:
        return []
    out = [(path, node)]
    for i, c in enumerate(node.children):
        out += visible_nodes(c, path + (i,))
    return out


def interactables(tree, default_text="hello world"):
    out = []
    for path, node in visible_nodes(tree.root):
        b = node.bounds_px
        if "enabled" not in node.flags or (b[2] - b[0]) * (b[3] - b[1]) <= 0:
            continue
        if "clickable" in node.flags:
            out.append((path, "tap", None))
        if "long_clickable" in node.flags:
            out.append((path, "long_tap", None))
        if "editable" in node.flags:
            out.append((path, "input_text", default_text))
        if "scrollable" in node.flags:
            out.append((path, "scroll", None))
    return out


def classify(class_name, flags, text):
    if any(k in class_name for k in ("CheckBox", "Switch", "Toggle")):
        return "CHECKBOX"
    if "editable" in flags:
        return "INPUT_FIELD"
    if "scrollable" in flags:
        return "SCROLL_ITEM"
    if "clickable" in flags or "Button" in class_name:
        return "BUTTON"
    interactive = {"clickable", "long_clickable", "editable", "scrollable"}
    if text and not (set(flags) & interactive):
        return "TEXT"
    return "OTHER"


def ancestor_by_walk(root, path_a, path_b, direct=False):
    """Resolve both paths to node objects, then climb from b through parent links."""
    parent = {}
    stack = [root]
    while stack:
        n = stack.pop()
        for c in n.children:
            parent[id(c)] = n
            stack.append(c)

    def resolve(path):
        n = root
        for i in path:
            n = n.children[i]
        return n

    a, b = resolve(path_a), resolve(path_b)
    cur = parent.get(id(b))
    hops = 1
    while cur is not None:
        if cur is a:
            return hops == 1 if direct else True
        cur = parent.get(id(cur))
        hops += 1
    return False


# ---------------------------------------------------------------- metrics


def f1_from_counts(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


# ---------------------------------------------------------------- dispatch logs

TERMINAL_EVENTS = ("completed", "paused", "crashed", "crash_requeued", "failed")


def dispatch_overlaps(log):
    """Replay a dispatch log; return the list of violations (instance double-booking, vt going backwards)."""
    busy = {}
    problems = []
    last_vt = -1
    for e in log:
        if e["vt"] < last_vt:
            problems.append(f"vt went backwards at seq {e['seq']}")
        last_vt = e["vt"]
        inst = e.get("instance")
        if e["event"] == "dispatch":
            if inst in busy:
                problems.append(f"{inst} given {e['job']} while running {busy[inst]}")
            busy[inst] = e["job"]
        elif e["event"] in TERMINAL_EVENTS and busy.get(inst) == e["job"]:
            del busy[inst]
    return problems


def max_concurrent(log):
    running, peak = set(), 0
    for e in log:
        if e["event"] == "dispatch":
            running.add(e["job"])
            peak = max(peak, len(running))
        elif e["event"] in TERMINAL_EVENTS:
            running.discard(e["job"])
    return peak
