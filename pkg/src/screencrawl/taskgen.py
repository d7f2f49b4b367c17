"""Training samples for the four screen-understanding tasks, screen-level splits, and scoring."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import binary_f1, multiclass_f1, per_class_f1, squad_f1
from .store import DatasetStore, ScreenRecord
from .vh import ComponentType, VhNode, classify_component, effectively_visible, simplify_vh

TASKS = ("vh_generation", "tappability", "relationship", "component_id")
COMPONENT_CLASSES = tuple(t.value for t in ComponentType if t is not ComponentType.OTHER)
DEFAULT_BALANCE = 0.10


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class TaskSample:
    sample_id: str
    task: str
    record_id: str
    screenshot_ref: str
    inputs: dict
    gold: object

    def to_obj(self) -> dict:
        return {
            "id": self.sample_id,
            "task": self.task,
            "record_id": self.record_id,
            "image": self.screenshot_ref,
            "input": self.inputs,
            "gold": self.gold,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> TaskSample:
        return cls(obj["id"], obj["task"], obj["record_id"], obj["image"], obj["input"], obj["gold"])


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in [0, 1]")


def _unique(store: DatasetStore) -> list[ScreenRecord]:
    return [r for r in store.sorted_records() if r.is_unique]


def norm_bounds(node: VhNode, width: int, height: int) -> list[float]:
    l, t, r, b = node.bounds_px
    w, h = max(width, 1), max(height, 1)
    return [round(l / w, 6), round(t / h, 6), round(r / w, 6), round(b / h, 6)]


def _visible(rec: ScreenRecord) -> list[tuple[tuple[int, ...], VhNode]]:
    return [(p, n) for p, n in effectively_visible(rec.raw_vh) if n.bounds_px.area > 0]


def _pid(path: Sequence[int]) -> str:
    return "/".join(map(str, path))


# ---------------------------------------------------------------- generators


def gen_vh_generation(store: DatasetStore, n: int, seed: int = 0) -> list[TaskSample]:
    recs = _unique(store)
    if n > len(recs):
        raise InsufficientData(f"asked for {n} samples, store has {len(recs)} unique screens")
    picked = random.Random(seed).sample(recs, n)
    return [
        TaskSample(f"vhgen-{i:06d}", "vh_generation", r.record_id, r.screenshot_ref, {}, simplify_vh(r.raw_vh).to_json())
        for i, r in enumerate(picked)
    ]


def gen_tappability(store: DatasetStore, seed: int = 0) -> list[TaskSample]:
    rng = random.Random(seed)
    out = []
    for rec in _unique(store):
        nodes = _visible(rec)
        w, h = rec.raw_vh.screen_width_px, rec.raw_vh.screen_height_px
        for want in (True, False):
            pool = [(p, n) for p, n in nodes if ("clickable" in n.flags) == want]
            if not pool:
                continue
            path, node = rng.choice(pool)
            out.append(
                TaskSample(
                    f"tap-{len(out):06d}",
                    "tappability",
                    rec.record_id,
                    rec.screenshot_ref,
                    {"bounds": norm_bounds(node, w, h), "node_path": list(path)},
                    want,
                )
            )
    return out


def is_ancestor(a: Sequence[int], b: Sequence[int], direct: bool = False) -> bool:
    a, b = tuple(a), tuple(b)
    if direct:
        return len(b) == len(a) + 1 and b[: len(a)] == a
    return len(b) > len(a) and b[: len(a)] == a


def gen_relationship(
    store: DatasetStore, seed: int = 0, balance: float = DEFAULT_BALANCE, direct_parent: bool = False
) -> list[TaskSample]:
    """One related and one unrelated pair of visible, focusable nodes per screen, then class-balanced."""
    rng = random.Random(seed)
    pos, neg = [], []
    for rec in _unique(store):
        nodes = [(p, n) for p, n in _visible(rec) if "focusable" in n.flags]
        related, unrelated = [], []
        for pa, _ in nodes:
            for pb, _ in nodes:
                if pa == pb:
                    continue
                if is_ancestor(pa, pb, direct_parent):
                    related.append((pa, pb))
                elif not is_ancestor(pa, pb) and not is_ancestor(pb, pa):
                    unrelated.append((pa, pb))
        byp = dict(nodes)
        w, h = rec.raw_vh.screen_width_px, rec.raw_vh.screen_height_px
        for bucket, pool, gold in ((pos, related, True), (neg, unrelated, False)):
            if not pool:
                continue
            pa, pb = rng.choice(pool)
            bucket.append(
                (
                    rec,
                    {
                        "first": {"bounds": norm_bounds(byp[pa], w, h), "node_path": list(pa)},
                        "second": {"bounds": norm_bounds(byp[pb], w, h), "node_path": list(pb)},
                        "direct_parent": direct_parent,
                    },
                    gold,
                )
            )
    # trim the majority class until |T - F| <= balance * total
    big, small = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    keep = len(big)
    while keep - len(small) > balance * (keep + len(small)):
        keep -= 1
    if keep < len(big):
        drop = set(rng.sample(range(len(big)), len(big) - keep))
        big[:] = [x for i, x in enumerate(big) if i not in drop]
    merged = sorted(pos + neg, key=lambda x: (x[0].record_id, not x[2]))
    return [
        TaskSample(f"rel-{i:06d}", "relationship", rec.record_id, rec.screenshot_ref, inputs, gold)
        for i, (rec, inputs, gold) in enumerate(merged)
    ]


def gen_component_id(store: DatasetStore, seed: int = 0) -> list[TaskSample]:
    rng = random.Random(seed)
    out = []
    for rec in _unique(store):
        pool = [(p, n) for p, n in _visible(rec) if classify_component(n) is not ComponentType.OTHER]
        if not pool:
            continue
        path, node = rng.choice(pool)
        w, h = rec.raw_vh.screen_width_px, rec.raw_vh.screen_height_px
        out.append(
            TaskSample(
                f"comp-{len(out):06d}",
                "component_id",
                rec.record_id,
                rec.screenshot_ref,
                {"bounds": norm_bounds(node, w, h), "node_path": list(path)},
                classify_component(node).value,
            )
        )
    return out


def generate(task: str, store: DatasetStore, seed: int = 0, n: int | None = None, **kw) -> list[TaskSample]:
    if task == "vh_generation":
        return gen_vh_generation(store, n if n is not None else sum(1 for r in store.records if r.is_unique), seed)
    if task == "tappability":
        return gen_tappability(store, seed)
    if task == "relationship":
        return gen_relationship(store, seed, **kw)
    if task == "component_id":
        return gen_component_id(store, seed)
    raise ValueError(f"unknown task {task!r}")


def recompute_gold(sample: TaskSample, store: DatasetStore):
    """Gold value rebuilt from the source record alone."""
    rec = store.get(sample.record_id)
    tree = rec.raw_vh
    if sample.task == "vh_generation":
        return simplify_vh(tree).to_json()
    if sample.task == "tappability":
        return "clickable" in tree.node_at(sample.inputs["node_path"]).flags
    if sample.task == "component_id":
        return classify_component(tree.node_at(sample.inputs["node_path"])).value
    if sample.task == "relationship":
        return is_ancestor(
            sample.inputs["first"]["node_path"], sample.inputs["second"]["node_path"], sample.inputs["direct_parent"]
        )
    raise ValueError(f"unknown task {sample.task!r}")


# ---------------------------------------------------------------- split


def split(samples: Sequence[TaskSample], spec: SplitSpec = SplitSpec()) -> tuple[list[TaskSample], list[TaskSample]]:
    """Seeded screen-level split: all samples of one screenshot land on the same side."""
    groups: dict[str, list[TaskSample]] = {}
    for s in samples:
        groups.setdefault(s.screenshot_ref, []).append(s)
    keys = sorted(groups)
    random.Random(spec.seed).shuffle(keys)
    target = math.floor(spec.train_fraction * len(samples))
    train, evl = [], []
    for k in keys:
        (train if len(train) < target else evl).extend(groups[k])
    return train, evl


# ---------------------------------------------------------------- files and scoring


def write_jsonl(samples: Iterable[TaskSample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_obj(), sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def score(task: str, preds: Sequence[dict], golds: Sequence[dict]) -> dict:
    """Match predictions to golds by ``id`` and score with the task's metric."""
    gold_by_id = {g["id"]: g["gold"] for g in golds}
    pred_by_id = {p["id"]: p.get("pred", p.get("gold")) for p in preds}
    missing = sorted(set(gold_by_id) - set(pred_by_id))
    ids = sorted(gold_by_id)
    g = [gold_by_id[i] for i in ids]
    p = [pred_by_id.get(i) for i in ids]
    out: dict = {"task": task, "n": len(ids), "missing_predictions": len(missing), "empty": not ids}
    if task in ("tappability", "relationship"):
        out["f1"] = binary_f1([bool(x) for x in p], [bool(x) for x in g])
    elif task == "component_id":
        out["f1"] = multiclass_f1(p, g, COMPONENT_CLASSES)
        out["per_class"] = per_class_f1(p, g, COMPONENT_CLASSES)
    elif task in ("screen_qa", "vh_generation"):
        vals = [squad_f1(x or "", y) for x, y in zip(p, g)]
        out["f1"] = sum(vals) / len(vals) if vals else 0.0
    else:
        raise ValueError(f"unknown task {task!r}")
    return out
