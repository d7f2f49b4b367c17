"""Dataset statistics: screens per app, similar-screen CDF, label coverage and length, label-to-view matching."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .dedup import HASH_BITS, SIMILARITY_THRESHOLD, PerceptualHash, SimilarityIndex
from .store import DatasetStore, ScreenRecord
from .vh import ComponentType, VhNode, classify_component, effectively_visible, is_labeled, label_of

log = logging.getLogger(__name__)

DEFAULT_APP_EDGES = (10, 30, 100)
IMAGE_CLASSES = ("ImageView", "ImageButton")
FOCUSABLE_IMAGE = "focusable_image"

MATCH_PROMPT = (
    "The attached image is a phone screenshot. Below is the accessibility label of a single "
    "element on that screen. Decide whether you can tell, with confidence, exactly which element "
    "the label belongs to. Answer with one word, True or False.\n"
    "Label: {label}\n"
    "Answer:"
)


class LabelLengthBucket(str, enum.Enum):
    B1_5 = "B1_5"
    B6_10 = "B6_10"
    B11_15 = "B11_15"
    B16_20 = "B16_20"
    OVER_20 = "OVER_20"


HARNESS_BUCKETS = (LabelLengthBucket.B1_5, LabelLengthBucket.B6_10, LabelLengthBucket.B11_15, LabelLengthBucket.B16_20)


def word_count(label: str) -> int:
    return len(label.split())


def bucket_of(n_words: int) -> LabelLengthBucket:
    if n_words < 1:
        raise ValueError("word count must be positive")
    if n_words > 20:
        return LabelLengthBucket.OVER_20
    return HARNESS_BUCKETS[(n_words - 1) // 5]


def _unique(store: DatasetStore) -> list[ScreenRecord]:
    return [r for r in store.sorted_records() if r.is_unique]


def _visible_nodes(rec: ScreenRecord) -> Iterable[tuple[tuple[int, ...], VhNode]]:
    return effectively_visible(rec.raw_vh)


# ---------------------------------------------------------------- screens per app


def _bucket_labels(edges: Sequence[int]) -> list[str]:
    labels, lo = [], 0
    for e in edges:
        labels.append(f"{lo}-{e}")
        lo = e + 1
    labels.append(f">{edges[-1]}")
    return labels


def screens_per_app(store: DatasetStore, edges: Sequence[int] = DEFAULT_APP_EDGES) -> dict:
    edges = sorted(edges)
    hist: dict[str, int] = {}
    for r in store.sorted_records():
        hist.setdefault(r.app_id, 0)
        if r.is_unique:
            hist[r.app_id] += 1
    labels = _bucket_labels(edges)
    counts = dict.fromkeys(labels, 0)
    for n in hist.values():
        i = next((k for k, e in enumerate(edges) if n <= e), len(edges))
        counts[labels[i]] += 1
    total = len(hist)
    return {
        "histogram": dict(sorted(hist.items())),
        "buckets": [
            {"bucket": b, "apps": c, "share": (c / total) if total else 0.0} for b, c in counts.items()
        ],
        "total_apps": total,
    }


# ---------------------------------------------------------------- similarity


def similar_counts(hashes: Sequence[PerceptualHash | int], threshold: int = SIMILARITY_THRESHOLD) -> list[int]:
    """Per input position: how many *other* inputs lie within ``threshold`` (duplicates count)."""
    if not 0 <= threshold <= HASH_BITS:
        raise ValueError("threshold must lie in [0, 64]")
    bits = [h.bits if isinstance(h, PerceptualHash) else int(h) for h in hashes]
    mult = Counter(bits)
    index = SimilarityIndex(mult)
    per_key = {k: sum(mult[g] for g, _ in index.query(k, threshold)) - 1 for k in mult}
    return [per_key[b] for b in bits]


def cdf_points(values: Sequence[int]) -> list[tuple[int, float]]:
    if not values:
        return []
    c = Counter(values)
    n, acc, out = len(values), 0, []
    for x in sorted(c):
        acc += c[x]
        out.append((x, acc / n))
    return out


def similarity_cdf(hashes: Sequence[PerceptualHash | int], threshold: int = SIMILARITY_THRESHOLD) -> list[tuple[int, float]]:
    return cdf_points(similar_counts(hashes, threshold))


def store_hashes(store: DatasetStore) -> list[PerceptualHash]:
    return [r.signature.phash for r in _unique(store)]


# ---------------------------------------------------------------- label coverage


def _categories(node: VhNode) -> list[str]:
    cats = [classify_component(node).value]
    image = [c for c in IMAGE_CLASSES if c in node.class_name]
    cats += image
    if image and "focusable" in node.flags:
        cats.append(FOCUSABLE_IMAGE)
    return cats


def label_coverage(store: DatasetStore) -> dict[str, dict]:
    """Unlabeled percentage per category over visible nodes of unique screens; empty categories are "n/a"."""
    total: Counter = Counter()
    unlabeled: Counter = Counter()
    for rec in _unique(store):
        for _, node in _visible_nodes(rec):
            for cat in _categories(node):
                total[cat] += 1
                if not is_labeled(node):
                    unlabeled[cat] += 1
    names = [t.value for t in ComponentType] + list(IMAGE_CLASSES) + [FOCUSABLE_IMAGE]
    out = {}
    for cat in names:
        n = total[cat]
        out[cat] = {
            "nodes": n,
            "unlabeled": unlabeled[cat],
            "unlabeled_pct": (100.0 * unlabeled[cat] / n) if n else "n/a",
        }
    return out


# ---------------------------------------------------------------- label length


def _labeled_nodes(store: DatasetStore):
    for rec in _unique(store):
        for path, node in _visible_nodes(rec):
            label = label_of(node)
            if label is not None:
                yield rec, path, node, label


def label_length_distribution(stores: DatasetStore | Mapping[str, DatasetStore], name: str = "dataset") -> dict:
    if isinstance(stores, DatasetStore):
        stores = {name: stores}
    empty = {b.value: 0 for b in LabelLengthBucket}
    per_dataset: dict[str, dict] = {}
    per_type: dict[str, dict[str, int]] = {t.value: dict(empty) for t in ComponentType}
    blank = 0
    for ds, store in stores.items():
        counts = dict(empty)
        for _, _, node, label in _labeled_nodes(store):
            n = word_count(label)
            if n == 0:
                blank += 1
                continue
            b = bucket_of(n).value
            counts[b] += 1
            per_type[classify_component(node).value][b] += 1
        per_dataset[ds] = counts
    return {"datasets": per_dataset, "components": per_type, "blank_labels": blank}


# ---------------------------------------------------------------- matching harness


class JudgeFailure(Exception):
    pass


@dataclass(frozen=True)
class MatchSample:
    record_id: str
    screenshot: str
    node_path: tuple[int, ...]
    label: str
    bucket: LabelLengthBucket

    @property
    def prompt(self) -> str:
        return MATCH_PROMPT.format(label=self.label)


class MatchJudge(Protocol):
    def judge(self, sample: MatchSample, store: DatasetStore) -> bool: ...


class ConstantJudge:
    def __init__(self, verdict: bool = True):
        self.verdict = verdict

    def judge(self, sample, store) -> bool:
        return self.verdict


class PlantedSetJudge:
    """True iff the sample's label is in a fixed set."""

    def __init__(self, good: Iterable[str]):
        self.good = frozenset(good)

    def judge(self, sample, store) -> bool:
        return sample.label in self.good


class ChatJudge:
    """Asks a chat endpoint, attaching the screenshot when the endpoint is multimodal."""

    def __init__(self, chat):
        self.chat = chat

    def judge(self, sample: MatchSample, store: DatasetStore) -> bool:
        from .llm import ChatRequest, LlmError

        text = sample.prompt
        if getattr(self.chat, "multimodal", False) and store.root is not None:
            import base64

            png = store.path(sample.screenshot).read_bytes()
            url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
            content = [{"type": "text", "text": text}, {"type": "image_url", "image_url": {"url": url}}]
        else:
            content = text
        try:
            reply = self.chat.complete(ChatRequest("", ({"role": "user", "content": content},)))
        except LlmError as exc:
            raise JudgeFailure(str(exc)) from exc
        word = re.sub(r"[^a-z]", "", (reply.content or "").strip().lower())
        if word not in ("true", "false"):
            raise JudgeFailure(f"unexpected verdict {reply.content!r}")
        return word == "true"


def matching_candidates(store: DatasetStore) -> dict[LabelLengthBucket, list[MatchSample]]:
    out: dict[LabelLengthBucket, list[MatchSample]] = {b: [] for b in HARNESS_BUCKETS}
    for rec, path, _, label in _labeled_nodes(store):
        n = word_count(label)
        if n == 0 or n > 20:
            continue
        b = bucket_of(n)
        out[b].append(MatchSample(rec.record_id, rec.screenshot_ref, path, label, b))
    return out


def _bucket_seed(seed: int, bucket: LabelLengthBucket) -> int:
    return int.from_bytes(hashlib.blake2b(f"{seed}:{bucket.value}".encode(), digest_size=8).digest(), "big")


def run_matching_harness(store: DatasetStore, judge: MatchJudge, per_bucket: int = 500, seed: int = 0) -> list[dict]:
    rows = []
    for bucket, cands in matching_candidates(store).items():
        k = min(per_bucket, len(cands))
        sample = random.Random(_bucket_seed(seed, bucket)).sample(cands, k)
        correct = skipped = 0
        for s in sample:
            try:
                correct += bool(judge.judge(s, store))
            except JudgeFailure as exc:
                skipped += 1
                log.warning("judge failed on %s %s: %s", s.record_id, s.node_path, exc)
        judged = k - skipped
        rows.append(
            {
                "bucket": bucket.value,
                "candidates": len(cands),
                "sampled": k,
                "shortfall": len(cands) < per_bucket,
                "skipped": skipped,
                "correct": correct,
                "percentage": round(100.0 * correct / judged, 2) if judged else "n/a",
                "sample_ids": [f"{s.record_id}#{'/'.join(map(str, s.node_path))}" for s in sample],
            }
        )
    return rows


# ---------------------------------------------------------------- outputs


def _csv(rows: list[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


ANALYSES = ("stats", "similarity-cdf", "label-coverage", "label-length", "match-harness")


def analyze_store(
    store: DatasetStore,
    out_dir: str | Path,
    judge: MatchJudge | None = None,
    per_bucket: int = 500,
    seed: int = 0,
    threshold: int = SIMILARITY_THRESHOLD,
    edges: Sequence[int] = DEFAULT_APP_EDGES,
    parts: Sequence[str] = ANALYSES,
) -> dict:
    """Write the selected analyses as CSV files plus a ``stats.json`` bundle; returns the bundle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats: dict = {"records": store.total_count, "unique": sum(1 for r in store.records if r.is_unique)}
    if "stats" in parts:
        spa = stats["screens_per_app"] = screens_per_app(store, edges)
        (out / "screens_per_app.csv").write_text(
            _csv([{"app_id": a, "unique_screens": n} for a, n in spa["histogram"].items()], ["app_id", "unique_screens"])
        )
        (out / "screens_per_app_buckets.csv").write_text(_csv(spa["buckets"], ["bucket", "apps", "share"]))
    if "similarity-cdf" in parts:
        cdf = similarity_cdf(store_hashes(store), threshold)
        stats["similarity_cdf"] = {"threshold": threshold, "points": [[x, y] for x, y in cdf]}
        (out / "similarity_cdf.csv").write_text(_csv([{"x": x, "y": repr(y)} for x, y in cdf], ["x", "y"]))
    if "label-coverage" in parts:
        cov = stats["label_coverage"] = label_coverage(store)
        (out / "label_coverage.csv").write_text(
            _csv([{"category": k, **v} for k, v in cov.items()], ["category", "nodes", "unlabeled", "unlabeled_pct"])
        )
    if "label-length" in parts:
        lengths = stats["label_length"] = label_length_distribution(store)
        (out / "label_length.csv").write_text(
            _csv(
                [{"group": f"dataset:{k}", **v} for k, v in lengths["datasets"].items()]
                + [{"group": f"component:{k}", **v} for k, v in lengths["components"].items()],
                ["group"] + [b.value for b in LabelLengthBucket],
            )
        )
    if "match-harness" in parts and judge is not None:
        table = run_matching_harness(store, judge, per_bucket, seed)
        stats["matching"] = {"seed": seed, "per_bucket": per_bucket,
                             "rows": [{k: v for k, v in r.items() if k != "sample_ids"} for r in table]}
        (out / "matching.csv").write_text(
            _csv(table, ["bucket", "candidates", "sampled", "skipped", "correct", "percentage", "shortfall"])
        )
        (out / "matching_samples.json").write_text(
            json.dumps({r["bucket"]: r["sample_ids"] for r in table}, indent=1, sort_keys=True) + "\n"
        )
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    return stats
