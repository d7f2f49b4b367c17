"""Screenshot/VH dataset on disk.

Layout under the dataset root (all paths in files are relative to it)::

    images/{app_id}/{session_id}/{step}.png
    vh/{app_id}/{session_id}/{step}.json
    manifest.jsonl       one ScreenRecord per line, sorted by (app_id, session_id, step)
    trajectories.jsonl   one TrajectoryRecord per session
    apps.jsonl           app metadata

Uniqueness is exact :class:`ScreenSignature` equality against everything written
before; duplicates are kept and flagged. Writes come from a single ingesting
thread; readers should wait for :meth:`DatasetStore.flush`.
"""

from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .dedup import ScreenSignature, phash
from .vh import SimplifiedVh, VhTree, parse_vh, serialize_vh, simplify_vh, vh_structural_hash


class StorageFailure(Exception):
    pass


@dataclass
class ScreenRecord:
    record_id: str
    app_id: str
    session_id: str
    step: int
    screenshot_ref: str
    raw_vh: VhTree
    simplified_vh: SimplifiedVh
    signature: ScreenSignature
    is_unique: bool = False
    category: str = ""

    @property
    def vh_ref(self) -> str:
        return f"vh/{self.app_id}/{self.session_id}/{self.step}.json"

    def manifest_obj(self) -> dict:
        return {
            "record_id": self.record_id,
            "app_id": self.app_id,
            "category": self.category,
            "session_id": self.session_id,
            "step": self.step,
            "screenshot": self.screenshot_ref,
            "vh": self.vh_ref,
            "phash": str(self.signature.phash),
            "vh_hash": f"{self.signature.vh_hash:016x}",
            "is_unique": self.is_unique,
        }


@dataclass
class TrajectoryRecord:
    session_id: str
    app_id: str
    steps: list[tuple[ScreenSignature, dict, ScreenSignature]]
    status: str

    def check_chain(self) -> None:
        for (_, _, nxt), (cur, _, _) in zip(self.steps, self.steps[1:]):
            if nxt != cur:
                raise ValueError(f"trajectory {self.session_id} does not chain")

    def to_obj(self) -> dict:
        return {
            "session_id": self.session_id,
            "app_id": self.app_id,
            "status": self.status,
            "steps": [[a.key(), act, b.key()] for a, act, b in self.steps],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> TrajectoryRecord:
        return cls(
            obj["session_id"],
            obj["app_id"],
            [(ScreenSignature.from_key(a), act, ScreenSignature.from_key(b)) for a, act, b in obj["steps"]],
            obj["status"],
        )


def compute_signature(image, raw_vh: VhTree) -> ScreenSignature:
    return ScreenSignature(phash(image), vh_structural_hash(simplify_vh(raw_vh)))


def _dump_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


@dataclass
class DatasetStore:
    root: Path | None = None
    png_compress_level: int = 1
    records: list[ScreenRecord] = field(default_factory=list)
    trajectories: dict[str, TrajectoryRecord] = field(default_factory=dict)
    apps: dict[str, dict] = field(default_factory=dict)
    unique_count: int = 0
    duplicate_count: int = 0

    def __post_init__(self) -> None:
        if self.root is not None:
            self.root = Path(self.root)
        self._seen: set[ScreenSignature] = set()
        self._lock = threading.Lock()
        self._png_cache: dict[int, tuple[np.ndarray, bytes]] = {}
        self._by_id: dict[str, ScreenRecord] = {}

    @property
    def total_count(self) -> int:
        return len(self.records)

    # ------------------------------------------------------------ writes
    def write_record(self, record: ScreenRecord, image=None) -> str:
        """Append ``record``; returns ``stored_unique`` or ``stored_duplicate``."""
        if record.record_id in self._by_id:
            raise StorageFailure(f"record {record.record_id} already stored")
        if self.root is not None:
            try:
                if image is not None:
                    self._write_png(record.screenshot_ref, image)
                vh_path = self.root / record.vh_ref
                vh_path.parent.mkdir(parents=True, exist_ok=True)
                vh_path.write_text(serialize_vh(record.raw_vh), encoding="utf-8")
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
        with self._lock:
            record.is_unique = record.signature not in self._seen
            if record.is_unique:
                self._seen.add(record.signature)
                self.unique_count += 1
            else:
                self.duplicate_count += 1
            self.records.append(record)
            self._by_id[record.record_id] = record
        return "stored_unique" if record.is_unique else "stored_duplicate"

    def add_capture(
        self,
        app_id: str,
        session_id: str,
        step: int,
        image,
        raw_vh: VhTree,
        signature: ScreenSignature | None = None,
        simplified: SimplifiedVh | None = None,
        category: str = "",
    ) -> ScreenRecord:
        if simplified is None:
            simplified = simplify_vh(raw_vh)
        if signature is None:
            signature = ScreenSignature(phash(image), vh_structural_hash(simplified))
        rec = ScreenRecord(
            record_id=f"{app_id}/{session_id}/{step}",
            app_id=app_id,
            session_id=session_id,
            step=step,
            screenshot_ref=f"images/{app_id}/{session_id}/{step}.png",
            raw_vh=raw_vh,
            simplified_vh=simplified,
            signature=signature,
            category=category or self.apps.get(app_id, {}).get("category", ""),
        )
        self.write_record(rec, image)
        return rec

    def _write_png(self, rel: str, image) -> None:
        if isinstance(image, (bytes, bytearray)):
            data = bytes(image)
        else:
            hit = self._png_cache.get(id(image))
            if hit is None or hit[0] is not image:
                buf = io.BytesIO()
                Image.fromarray(np.asarray(image)).save(buf, format="PNG", compress_level=self.png_compress_level)
                hit = (image, buf.getvalue())
                if len(self._png_cache) > 256:
                    self._png_cache.clear()
                self._png_cache[id(image)] = hit
            data = hit[1]
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)

    def write_trajectory(self, traj: TrajectoryRecord) -> None:
        traj.check_chain()
        self.trajectories[traj.session_id] = traj

    def write_app(self, meta: dict) -> None:
        self.apps[meta["app_id"]] = dict(meta)

    # ------------------------------------------------------------ export
    def sorted_records(self) -> list[ScreenRecord]:
        return sorted(self.records, key=lambda r: (r.app_id, r.session_id, r.step))

    def export_manifest(self, root: Path | None = None) -> Path:
        root = Path(root) if root is not None else self.root
        if root is None:
            raise StorageFailure("in-memory store has no root to export to")
        try:
            root.mkdir(parents=True, exist_ok=True)
            _dump_jsonl(root / "manifest.jsonl", (r.manifest_obj() for r in self.sorted_records()))
            _dump_jsonl(
                root / "trajectories.jsonl",
                (self.trajectories[k].to_obj() for k in sorted(self.trajectories)),
            )
            _dump_jsonl(root / "apps.jsonl", (self.apps[k] for k in sorted(self.apps)))
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        return root / "manifest.jsonl"

    flush = export_manifest

    # ------------------------------------------------------------ reads
    def query(
        self, app_id: str | None = None, category: str | None = None, unique: bool | None = None
    ) -> Iterator[ScreenRecord]:
        for r in self.records:
            if app_id is not None and r.app_id != app_id:
                continue
            if category is not None and r.category != category:
                continue
            if unique is not None and r.is_unique != unique:
                continue
            yield r

    def get(self, record_id: str) -> ScreenRecord:
        return self._by_id[record_id]

    def path(self, rel: str) -> Path:
        if self.root is None:
            raise StorageFailure("in-memory store has no files")
        return self.root / rel

    @classmethod
    def open(cls, root: str | Path) -> DatasetStore:
        """Load a flushed dataset; records keep their stored uniqueness flags and order."""
        root = Path(root)
        manifest = root / "manifest.jsonl"
        if not manifest.exists():
            raise StorageFailure(f"no manifest at {manifest}")
        store = cls(root)
        try:
            apps_path = root / "apps.jsonl"
            if apps_path.exists():
                for line in apps_path.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        store.write_app(json.loads(line))
            rows = [json.loads(line) for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
            for row in rows:
                raw = parse_vh((root / row["vh"]).read_bytes())
                rec = ScreenRecord(
                    record_id=row["record_id"],
                    app_id=row["app_id"],
                    session_id=row["session_id"],
                    step=row["step"],
                    screenshot_ref=row["screenshot"],
                    raw_vh=raw,
                    simplified_vh=simplify_vh(raw),
                    signature=ScreenSignature.from_key(f"{row['phash']}:{row['vh_hash']}"),
                    is_unique=row["is_unique"],
                    category=row.get("category", ""),
                )
                store.records.append(rec)
                store._by_id[rec.record_id] = rec
                store._seen.add(rec.signature)
                if rec.is_unique:
                    store.unique_count += 1
                else:
                    store.duplicate_count += 1
            traj_path = root / "trajectories.jsonl"
            if traj_path.exists():
                for line in traj_path.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        t = TrajectoryRecord.from_obj(json.loads(line))
                        store.trajectories[t.session_id] = t
        except (OSError, KeyError, ValueError) as exc:
            raise StorageFailure(f"cannot load dataset at {root}: {exc}") from exc
        return store


def read_manifest(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
