import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import add_screen, fake_sig, node
from screencrawl.dedup import phash
from screencrawl.sim import SimDevice
from screencrawl.store import (
    DatasetStore,
    StorageFailure,
    TrajectoryRecord,
    compute_signature,
    read_manifest,
)
from screencrawl.traversal import RulePolicy, run_session
from screencrawl.fleet import trajectory_of


def crawl_into(store, app, app_id=None):
    dev = SimDevice("t")
    dev.install(app)
    dev.launch()
    res = run_session(dev, [RulePolicy()], session_id="sess")
    for cap in res.records:
        store.add_capture(app_id or app.app_id, res.session_id, cap.step, cap.image, cap.vh, category=app.category)
    store.write_trajectory(trajectory_of(app_id or app.app_id, res))
    return res


def test_duplicate_flagged_not_dropped():
    s = DatasetStore()
    a = add_screen(s, "a", 0, node(), sig=fake_sig(1))
    b = add_screen(s, "a", 1, node(), sig=fake_sig(1))
    assert a.is_unique and not b.is_unique
    assert (s.total_count, s.unique_count, s.duplicate_count) == (2, 1, 1)


def test_record_id_collision():
    s = DatasetStore()
    add_screen(s, "a", 0, node())
    with pytest.raises(StorageFailure):
        add_screen(s, "a", 0, node())


def test_query_filters():
    s = DatasetStore()
    for i in range(12):
        add_screen(s, f"app{i % 3}", i, node(), sig=fake_sig(i % 5), category=["TOOLS", "GAME"][i % 2])
    assert sum(1 for _ in s.query(unique=True)) == s.unique_count == 5
    assert list(s.query(app_id="nope")) == []
    brute = [r for r in s.records if r.category == "GAME" and r.app_id == "app1"]
    assert list(s.query(app_id="app1", category="GAME")) == brute


def test_category_filter_on_500_records():
    rng = random.Random(9)
    s = DatasetStore()
    cats = ["TOOLS", "GAME", "SOCIAL", "WEATHER"]
    for i in range(500):
        add_screen(s, f"app{i % 17}", i, node(), sig=fake_sig(rng.randrange(300)), category=rng.choice(cats))
    for c in cats:
        assert list(s.query(category=c)) == [r for r in s.records if r.category == c]


def test_in_memory_store_cannot_export():
    with pytest.raises(StorageFailure):
        DatasetStore().export_manifest()


def test_open_missing():
    with pytest.raises(StorageFailure):
        DatasetStore.open("/nonexistent/place")


def test_disk_round_trip(tmp_path, scenario):
    store = DatasetStore(tmp_path)
    apps = [scenario.apps[a] for a in ("app001", "app002", "app003")]
    for app in apps:
        store.write_app({"app_id": app.app_id, "package": app.package_name, "category": app.category, "name": ""})
        crawl_into(store, app)
    store.flush()
    rows = read_manifest(tmp_path / "manifest.jsonl")
    assert len(rows) == store.total_count
    back = DatasetStore.open(tmp_path)
    assert [r.manifest_obj() for r in back.sorted_records()] == [r.manifest_obj() for r in store.sorted_records()]
    assert back.unique_count == store.unique_count
    assert set(back.trajectories) == set(store.trajectories)
    assert back.apps == store.apps
    for r in back.records:
        assert r.raw_vh == store.get(r.record_id).raw_vh


def test_signature_recomputed_from_artifacts(tmp_path, scenario):
    store = DatasetStore(tmp_path)
    crawl_into(store, scenario.apps["app004"])
    store.flush()
    for row in read_manifest(tmp_path / "manifest.jsonl"):
        rec = store.get(row["record_id"])
        sig = compute_signature(tmp_path / row["screenshot"], rec.raw_vh)
        assert str(sig.phash) == row["phash"]
        assert f"{sig.vh_hash:016x}" == row["vh_hash"]


def test_layout(tmp_path, scenario):
    store = DatasetStore(tmp_path)
    crawl_into(store, scenario.apps["app006"])
    store.flush()
    rec = store.records[0]
    assert (tmp_path / f"images/{rec.app_id}/{rec.session_id}/{rec.step}.png").exists()
    assert (tmp_path / f"vh/{rec.app_id}/{rec.session_id}/{rec.step}.json").exists()
    for name in ("manifest.jsonl", "trajectories.jsonl", "apps.jsonl"):
        assert (tmp_path / name).exists()


def test_png_lossless(tmp_path):
    store = DatasetStore(tmp_path)
    img = np.random.default_rng(0).integers(0, 256, (30, 20, 3), dtype=np.uint8)
    from helpers import tree

    store.add_capture("a", "s", 0, img, tree(node(bounds=(0, 0, 20, 30)), 20, 30))
    assert phash(tmp_path / "images/a/s/0.png") == phash(img)


def test_trajectory_chain_enforced():
    a, b, c = fake_sig(1), fake_sig(2), fake_sig(3)
    good = TrajectoryRecord("s", "app", [(a, {"kind": "back"}, b), (b, {"kind": "back"}, c)], "completed")
    DatasetStore().write_trajectory(good)
    bad = TrajectoryRecord("s", "app", [(a, {"kind": "back"}, b), (c, {"kind": "back"}, a)], "completed")
    with pytest.raises(ValueError):
        DatasetStore().write_trajectory(bad)
    assert TrajectoryRecord.from_obj(json.loads(json.dumps(good.to_obj()))) == good


def test_session_trajectories_chain(scenario):
    store = DatasetStore()
    for app_id in ("app007", "app008", "app009"):
        crawl_into(store, scenario.apps[app_id])
    for t in store.trajectories.values():
        t.check_chain()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 40), max_size=80), st.randoms(use_true_random=False))
def test_unique_count_order_independent(sigs, rnd):
    def count(order):
        s = DatasetStore()
        for i, k in enumerate(order):
            add_screen(s, "a", i, node(), sig=fake_sig(k))
        assert s.unique_count + s.duplicate_count == s.total_count
        return s.unique_count

    shuffled = list(sigs)
    rnd.shuffle(shuffled)
    assert count(sigs) == count(shuffled) == len(set(sigs))
