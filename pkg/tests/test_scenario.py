import json
from collections import Counter

from screencrawl.scenario import GATED86_EXPECTED, generate_gated86, gated86_dir


def test_checked_in_fixture_matches_generator():
    files = generate_gated86()
    root = gated86_dir()
    on_disk = {p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()}
    assert on_disk == set(files)
    for rel, data in files.items():
        assert (root / rel).read_bytes() == data, rel


def test_manifest_expectations():
    m = json.loads((gated86_dir() / "manifest.json").read_text())
    assert Counter(e["gate_class"] for e in m["apps"]) == {"none": 16, "login": 22, "captcha": 48}
    assert m["expected"]["completed"] == GATED86_EXPECTED


def test_generator_seeded():
    assert generate_gated86(1) == generate_gated86(1)
    assert generate_gated86(1) != generate_gated86(2)
