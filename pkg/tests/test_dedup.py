import io
import random
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from helpers import solid
from oracles import brute_counts, hamming_str, scalar_phash
from screencrawl.dedup import (
    EmptyImage,
    PerceptualHash,
    ScreenSignature,
    SimilarityIndex,
    bits_from_values,
    hamming,
    index_count_within,
    index_insert,
    is_similar,
    phash,
)

u64 = st.integers(0, (1 << 64) - 1)


def test_hex_format_round_trip():
    h = PerceptualHash(0xABC)
    assert str(h) == "0000000000000abc"
    assert PerceptualHash.from_hex(str(h)) == h


def test_signature_key_round_trip():
    s = ScreenSignature(PerceptualHash(7), 0xDEADBEEF)
    assert ScreenSignature.from_key(s.key()) == s


def test_identical_images_hash_equal():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (120, 80, 3), dtype=np.uint8)
    assert phash(img) == phash(img.copy())
    assert hamming(phash(img), phash(img)) == 0


def test_uniform_image_hashes_to_zero():
    # every AC coefficient is 0, so nothing exceeds the median
    assert phash(solid((10, 200, 30))).bits == 0


def test_empty_image():
    with pytest.raises(EmptyImage):
        phash(np.zeros((0, 5, 3), dtype=np.uint8))


def test_unsupported_shape():
    with pytest.raises(ValueError):
        phash(np.zeros((4, 4, 2), dtype=np.uint8))


def test_median_rule_is_strict_and_uses_mean_of_middle():
    vals = list(range(64))
    bits = bits_from_values(vals)
    # median is 31.5; values 32..63 set
    assert bits == (1 << 32) - 1
    assert bits_from_values([1.0] * 64) == 0


def test_accepts_png_bytes_pil_and_path(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (50, 70, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    p = tmp_path / "x.png"
    p.write_bytes(buf.getvalue())
    expected = phash(img)
    assert phash(buf.getvalue()) == expected
    assert phash(Image.fromarray(img)) == expected
    assert phash(p) == expected
    assert phash(str(p)) == expected


def test_rgba_ignores_alpha():
    rng = np.random.default_rng(6)
    rgb = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
    rgba = np.dstack([rgb, np.full((40, 40), 17, np.uint8)])
    assert phash(rgba) == phash(rgb)


@pytest.mark.parametrize("shape", [(1, 1, 3), (3, 50, 3), (32, 32, 3), (97, 61, 3)])
def test_matches_scalar_oracle_on_odd_sizes(shape):
    img = np.random.default_rng(sum(shape)).integers(0, 256, shape, dtype=np.uint8)
    assert phash(img).bits == scalar_phash(img)


def test_fixture_screens_differing_in_bounds_hash_differently(scenario):
    app = scenario.apps["app002"]
    sid = next(iter(app.screens))
    from screencrawl.sim import ScreenSpec, render

    spec = app.screens[sid]
    moved = dict(spec.vh_template)
    kids = [dict(c) for c in moved["children"]]
    b = list(kids[0]["bounds"])
    kids[0]["bounds"] = [b[0], b[1], b[2] // 2, b[3] + 120]
    moved["children"] = kids
    other = ScreenSpec(spec.screen_id, moved, spec.render_seed)
    assert phash(render(spec, app.width, app.height)) != phash(render(other, app.width, app.height))


# ---------------------------------------------------------------- hamming


@settings(max_examples=500)
@given(u64, u64, u64)
def test_hamming_is_a_metric(a, b, c):
    assert hamming(a, b) == hamming(b, a) == hamming_str(a, b)
    assert (hamming(a, b) == 0) == (a == b)
    assert hamming(a, c) <= hamming(a, b) + hamming(b, c)


def test_threshold_boundary():
    a = 0
    assert is_similar(a, 0b11111)
    assert not is_similar(a, 0b111111)
    with pytest.raises(ValueError):
        is_similar(1, 2, threshold=65)


# ---------------------------------------------------------------- BK-tree


def test_insert_twice():
    idx = SimilarityIndex()
    assert index_insert(idx, 42) == "inserted"
    assert index_insert(idx, 42) == "already_present"
    assert len(idx) == 1


def test_self_excluded():
    idx = SimilarityIndex([0xF0F0])
    assert index_count_within(idx, 0xF0F0, 5) == 0
    assert idx.query(0xF0F0, 0) == [(0xF0F0, 0)]


def test_empty_index():
    idx = SimilarityIndex()
    assert idx.query(1, 64) == [] and idx.count_within(1, 64) == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(u64, max_size=60), st.integers(0, 12))
def test_index_matches_brute_force(hashes, r):
    idx = SimilarityIndex(hashes)
    oracle = brute_counts(hashes, r)
    for h in set(hashes):
        assert idx.count_within(h, r) == oracle[h]


def test_clustered_hashes_match_brute_force():
    rng = random.Random(11)
    centres = [rng.getrandbits(64) for _ in range(5)]
    hashes = []
    for _ in range(300):
        h = rng.choice(centres)
        for _ in range(rng.randint(0, 6)):
            h ^= 1 << rng.randrange(64)
        hashes.append(h)
    idx = SimilarityIndex(hashes)
    for r in range(0, 9):
        oracle = brute_counts(hashes, r)
        assert all(idx.count_within(h, r) == oracle[h] for h in set(hashes))


def test_concurrent_inserts_yield_same_set():
    rng = random.Random(2)
    hashes = [rng.getrandbits(64) for _ in range(2000)] * 2
    idx = SimilarityIndex()

    def work(chunk):
        for h in chunk:
            idx.insert(h)

    threads = [threading.Thread(target=work, args=(hashes[i::4],)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(idx) == len(set(hashes))
    assert all(h in idx for h in hashes[:50])
