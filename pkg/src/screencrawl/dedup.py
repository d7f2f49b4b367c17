"""Perceptual hashing, Hamming similarity and a BK-tree radius index.

The hash is pinned bit-exactly so other implementations can reproduce it:

1. luma = 0.299 R + 0.587 G + 0.114 B, in float64 (no rounding to uint8)
2. area-average resize to 32x32 (each output cell is the exact overlap-weighted
   mean of the source pixels it covers)
3. orthonormal 2-D type-II DCT; ``D[u, v]`` with ``u`` the vertical frequency
4. coefficients ``D[0:8, 0:8]`` in row-major order with ``D[0, 0]`` removed and
   ``D[8, 0]`` appended, giving 64 values
5. values rounded to 6 decimals, then bit = value > median (mean of the two
   middle values)
6. the first value is the most significant bit of the 64-bit integer
"""

from __future__ import annotations

import io
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

HASH_BITS = 64
SIMILARITY_THRESHOLD = 5
RESIZE = 32
_MASK = (1 << HASH_BITS) - 1


class EmptyImage(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PerceptualHash:
    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits <= _MASK:
            raise ValueError(f"hash out of 64-bit range: {self.bits}")

    def __str__(self) -> str:
        return f"{self.bits:016x}"

    @classmethod
    def from_hex(cls, s: str) -> PerceptualHash:
        return cls(int(s, 16))


@dataclass(frozen=True, order=True)
class ScreenSignature:
    phash: PerceptualHash
    vh_hash: int

    def key(self) -> str:
        return f"{self.phash}:{self.vh_hash:016x}"

    @classmethod
    def from_key(cls, key: str) -> ScreenSignature:
        p, v = key.split(":")
        return cls(PerceptualHash.from_hex(p), int(v, 16))

    def __str__(self) -> str:
        return self.key()


def to_luma(image) -> np.ndarray:
    """Grayscale float64 array from a PIL image, a path, PNG bytes or an array."""
    if isinstance(image, (str, Path)):
        with Image.open(image) as im:
            return to_luma(im)
    if isinstance(image, bytes):
        with Image.open(io.BytesIO(image)) as im:
            return to_luma(im)
    if isinstance(image, Image.Image):
        if image.mode not in ("L", "RGB"):
            image = image.convert("RGB")
        image = np.asarray(image)
    arr = np.asarray(image)
    if arr.ndim == 2:
        luma = arr.astype(np.float64)
    elif arr.ndim == 3 and arr.shape[2] in (3, 4):
        rgb = arr[..., :3].astype(np.float64)
        luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    else:
        raise ValueError(f"unsupported image shape {arr.shape}")
    if luma.size == 0:
        raise EmptyImage("image has no pixels")
    return luma


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the overlap of output cell i with each input pixel, normalized."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        first, last = int(np.floor(lo)), min(int(np.ceil(hi)), n_in)
        for j in range(first, last):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


_weight_cache: dict[tuple[int, int], np.ndarray] = {}


def area_resize(luma: np.ndarray, size: int = RESIZE) -> np.ndarray:
    h, w = luma.shape
    key_r, key_c = (h, size), (w, size)
    if key_r not in _weight_cache:
        _weight_cache[key_r] = _area_weights(h, size)
    if key_c not in _weight_cache:
        _weight_cache[key_c] = _area_weights(w, size)
    return _weight_cache[key_r] @ luma @ _weight_cache[key_c].T


def dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0, :] = np.sqrt(1.0 / n)
    return m


_DCT32 = dct_matrix(RESIZE)


def hash_values(luma: np.ndarray) -> np.ndarray:
    """The 64 DCT coefficients that get thresholded, in bit order."""
    small = area_resize(luma)
    d = _DCT32 @ small @ _DCT32.T
    block = d[:8, :8].reshape(-1)[1:]
    return np.append(block, d[8, 0])


def bits_from_values(values) -> int:
    vals = np.round(np.asarray(values, dtype=np.float64), 6)
    med = float(np.median(vals))
    out = 0
    for v in vals:
        out = (out << 1) | int(v > med)
    return out


def phash(image) -> PerceptualHash:
    luma = to_luma(image)
    if luma.shape[0] == 0 or luma.shape[1] == 0:
        raise EmptyImage("image has no pixels")
    return PerceptualHash(bits_from_values(hash_values(luma)))


def _bits(h: PerceptualHash | int) -> int:
    return h.bits if isinstance(h, PerceptualHash) else h


def hamming(a: PerceptualHash | int, b: PerceptualHash | int) -> int:
    return (_bits(a) ^ _bits(b)).bit_count()


def is_similar(a, b, threshold: int = SIMILARITY_THRESHOLD) -> bool:
    if not 0 <= threshold <= HASH_BITS:
        raise ValueError("threshold must lie in [0, 64]")
    return hamming(a, b) <= threshold


class _BkNode:
    __slots__ = ("key", "children")

    def __init__(self, key: int):
        self.key = key
        self.children: dict[int, _BkNode] = {}


class SimilarityIndex:
    """BK-tree over Hamming distance holding a set of distinct hashes.

    Every method takes an internal lock, so concurrent readers and writers are
    serialized; results never depend on interleaving because the index is a set.
    """

    def __init__(self, hashes=()):
        self._root: _BkNode | None = None
        self._size = 0
        self._lock = threading.Lock()
        for h in hashes:
            self.insert(h)

    def __len__(self) -> int:
        return self._size

    def insert(self, h) -> bool:
        """True when inserted, False when already present."""
        key = _bits(h)
        with self._lock:
            if self._root is None:
                self._root = _BkNode(key)
                self._size = 1
                return True
            node = self._root
            while True:
                d = (node.key ^ key).bit_count()
                if d == 0:
                    return False
                child = node.children.get(d)
                if child is None:
                    node.children[d] = _BkNode(key)
                    self._size += 1
                    return True
                node = child

    def __contains__(self, h) -> bool:
        return bool(self._search(_bits(h), 0))

    def _search(self, key: int, radius: int) -> list[tuple[int, int]]:
        found = []
        with self._lock:
            if self._root is None:
                return found
            stack = [self._root]
            while stack:
                node = stack.pop()
                d = (node.key ^ key).bit_count()
                if d <= radius:
                    found.append((node.key, d))
                lo, hi = d - radius, d + radius
                for dist, child in node.children.items():
                    if lo <= dist <= hi:
                        stack.append(child)
        return found

    def query(self, h, radius: int) -> list[tuple[int, int]]:
        """(hash, distance) pairs within ``radius``, the query itself included."""
        return self._search(_bits(h), radius)

    def count_within(self, h, radius: int) -> int:
        """Stored hashes within ``radius`` of ``h``, not counting ``h`` itself."""
        return sum(1 for _, d in self._search(_bits(h), radius) if d > 0)


def index_insert(idx: SimilarityIndex, h) -> str:
    return "inserted" if idx.insert(h) else "already_present"


def index_count_within(idx: SimilarityIndex, h, r: int) -> int:
    return idx.count_within(h, r)
