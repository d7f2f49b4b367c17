"""Evaluation metrics: binary F1, macro multi-class F1, token-level F1 for free-text answers."""

from __future__ import annotations

import string
from collections import Counter
from typing import Hashable, Sequence


class LengthMismatch(ValueError):
    pass


def _check(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def binary_f1(preds: Sequence[bool], golds: Sequence[bool]) -> float:
    """F1 of the positive class. Empty input scores 0.0; no positives anywhere scores 1.0."""
    _check(preds, golds)
    if not golds:
        return 0.0
    tp = sum(1 for p, g in zip(preds, golds) if p and g)
    fp = sum(1 for p, g in zip(preds, golds) if p and not g)
    fn = sum(1 for p, g in zip(preds, golds) if g and not p)
    return _f1(tp, fp, fn)


def per_class_f1(preds: Sequence[Hashable], golds: Sequence[Hashable], classes=None) -> dict:
    _check(preds, golds)
    present = set(preds) | set(golds)
    classes = [c for c in (classes if classes is not None else sorted(present, key=str)) if c in present]
    out = {}
    for c in classes:
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, golds) if g == c and p != c)
        out[c] = _f1(tp, fp, fn)
    return out


def multiclass_f1(preds: Sequence[Hashable], golds: Sequence[Hashable], classes=None) -> float:
    """Unweighted mean of per-class F1 over classes that occur in preds or golds."""
    scores = per_class_f1(preds, golds, classes)
    if not scores:
        return 0.0
    return sum(scores.values()) / len(scores)


_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def squad_f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred), normalize_answer(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    return 2 * common / (len(p) + len(g))
