from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: frozenset
    val_ids: frozenset
    test_ids: frozenset


def identity_kfold(identities: Iterable, k: int = 10, seed: int = 0) -> list[FoldSplit]:
    """Identity-disjoint folds: group i is test, group (i+1) mod k validation, the rest train."""
    ids = sorted(set(identities))
    if k < 3:
        raise ValueError("k must be >= 3 so train, validation and test are all non-empty")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} identities cannot fill {k} folds")
    random.Random(seed).shuffle(ids)
    base, extra = divmod(len(ids), k)
    groups, start = [], 0
    for g in range(k):
        size = base + (g < extra)
        groups.append(frozenset(ids[start : start + size]))
        start += size
    folds = []
    for i in range(k):
        test, val = groups[i], groups[(i + 1) % k]
        train = frozenset().union(*(groups[j] for j in range(k) if j not in (i, (i + 1) % k)))
        folds.append(FoldSplit(i, train, val, test))
    return folds
