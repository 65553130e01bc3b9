"""Balanced N-way K-shot episode construction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SamplerError(ValueError):
    pass


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer (Steele, Lea & Flood 2014)."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def split_mix(master_seed: int, index: int) -> int:
    """Seed of episode ``index`` in a stream: splitmix64(master + index * gamma)."""
    return splitmix64((master_seed + index * GOLDEN_GAMMA) & MASK64)


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 2
    # classes with fewer records than this draw augmented views for every item;
    # 0 disables it (reused records are always augmented regardless)
    min_class_size: int = 0

    def __post_init__(self):
        for name in ("n_way", "k_shot", "n_query"):
            if getattr(self, name) < 1:
                raise SamplerError(f"{name} must be positive")
        if self.min_class_size < 0:
            raise SamplerError("min_class_size must be non-negative")


# (record id, augmentation seed); seed None means the raw image
Item = tuple[str, Optional[int]]


@dataclass(frozen=True)
class Episode:
    classes: tuple[str, ...]
    support: tuple[tuple[Item, int], ...]
    query: tuple[tuple[Item, int], ...]
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "classes": list(self.classes),
            "support": [[rid, aug, lab] for (rid, aug), lab in self.support],
            "query": [[rid, aug, lab] for (rid, aug), lab in self.query],
        })

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        d = json.loads(line)
        return cls(
            classes=tuple(d["classes"]),
            support=tuple(((rid, aug), lab) for rid, aug, lab in d["support"]),
            query=tuple(((rid, aug), lab) for rid, aug, lab in d["query"]),
            seed=int(d.get("seed", 0)),
        )


def check_pool(pool_view: Mapping[str, Sequence[str]]) -> None:
    for c, ids in pool_view.items():
        if len(ids) < 2:
            raise SamplerError(
                f"class {c!r} has {len(ids)} record(s); episodes need at least 2 "
                "(one support and one query base record)"
            )


def _fill(bases: Sequence[str], n: int, rng: np.random.Generator) -> list[Item]:
    """Round-robin over ``bases``; reuses after the first pass get fresh augmentation seeds."""
    items: list[Item] = []
    for j in range(n):
        rid = bases[j % len(bases)]
        aug = None if j < len(bases) else int(rng.integers(0, 2**63))
        items.append((rid, aug))
    return items


def allocate_class(ids: Sequence[str], k_shot: int, n_query: int, rng: np.random.Generator,
                   augment_all: bool = False):
    """Pick support and query items for one class.

    With enough records, draw ``k_shot + n_query`` distinct ones. Otherwise
    support takes as many distinct records as possible while leaving at least
    one for query, and both sides are topped up with augmented copies.
    ``augment_all`` gives every item an augmentation seed (minority classes).
    """
    order = [ids[i] for i in rng.permutation(len(ids))]
    need = k_shot + n_query
    if len(order) >= need:
        support, query = [(r, None) for r in order[:k_shot]], [(r, None) for r in order[k_shot:need]]
    else:
        n_sup = min(k_shot, len(order) - 1)
        sup_bases, q_bases = order[:n_sup], order[n_sup:]
        support, query = _fill(sup_bases, k_shot, rng), _fill(q_bases, n_query, rng)
    if augment_all:
        support = [(r, int(rng.integers(0, 2**63)) if a is None else a) for r, a in support]
        query = [(r, int(rng.integers(0, 2**63)) if a is None else a) for r, a in query]
    return support, query


def sample_episode(pool_view: Mapping[str, Sequence[str]], spec: EpisodeSpec, seed: int) -> Episode:
    classes_all = list(pool_view)
    if spec.n_way > len(classes_all):
        raise SamplerError(f"n_way={spec.n_way} exceeds the {len(classes_all)} available classes")
    rng = np.random.default_rng(seed)
    picked = [classes_all[i] for i in rng.choice(len(classes_all), size=spec.n_way, replace=False)]
    support, query = [], []
    for label, c in enumerate(picked):
        ids = pool_view[c]
        if len(ids) < 2:
            raise SamplerError(f"class {c!r} has {len(ids)} record(s); at least 2 are required")
        s_items, q_items = allocate_class(ids, spec.k_shot, spec.n_query, rng,
                                          augment_all=len(ids) < spec.min_class_size)
        support.extend((it, label) for it in s_items)
        query.extend((it, label) for it in q_items)
    return Episode(tuple(picked), tuple(support), tuple(query), seed)


@dataclass(frozen=True)
class EpisodeStream:
    spec: EpisodeSpec
    split: str
    master_seed: int
    count: int

    def seeds(self, start: int = 0) -> list[int]:
        return [split_mix(self.master_seed, i) for i in range(start, self.count)]


def episode_stream(pool_view, stream: EpisodeStream, start: int = 0) -> Iterator[Episode]:
    """Yield episodes ``start..count-1``; episode i depends only on (master_seed, i)."""
    check_pool(pool_view)
    for i in range(start, stream.count):
        yield sample_episode(pool_view, stream.spec, split_mix(stream.master_seed, i))


def class_frequency_audit(episodes, pool_classes) -> dict[str, int]:
    counts = {c: 0 for c in pool_classes}
    for ep in episodes:
        for c in ep.classes:
            counts[c] = counts.get(c, 0) + 1
    return counts


def naive_frequency_classes(class_counts: Mapping[str, int], n_way: int, seed: int) -> tuple[str, ...]:
    """Comparison baseline: classes drawn without replacement, weighted by image count.

    This mimics what an image-uniform sampler does to the class mix and is
    not used for training.
    """
    names = list(class_counts)
    w = np.array([class_counts[c] for c in names], dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(names), size=n_way, replace=False, p=w / w.sum())
    return tuple(names[i] for i in idx)


def naive_episode_stream(class_counts: Mapping[str, int], n_way: int, master_seed: int, count: int):
    for i in range(count):
        yield Episode(naive_frequency_classes(class_counts, n_way, split_mix(master_seed, i)), (), ())

