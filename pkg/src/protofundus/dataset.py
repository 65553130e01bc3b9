"""Manifest ingestion, top-K class selection and stratified splitting.

Manifests are RFMiD-shaped CSV files: ``ID,path`` followed by one 0/1 column
per class name.
"""
from __future__ import annotations

import csv
import json
import logging
import random
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised for malformed manifests and impossible selections/splits."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    labels: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.path:
            raise DatasetError(f"record {self.id!r} has an empty path")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    class_names: tuple[str, ...]
    class_counts: dict[str, int]
    root: Path = Path(".")

    def resolve(self, record: ImageRecord) -> Path:
        """Image paths are relative to the manifest's own directory."""
        return self.root / record.path

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


@dataclass(frozen=True)
class ClassPool:
    classes: tuple[str, ...]
    eligible: dict[str, tuple[str, ...]]
    excluded_multi_label: int = 0

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "eligible": {c: list(self.eligible[c]) for c in self.classes},
            "excluded_multi_label": self.excluded_multi_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassPool":
        classes = tuple(d["classes"])
        return cls(
            classes=classes,
            eligible={c: tuple(d["eligible"][c]) for c in classes},
            excluded_multi_label=int(d.get("excluded_multi_label", 0)),
        )


@dataclass(frozen=True)
class SplitAssignment:
    split: dict[str, str]
    seed: int
    ratios: tuple[float, float, float]
    # class -> split -> ordered ids; kept so episode pools need not re-derive it
    by_class: dict[str, dict[str, tuple[str, ...]]] = field(default_factory=dict)

    def view(self, split: str) -> dict[str, list[str]]:
        """Per-class id lists for one split, in pool class order."""
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return {c: list(parts[split]) for c, parts in self.by_class.items()}

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "assignments": self.split,
            "by_class": {c: {s: list(v) for s, v in p.items()} for c, p in self.by_class.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        d = json.loads(text)
        by_class = {c: {s: tuple(v) for s, v in p.items()} for c, p in d.get("by_class", {}).items()}
        return cls(
            split=dict(d["assignments"]),
            seed=int(d["seed"]),
            ratios=tuple(d["ratios"]),
            by_class=by_class,
        )


def load_manifest(csv_path) -> DatasetManifest:
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise DatasetError(f"manifest not found: {csv_path}")

    with csv_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{csv_path}: empty manifest") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "ID" or header[1] != "path":
            raise DatasetError(f"{csv_path}: header must start with 'ID,path', got {header[:2]}")
        class_names = tuple(header[2:])
        if len(set(class_names)) != len(class_names) or any(not c for c in class_names):
            raise DatasetError(f"{csv_path}: duplicate or empty class column names")

        records = []
        seen = set()
        counts = {c: 0 for c in class_names}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{csv_path}: row {rownum} has {len(row)} cells, expected {len(header)}")
            rid, path = row[0].strip(), row[1].strip()
            if rid in seen:
                raise DatasetError(f"{csv_path}: duplicate ID {rid!r} at row {rownum}")
            seen.add(rid)
            labels = set()
            for name, cell in zip(class_names, row[2:]):
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise DatasetError(
                        f"{csv_path}: row {rownum}, column {name!r}: label cell must be 0 or 1, got {cell!r}"
                    )
                if cell == "1":
                    labels.add(name)
                    counts[name] += 1
            try:
                records.append(ImageRecord(rid, path, frozenset(labels)))
            except DatasetError as exc:
                raise DatasetError(f"{csv_path}: row {rownum}: {exc}") from None

    return DatasetManifest(tuple(records), class_names, counts, csv_path.parent)


def select_top_k(manifest: DatasetManifest, k: int) -> ClassPool:
    if k < 1:
        raise DatasetError("k must be positive")
    nonempty = [c for c, n in manifest.class_counts.items() if n > 0]
    if k > len(nonempty):
        raise DatasetError(f"requested top {k} classes but only {len(nonempty)} classes have positives")
    classes = tuple(sorted(nonempty, key=lambda c: (-manifest.class_counts[c], c))[:k])
    chosen = set(classes)

    # ids sorted so the pool does not depend on manifest row order
    eligible: dict[str, list[str]] = {c: [] for c in classes}
    excluded = 0
    for rec in manifest.records:
        hits = rec.labels & chosen
        if len(hits) == 1:
            eligible[next(iter(hits))].append(rec.id)
        elif len(hits) > 1:
            excluded += 1
    if excluded:
        log.info("excluded %d multi-label records from the episode pool", excluded)
    return ClassPool(classes, {c: tuple(sorted(ids)) for c, ids in eligible.items()}, excluded)


def largest_remainder(n: int, ratios) -> list[int]:
    """Integer apportionment of ``n`` items that sums exactly to ``n``.

    Ratios are taken as exact decimals so 0.7 * 58 is 40.6, not
    40.599999999999994. Remainder ties go to the earlier split.
    """
    quotas = [n * Fraction(r).limit_denominator(10**9) for r in ratios]
    counts = [int(q) for q in quotas]
    short = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def split_stratified(pool: ClassPool, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitAssignment:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    if seed < 0:
        raise DatasetError("seed must be unsigned")

    split: dict[str, str] = {}
    by_class: dict[str, dict[str, tuple[str, ...]]] = {}
    for ci, c in enumerate(pool.classes):
        ids = list(pool.eligible[c])
        if len(ids) < 3:
            raise DatasetError(f"class {c!r} has {len(ids)} records; at least 3 are needed to split")
        counts = largest_remainder(len(ids), ratios)
        if min(counts) < 1:
            raise DatasetError(f"class {c!r} with {len(ids)} records leaves an empty split at ratios {ratios}")
        # per-class stream so adding a class never reshuffles another
        random.Random(f"{seed}:{ci}:{c}").shuffle(ids)
        parts = {}
        start = 0
        for name, n in zip(SPLITS, counts):
            chunk = ids[start:start + n]
            start += n
            parts[name] = tuple(chunk)
            for rid in chunk:
                split[rid] = name
        by_class[c] = parts
    return SplitAssignment(split, seed, ratios, by_class)
