"""Item -> tensor plumbing shared by training, evaluation and the CLI.

An episode item is ``(record_id, aug_seed)``. ``ImageStore`` turns items
into flattened encoder inputs; ``EmbeddingStore`` serves precomputed
embeddings for encoders that live outside this package.
"""
from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetManifest
from .encoder import DOWNSAMPLE, EncoderParams, embed, prepare_input
from .preprocess import AugSpec, ClaheConfig, augment, clahe, load_image, resize_bilinear


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    work_size: int = 224
    clahe_enabled: bool = True
    clahe: ClaheConfig = ClaheConfig()
    downsample: int = DOWNSAMPLE


class ImageStore:
    """Loads, enhances, augments and downsamples images on demand.

    Order per item: load -> resize to ``work_size`` -> CLAHE (if enabled) ->
    augmentation (only for items carrying a seed) -> downsample -> [0, 1].
    The downsampled uint8 raster of every item is cached (bounded, LRU), so
    a fixed validation stream pays for augmentation once.
    """

    def __init__(self, manifest: DatasetManifest, prep: PreprocessConfig = PreprocessConfig(),
                 aug: AugSpec = AugSpec(), max_cached: int = 50_000, max_base_cached: int = 512):
        self.manifest = manifest
        self.records = manifest.by_id()
        self.prep = prep
        self.aug = aug
        self.max_cached = max_cached
        self.max_base_cached = max_base_cached
        self._base: OrderedDict = OrderedDict()
        self._small: OrderedDict = OrderedDict()

    def base_image(self, rid: str) -> np.ndarray:
        if rid in self._base:
            self._base.move_to_end(rid)
        else:
            try:
                rec = self.records[rid]
            except KeyError:
                raise StoreError(f"unknown record id {rid!r}") from None
            img = load_image(self.manifest.resolve(rec))
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=2)
            s = self.prep.work_size
            img = resize_bilinear(img, s, s)
            if self.prep.clahe_enabled:
                img = clahe(img, self.prep.clahe)
            self._base[rid] = img
            if len(self._base) > self.max_base_cached:
                self._base.popitem(last=False)
        return self._base[rid]

    def small_image(self, item) -> np.ndarray:
        rid, aug_seed = item
        key = (rid, aug_seed)
        hit = self._small.get(key)
        if hit is not None:
            self._small.move_to_end(key)
            return hit
        img = self.base_image(rid)
        if aug_seed is not None:
            img = augment(img, self.aug, int(aug_seed))
        d = self.prep.downsample
        small = resize_bilinear(img, d, d)
        self._small[key] = small
        if len(self._small) > self.max_cached:
            self._small.popitem(last=False)
        return small

    def vector(self, item) -> np.ndarray:
        return prepare_input(self.small_image(item), self.prep.downsample)

    def batch(self, items: Sequence) -> np.ndarray:
        return np.stack([self.vector(it) for it in items])

    def embedder(self, params: EncoderParams):
        """Inference-mode embedding function over items."""
        return lambda items: embed(params, self.batch(items), "infer")[0]


class EmbeddingStore:
    """Externally computed embeddings keyed by record id.

    Augmentation seeds are ignored: an augmented copy reuses its base
    record's embedding.
    """

    def __init__(self, vectors: dict[str, np.ndarray]):
        self.vectors = vectors
        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) > 1:
            raise StoreError(f"embeddings have mixed dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def batch(self, items: Sequence) -> np.ndarray:
        try:
            return np.stack([self.vectors[rid] for rid, _ in items])
        except KeyError as exc:
            raise StoreError(f"no embedding for record id {exc.args[0]!r}") from None

    def embedder(self):
        return self.batch

    @classmethod
    def from_csv(cls, path, known_ids=None) -> "EmbeddingStore":
        path = Path(path)
        if not path.is_file():
            raise StoreError(f"embedding file not found: {path}")
        vectors: dict[str, np.ndarray] = {}
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            if not header or header[0] != "id" or len(header) < 2:
                raise StoreError(f"{path}: header must be 'id,e0,...,e<m-1>'")
            expected = [f"e{i}" for i in range(len(header) - 1)]
            if header[1:] != expected:
                raise StoreError(f"{path}: embedding columns must be named e0..e{len(header) - 2}")
            dim = len(header) - 1
            for rownum, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) - 1 != dim:
                    raise StoreError(f"{path}: row {rownum} has {len(row) - 1} values, expected {dim}")
                rid = row[0].strip()
                if rid in vectors:
                    raise StoreError(f"{path}: duplicate id {rid!r} at row {rownum}")
                try:
                    vec = np.array([float(v) for v in row[1:]])
                except ValueError:
                    raise StoreError(f"{path}: row {rownum} has a non-numeric value") from None
                if not np.isfinite(vec).all():
                    raise StoreError(f"{path}: row {rownum} has a non-finite value")
                vectors[rid] = vec
        if known_ids is not None:
            unknown = sorted(set(vectors) - set(known_ids))
            if unknown:
                shown = ", ".join(unknown[:10]) + (" ..." if len(unknown) > 10 else "")
                raise StoreError(f"{path}: {len(unknown)} id(s) not in the manifest: {shown}")
        return cls(vectors)
