"""Dataset model, fold splits, and deterministic episode sampling."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_LABEL = 255


class DataError(RuntimeError):
    """Raised for malformed datasets, split configs, or sampling preconditions."""


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8, 0 = background, 255 = ignore
    class_set: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.pixels.shape[:2] != self.mask.shape:
            raise DataError(
                f"sample {self.id}: mask shape {self.mask.shape} does not match "
                f"image shape {self.pixels.shape[:2]}"
            )
        present = frozenset(int(v) for v in np.unique(self.mask)) - {0, IGNORE_LABEL}
        self.class_set = present


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_classes: tuple
    test_classes: tuple

    def __post_init__(self):
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise DataError(f"fold {self.fold_index}: train/test overlap {sorted(overlap)}")


@dataclass
class Episode:
    support: list  # list of (ImageSample, binary mask) pairs
    query: tuple  # (ImageSample, binary mask)
    class_id: int
    shots: int


class SegDataset:
    """Read-only collection of ImageSamples with a per-class inverted index."""

    def __init__(self, samples, folds, universe):
        self.samples = {s.id: s for s in samples}
        self.folds = folds
        self.universe = frozenset(universe)
        self.class_index = {c: [] for c in sorted(self.universe)}
        for s in samples:
            for c in sorted(s.class_set):
                self.class_index[c].append(s.id)

    def __len__(self):
        return len(self.samples)

    def ids(self):
        return sorted(self.samples)


def _read_split_config(path):
    with open(path) as f:
        cfg = json.load(f)
    num_folds = int(cfg["num_folds"])
    fold_tests = [sorted(int(c) for c in fold["test_classes"]) for fold in cfg["folds"]]
    if len(fold_tests) != num_folds:
        raise DataError(f"split config declares {num_folds} folds but lists {len(fold_tests)}")
    universe = sorted(set().union(*[set(t) for t in fold_tests]))
    folds = []
    for i, test in enumerate(fold_tests):
        train = tuple(c for c in universe if c not in test)
        folds.append(FoldSplit(fold_index=i, train_classes=train, test_classes=tuple(test)))
    return folds, universe


def load_dataset(root, split_config):
    """Load the on-disk layout root/images/<id>.png|jpg + root/masks/<id>.png."""
    root = Path(root)
    folds, universe = _read_split_config(split_config)
    img_dir, mask_dir = root / "images", root / "masks"
    image_paths = sorted(
        p for p in img_dir.glob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    ) if img_dir.is_dir() else []
    if not image_paths:
        raise DataError(f"no samples found under {root}")
    allowed = set(universe) | {0, IGNORE_LABEL}
    samples = []
    for p in image_paths:
        sid = p.stem
        mask_path = mask_dir / f"{sid}.png"
        if not mask_path.exists():
            raise DataError(f"missing mask for image {sid}")
        pixels = np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)
        mask = np.asarray(Image.open(mask_path), dtype=np.uint8)
        bad = set(int(v) for v in np.unique(mask)) - allowed
        if bad:
            raise DataError(f"sample {sid}: mask values outside class universe: {sorted(bad)}")
        samples.append(ImageSample(id=sid, pixels=pixels, mask=mask))
    return SegDataset(samples, folds, universe)


def binarize_mask(mask, class_id):
    """Binary episode mask: 1 where class_id, 0 elsewhere, ignore preserved."""
    out = np.zeros_like(mask)
    out[mask == class_id] = 1
    out[mask == IGNORE_LABEL] = IGNORE_LABEL
    return out


def _check_class_counts(dataset, classes, shots):
    for c in classes:
        n = len(dataset.class_index.get(c, []))
        if n < shots + 1:
            raise DataError(
                f"class {c} has {n} samples, needs at least {shots + 1} for {shots}-shot episodes"
            )


def draw_episode(dataset, classes, shots, rng):
    """One episode: class uniform over `classes`, then images uniform without replacement."""
    class_id = int(classes[rng.integers(len(classes))])
    ids = dataset.class_index[class_id]
    picked = rng.choice(len(ids), size=shots + 1, replace=False)
    support_ids = [ids[i] for i in picked[:-1]]
    query_id = ids[picked[-1]]
    support = [
        (dataset.samples[i], binarize_mask(dataset.samples[i].mask, class_id))
        for i in support_ids
    ]
    q = dataset.samples[query_id]
    return Episode(support=support, query=(q, binarize_mask(q.mask, class_id)),
                   class_id=class_id, shots=shots)


def sample_episodes(dataset, fold, shots, count, seed, use_test_classes=False):
    """Deterministic episode sequence; identical (seed, dataset, fold, shots) inputs repeat it."""
    classes = list(fold.test_classes if use_test_classes else fold.train_classes)
    _check_class_counts(dataset, classes, shots)
    rng = np.random.default_rng(seed)
    return [draw_episode(dataset, classes, shots, rng) for _ in range(count)]


def configure_determinism():
    """Single-threaded deterministic numerics when LATENTPROTO_DETERMINISTIC=1."""
    if os.environ.get("LATENTPROTO_DETERMINISTIC") == "1":
        import torch

        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
