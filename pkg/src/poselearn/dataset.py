"""Yoga-82 manifest ingestion, hierarchy validation, splits, batch streams.

Manifests are comma-separated lines `relative/path.jpg,l1,l2,l3` matching
the public Yoga-82 distribution. Level-3 ids are the training target;
levels 1/2 are kept for per-level reporting.
"""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import imageprep

logger = logging.getLogger(__name__)

N_L1, N_L2, N_L3 = 6, 20, 82


@dataclass(frozen=True)
class LabeledSample:
    image_path: str
    l1: int
    l2: int
    l3: int


@dataclass
class HierarchyTable:
    l3_to_l2: dict
    l2_to_l1: dict
    names: dict = field(default_factory=dict)

    def check(self, sample: LabeledSample) -> bool:
        """True when the sample's parent chain matches the table."""
        return (self.l3_to_l2.get(sample.l3) == sample.l2
                and self.l2_to_l1.get(sample.l2) == sample.l1)

    def parent(self, l3: int, level: int) -> int:
        """Map a leaf id up to the requested level (1, 2 or 3)."""
        if level == 3:
            return l3
        l2 = self.l3_to_l2[l3]
        if level == 2:
            return l2
        if level == 1:
            return self.l2_to_l1[l2]
        raise ValueError(f"level must be 1, 2 or 3, got {level}")


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int
    val_fraction: float


class ManifestError(ValueError):
    pass


def parse_manifest(path, image_root=None):
    """Parse a label manifest into samples.

    Returns (samples, skipped) where skipped lists manifest entries whose
    image file is missing under image_root (the public dataset has dead
    links; missing files are reported, not fatal). Malformed lines and
    out-of-range labels are fatal.
    """
    samples, skipped = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ManifestError(
                    f"{path}:{lineno}: expected `path,l1,l2,l3`, got {line!r}")
            rel, *labels = parts
            try:
                l1, l2, l3 = (int(v) for v in labels)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: non-integer label in {line!r}") from None
            for name, value, bound in (("l1", l1, N_L1), ("l2", l2, N_L2),
                                       ("l3", l3, N_L3)):
                if not 0 <= value < bound:
                    raise ManifestError(
                        f"{path}:{lineno}: {name}={value} out of range [0, {bound})")
            sample = LabeledSample(rel, l1, l2, l3)
            if image_root is not None and not os.path.isfile(os.path.join(image_root, rel)):
                skipped.append(sample)
            else:
                samples.append(sample)
    if skipped:
        logger.warning("skipped %d manifest entries with missing image files",
                       len(skipped))
    return samples, skipped


def build_hierarchy(samples) -> HierarchyTable:
    """Induce parent maps from observed (l1, l2, l3) triples."""
    if not samples:
        raise ManifestError("cannot build a hierarchy from an empty sample list")
    l3_to_l2, l2_to_l1 = {}, {}
    conflicts = []
    for s in samples:
        if s.l3 in l3_to_l2 and l3_to_l2[s.l3] != s.l2:
            conflicts.append(f"l3={s.l3} claimed by l2={l3_to_l2[s.l3]} and l2={s.l2}")
        l3_to_l2.setdefault(s.l3, s.l2)
        if s.l2 in l2_to_l1 and l2_to_l1[s.l2] != s.l1:
            conflicts.append(f"l2={s.l2} claimed by l1={l2_to_l1[s.l2]} and l1={s.l1}")
        l2_to_l1.setdefault(s.l2, s.l1)
    if conflicts:
        raise ManifestError("inconsistent hierarchy: " + "; ".join(sorted(set(conflicts))))
    return HierarchyTable(l3_to_l2=l3_to_l2, l2_to_l1=l2_to_l1)


def split_train_val(samples, val_fraction=0.1, seed=0) -> DatasetSplit:
    """Stratified train/val split, deterministic under seed.

    Each l3 class contributes ceil(fraction * n) validation items when it
    has at least 2 samples; singleton classes go entirely to train.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    by_class = {}
    for idx, s in enumerate(samples):
        by_class.setdefault(s.l3, []).append(idx)
    rng = np.random.default_rng(seed)
    val_idx = set()
    for l3 in sorted(by_class):
        idxs = by_class[l3]
        if len(idxs) < 2:
            logger.warning("class l3=%d has a single sample; kept in train", l3)
            continue
        n_val = math.ceil(val_fraction * len(idxs))
        chosen = rng.permutation(len(idxs))[:n_val]
        val_idx.update(idxs[i] for i in chosen)
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return DatasetSplit(train=train, val=val, test=[], seed=seed,
                        val_fraction=val_fraction)


def save_split(split: DatasetSplit, path):
    """Persist the split so runs are replayable."""
    with open(path, "w") as fh:
        fh.write(f"# seed={split.seed} val_fraction={split.val_fraction}\n")
        for part in ("train", "val", "test"):
            for s in getattr(split, part):
                fh.write(f"{part},{s.image_path},{s.l1},{s.l2},{s.l3}\n")


def load_image(root, sample: LabeledSample):
    img = Image.open(os.path.join(root, sample.image_path)).convert("RGB")
    return np.asarray(img)


def batch_stream(samples, image_root, batch_size, prep, aug=None,
                 shuffle=False, seed=0, epoch=0):
    """Yield (tensor batch, l3 label batch) over one epoch.

    Shuffle order is a seeded permutation re-derived per epoch. Unreadable
    image files are skipped with a warning, never a crash. Augmentation is
    applied only when `aug` is given (training stream).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng((seed, epoch)).permutation(len(samples))
    aug_rng = np.random.default_rng((seed, epoch, 1)) if aug is not None else None

    xs, ys = [], []
    for i in order:
        s = samples[i]
        try:
            img = load_image(image_root, s)
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable image %s: %s", s.image_path, exc)
            continue
        img = imageprep.preprocess(img, prep)
        if aug is not None:
            img = imageprep.augment(img, aug, aug_rng)
        xs.append(imageprep.to_tensor(img, prep.normalize_mean, prep.normalize_std))
        ys.append(s.l3)
        if len(xs) == batch_size:
            yield np.stack(xs), np.asarray(ys, dtype=np.int64)
            xs, ys = [], []
    if xs:
        yield np.stack(xs), np.asarray(ys, dtype=np.int64)
