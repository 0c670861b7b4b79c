"""Datasets, n-shot sampling, source-target pairing and batch streaming.

Also home to the synthetic domain-shift benchmark, CT intensity windowing,
and the on-disk formats (PNG + manifest datasets, raw HU arrays).
"""
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, NamedTuple, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from siamxd.model import ConfigError
from siamxd.seeding import derive_seed

SOURCE, TARGET = "source", "target"
TRAIN, TEST = "train", "test"
DEFAULT_GROUP_SIZE = 600


class DataError(ValueError):
    """Dataset contents cannot satisfy a sampling or format requirement."""


@dataclass(frozen=True)
class Sample:
    pixels: np.ndarray
    label: int
    domain: str
    id: str
    patient: Optional[str] = None


@dataclass
class Dataset:
    samples: tuple
    split: str = TRAIN

    def __post_init__(self):
        self.samples = tuple(self.samples)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[:5]
            raise DataError(f"duplicate sample ids, e.g. {dup}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @cached_property
    def images(self):
        """All pixels stacked as a float64 array [N, H, W]."""
        if not self.samples:
            return np.zeros((0, 0, 0))
        return np.stack([s.pixels for s in self.samples]).astype(np.float64)

    @cached_property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def subset(self, indices, split=None):
        return Dataset([self.samples[i] for i in indices], split or self.split)


# --- n-shot sampling and pairing ------------------------------------------------

def select_n_shot(target_train, n, seed):
    """Draw ``n`` positive and ``n`` negative target samples without replacement.

    Returned order: the n positives, then the n negatives.
    """
    if n < 1:
        raise DataError(f"n must be a positive int, got {n}")
    labels = np.array([s.label for s in target_train])
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if len(pos) < n or len(neg) < n:
        raise DataError(f"{n}-shot selection needs {n} per label; pool has {len(pos)} positive, {len(neg)} negative")
    rng = np.random.default_rng(seed)
    chosen = np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)])
    return [target_train[int(i)] for i in chosen]


def select_source_group(source, seed, group_size=DEFAULT_GROUP_SIZE):
    """Random class-balanced group of source samples (half per label when possible)."""
    if group_size < 2:
        raise DataError(f"source group size must be >= 2, got {group_size}")
    if len(source) < group_size:
        raise DataError(f"source pool has {len(source)} samples, need {group_size}")
    labels = np.array([s.label for s in source])
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    n_pos = group_size // 2
    n_neg = group_size - n_pos
    if len(pos) < n_pos or len(neg) < n_neg:
        raise DataError(f"source pool has {len(pos)}/{len(neg)} pos/neg, need {n_pos}/{n_neg}")
    rng = np.random.default_rng(seed)
    idx = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    idx = idx[rng.permutation(idx.size)]
    return [source[int(i)] for i in idx]


@dataclass
class PairStream:
    """Shuffled cross product of a source group with the target shots.

    Pairs are stored as index arrays into ``source`` and ``target``; target
    samples are reused across pairs.
    """

    source: list
    target: list
    source_idx: np.ndarray
    target_idx: np.ndarray
    seed: int = 0

    def __len__(self):
        return int(self.source_idx.size)

    @property
    def pairs(self):
        return [(self.source[i], self.target[j]) for i, j in zip(self.source_idx, self.target_idx)]

    @cached_property
    def source_images(self):
        return np.stack([s.pixels for s in self.source]).astype(np.float64)

    @cached_property
    def target_images(self):
        return np.stack([s.pixels for s in self.target]).astype(np.float64)

    @cached_property
    def source_labels(self):
        return np.array([s.label for s in self.source], dtype=np.int64)

    @cached_property
    def target_labels(self):
        return np.array([s.label for s in self.target], dtype=np.int64)


def build_pairs(source_group, shots, seed, group_size=DEFAULT_GROUP_SIZE):
    """Every (source, target-shot) combination, order shuffled by ``seed``."""
    if not source_group or not shots:
        raise DataError(f"cannot pair {len(source_group)} source samples with {len(shots)} target shots")
    if group_size is not None and len(source_group) != group_size:
        raise DataError(f"source group has {len(source_group)} samples, expected {group_size}")
    m, k = len(source_group), len(shots)
    si, ti = np.meshgrid(np.arange(m), np.arange(k), indexing="ij")
    order = np.random.default_rng(seed).permutation(m * k)
    return PairStream(list(source_group), list(shots), si.reshape(-1)[order], ti.reshape(-1)[order], seed)


class StaggeredBatch(NamedTuple):
    source: np.ndarray          # [B, H, W]
    target: Optional[np.ndarray]
    source_labels: np.ndarray   # [B]
    target_labels: Optional[np.ndarray]
    source_ids: list
    target_ids: Optional[list]

    def interleaved_ids(self):
        """Sample ids in staggered order (s1, t1, s2, t2, ...)."""
        out = []
        for s, t in zip(self.source_ids, self.target_ids or [None] * len(self.source_ids)):
            out.append(s)
            if t is not None:
                out.append(t)
        return out


def _has_both(labels):
    return bool(labels.size) and labels.min() == 0 and labels.max() == 1


def _batch_bounds(n, batch_size, ok):
    """Cut [0, n) into windows of ``batch_size``; merge tail and invalid windows."""
    if batch_size < 4 or batch_size % 2:
        raise DataError(f"batch_size must be even and >= 4, got {batch_size}")
    if n == 0:
        raise DataError("empty stream")
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and n - bounds[-2] < batch_size:
        del bounds[-2]
    i = 0
    while i < len(bounds) - 1:
        if ok(bounds[i], bounds[i + 1]):
            i += 1
        elif i + 2 < len(bounds):
            del bounds[i + 1]
        elif i > 0:
            del bounds[i]
            i -= 1
        else:
            raise DataError("stream cannot provide both labels from every domain in any batch")
    return bounds


def staggered_batches(stream, batch_size):
    """Split a pair stream into batches, each holding both labels per domain.

    A trailing partial batch is merged into the one before it, as is any
    window that would miss a label in either domain.
    """
    ys_all = stream.source_labels[stream.source_idx]
    yt_all = stream.target_labels[stream.target_idx]

    def ok(a, b):
        return _has_both(ys_all[a:b]) and _has_both(yt_all[a:b])

    bounds = _batch_bounds(len(stream), batch_size, ok)
    return _iter_batches(stream, bounds)


def _iter_batches(stream, bounds):
    src_ids = [s.id for s in stream.source]
    tgt_ids = [s.id for s in stream.target]
    for a, b in zip(bounds[:-1], bounds[1:]):
        si, ti = stream.source_idx[a:b], stream.target_idx[a:b]
        yield StaggeredBatch(
            stream.source_images[si], stream.target_images[ti],
            stream.source_labels[si], stream.target_labels[ti],
            [src_ids[i] for i in si], [tgt_ids[i] for i in ti],
        )


def source_only_batches(source_group, repeats, batch_size, seed):
    """Batches over ``repeats`` shuffled copies of the source group, no target data.

    Gives the source-only baseline the same number of source presentations
    as an n-shot pair stream with ``repeats == 2n``.
    """
    if repeats < 1 or not source_group:
        raise DataError("source-only stream needs a nonempty group and repeats >= 1")
    images = np.stack([s.pixels for s in source_group]).astype(np.float64)
    labels = np.array([s.label for s in source_group], dtype=np.int64)
    ids = [s.id for s in source_group]
    idx = np.tile(np.arange(len(source_group)), repeats)
    idx = idx[np.random.default_rng(seed).permutation(idx.size)]
    y = labels[idx]
    bounds = _batch_bounds(idx.size, batch_size, lambda a, b: _has_both(y[a:b]))
    for a, b in zip(bounds[:-1], bounds[1:]):
        sel = idx[a:b]
        yield StaggeredBatch(images[sel], None, labels[sel], None, [ids[i] for i in sel], None)


# --- synthetic domain-shift benchmark ------------------------------------------------

def _grid(size, rng, jitter):
    c = (size - 1) / 2.0 + rng.uniform(-jitter, jitter, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.hypot(yy - c[0], xx - c[1])


def blob_image(size, rng):
    """Filled Gaussian spot with random position, width and brightness."""
    r = _grid(size, rng, size / 8)
    sigma = rng.uniform(0.14, 0.2) * size
    return rng.uniform(0.7, 1.0) * np.exp(-r ** 2 / (2 * sigma ** 2))


def ring_image(size, rng):
    """Gaussian annulus with random position, radius and brightness."""
    r = _grid(size, rng, size / 8)
    radius = rng.uniform(0.22, 0.3) * size
    width = rng.uniform(0.05, 0.07) * size
    return rng.uniform(0.7, 1.0) * np.exp(-(r - radius) ** 2 / (2 * width ** 2))


GENERATORS = {"blob": blob_image, "ring": ring_image}


@dataclass(frozen=True)
class ShiftSpec:
    """Two class-conditional generators plus the source->target transform.

    Target images are rotated by ``rotation_deg``, then mapped through
    ``gain * x + offset`` and perturbed with Gaussian noise of std
    ``noise_sigma`` before clipping to [0, 1].
    """

    image_size: int = 16
    positive: str = "ring"
    negative: str = "blob"
    gain: float = 0.6
    offset: float = 0.2
    rotation_deg: float = 25.0
    noise_sigma: float = 0.05
    source_noise_sigma: float = 0.02
    positive_haze: float = 0.1
    slices_per_patient: int = 3

    @classmethod
    def identity(cls, **kw):
        return cls(gain=1.0, offset=0.0, rotation_deg=0.0, noise_sigma=kw.pop("noise_sigma", 0.02), **kw)

    def validate(self):
        if self.image_size < 4:
            raise ConfigError(f"image_size must be >= 4, got {self.image_size}")
        for name in (self.positive, self.negative):
            if name not in GENERATORS:
                raise ConfigError(f"unknown generator {name!r}; have {sorted(GENERATORS)}")
        if self.noise_sigma < 0 or self.source_noise_sigma < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.slices_per_patient < 1:
            raise ConfigError("slices_per_patient must be >= 1")


def _render(spec, label, rng, target):
    gen = GENERATORS[spec.positive if label == 1 else spec.negative]
    img = gen(spec.image_size, rng)
    if label == 1 and spec.positive_haze:
        img = img + spec.positive_haze * rng.uniform(0.5, 1.5)
    if target:
        if spec.rotation_deg:
            img = ndimage.rotate(img, spec.rotation_deg, reshape=False, order=1, mode="constant")
        img = spec.gain * img + spec.offset + rng.normal(0.0, spec.noise_sigma, img.shape)
    else:
        img = img + rng.normal(0.0, spec.source_noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def _make_split(spec, count, seed, prefix, domain, split, patients):
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    labels = labels[rng.permutation(count)]
    samples = []
    for i, y in enumerate(labels):
        patient = f"{prefix}p{i // spec.slices_per_patient:05d}" if patients else None
        samples.append(Sample(_render(spec, int(y), rng, domain == TARGET), int(y), domain, f"{prefix}{i:05d}", patient))
    return Dataset(samples, split)


def synth_domain_shift(spec=None, n_source=6000, n_target_train=60, n_target_test=600, seed=0):
    """Generate (source, target train, target test) datasets.

    Target train and test come from disjoint synthetic patients; each split
    uses its own derived seed.
    """
    spec = spec or ShiftSpec()
    spec.validate()
    if min(n_source, n_target_train, n_target_test) < 2:
        raise ConfigError("every split needs at least 2 samples")
    return (
        _make_split(spec, n_source, derive_seed(seed, "synth", "source"), "src", SOURCE, TRAIN, False),
        _make_split(spec, n_target_train, derive_seed(seed, "synth", "target-train"), "ttr", TARGET, TRAIN, True),
        _make_split(spec, n_target_test, derive_seed(seed, "synth", "target-test"), "tte", TARGET, TEST, True),
    )


def split_by_patient(dataset, test_fraction, seed):
    """Partition into (train, test) so no patient appears in both.

    Samples without a patient id are treated as their own patient.
    """
    groups = {}
    for i, s in enumerate(dataset):
        groups.setdefault(s.patient or s.id, []).append(i)
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    n_test = int(round(test_fraction * len(keys)))
    test_keys = {keys[i] for i in order[:n_test]}
    train_idx = [i for k in keys if k not in test_keys for i in groups[k]]
    test_idx = [i for k in keys if k in test_keys for i in groups[k]]
    return dataset.subset(sorted(train_idx), TRAIN), dataset.subset(sorted(test_idx), TEST)


# --- CT preprocessing ------------------------------------------------------------------

HU_WINDOW = (-600.0, 1500.0)
CT_SIZE = (512, 512)


def resize_bilinear(img, size):
    """Bilinear resize with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = size

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(oh, h)
    x0, x1, fx = coords(ow, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def preprocess_ct(raw, window=HU_WINDOW, size=CT_SIZE):
    """Clamp HU values to ``window``, rescale to [0, 1], resize to ``size``."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ConfigError(f"window low {lo} must be below high {hi}")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise DataError(f"expected a nonempty 2-D HU image, got shape {raw.shape}")
    scaled = (np.clip(raw, lo, hi) - lo) / (hi - lo)
    if scaled.shape != tuple(size):
        scaled = np.clip(resize_bilinear(scaled, size), 0.0, 1.0)
    return scaled


# raw HU format: one ASCII header line "HURAW 1 <H> <W> <dtype>\n" where dtype
# is a little-endian numpy code (i2, i4, f4, f8), followed by H*W row-major values.
_RAW_DTYPES = ("i2", "i4", "f4", "f8")


def write_raw_hu(path, image, dtype="i2"):
    if dtype not in _RAW_DTYPES:
        raise DataError(f"raw dtype must be one of {_RAW_DTYPES}")
    image = np.asarray(image)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"HURAW 1 {h} {w} {dtype}\n".encode("ascii"))
        fh.write(image.astype("<" + dtype).tobytes())


def read_raw_hu(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        body = fh.read()
    if len(header) != 5 or header[0] != "HURAW" or header[1] != "1" or header[4] not in _RAW_DTYPES:
        raise DataError(f"{path}: bad raw HU header {header}")
    h, w = int(header[2]), int(header[3])
    arr = np.frombuffer(body, dtype="<" + header[4])
    if arr.size != h * w:
        raise DataError(f"{path}: expected {h * w} values, found {arr.size}")
    return arr.reshape(h, w).astype(np.float64)


# --- PNG + manifest datasets -------------------------------------------------------------
#
# <dir>/manifest.tsv, one tab-separated record per line after a header:
#   id  path  label  domain  patient  split
# ``path`` is relative to <dir>; ``patient`` is "-" when absent.
# Images are 16-bit grayscale PNGs; pixel value v maps to v / 65535.

MANIFEST = "manifest.tsv"
MANIFEST_FIELDS = ("id", "path", "label", "domain", "patient", "split")


def write_dataset(dataset, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    lines = ["\t".join(MANIFEST_FIELDS)]
    for s in dataset:
        rel = f"images/{s.id}.png"
        q = np.round(np.clip(s.pixels, 0.0, 1.0) * 65535).astype(np.uint16)
        Image.fromarray(q).save(os.path.join(directory, rel), format="PNG")
        lines.append("\t".join([s.id, rel, str(s.label), s.domain, s.patient or "-", dataset.split]))
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_png(path):
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


def read_dataset(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST} in {directory}")
    samples, splits = [], set()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != MANIFEST_FIELDS:
            raise DataError(f"{path}: header {header} != {list(MANIFEST_FIELDS)}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            rec = line.rstrip("\n").split("\t")
            if len(rec) != len(MANIFEST_FIELDS):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
            sid, rel, label, domain, patient, split = rec
            if label not in ("0", "1") or domain not in (SOURCE, TARGET):
                raise DataError(f"{path}:{lineno}: bad label {label!r} or domain {domain!r}")
            splits.add(split)
            pixels = load_png(os.path.join(directory, rel))
            samples.append(Sample(pixels, int(label), domain, sid, None if patient == "-" else patient))
    if len(splits) > 1:
        raise DataError(f"{path}: mixed splits {sorted(splits)}")
    return Dataset(samples, splits.pop() if splits else TRAIN)
