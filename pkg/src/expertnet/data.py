"""Image ingestion, netpbm codec, augmentation, dataset splits and the
synthetic oriented-grating generator.

Datasets live on disk as root/<class_name>/*.pgm|*.ppm; class labels come
from the sorted subdirectory names, sample order from sorted file paths,
so ingestion is deterministic regardless of filesystem enumeration order.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .tensor import SeededRng

IMAGE_SUFFIXES = (".pgm", ".ppm")
GRATING_CYCLES = 3.0


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w) float32 in [0, 1]
    label: int
    source: str


@dataclass
class Dataset:
    samples: list
    class_names: list
    tags: list = field(default_factory=list)  # '', 'train', 'val' or 'test'
    errors: list = field(default_factory=list)  # (path, message) decode failures

    def __post_init__(self):
        if not self.tags:
            self.tags = [""] * len(self.samples)

    def indices(self, tag):
        return [i for i, t in enumerate(self.tags) if t == tag]

    def subset(self, tag):
        return [self.samples[i] for i in self.indices(tag)]

    def class_counts(self):
        counts = [0] * len(self.class_names)
        for sample in self.samples:
            counts[sample.label] += 1
        return counts


@dataclass
class AugmentSpec:
    rotation: tuple = (-30.0, 30.0)
    copies: int = 4
    seed: int = 0
    translate: bool = False  # optional +-10% shift, off by default

    def __post_init__(self):
        lo, hi = self.rotation
        if lo > hi:
            raise ValueError(f"rotation range [{lo}, {hi}] is inverted")
        if self.copies < 0:
            raise ValueError("copies must be non-negative")


def _read_header_token(data, pos):
    while pos < len(data):
        byte = data[pos]
        if byte in b" \t\r\n":
            pos += 1
        elif byte == ord("#"):
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise FormatError("truncated netpbm header")
    return data[start:pos], pos


def decode_netpbm(data):
    """Decode binary PGM (P5) or PPM (P6) bytes to a (3, h, w) tensor in [0, 1].

    Grayscale images are replicated across the three channels.  Two-byte
    big-endian samples are used when maxval exceeds 255, per the format.
    """
    if len(data) < 2:
        raise FormatError("not a netpbm stream")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_header_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"bad netpbm header token {token!r}")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad netpbm dimensions {width}x{height}")
    if maxval < 1 or maxval > 65535:
        raise FormatError(f"bad netpbm maxval {maxval}")
    if pos >= len(data) or data[pos] not in b" \t\r\n":
        raise FormatError("missing whitespace before netpbm raster")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    sample_dtype = ">u2" if maxval > 255 else np.uint8
    width_bytes = 2 if maxval > 255 else 1
    end = pos + count * width_bytes
    if len(data) < end:
        raise FormatError("truncated netpbm payload")
    raw = np.frombuffer(data[pos:end], dtype=sample_dtype).astype(np.float32)
    raw /= float(maxval)
    if channels == 1:
        plane = raw.reshape(height, width)
        return np.repeat(plane[None], 3, axis=0)
    return raw.reshape(height, width, 3).transpose(2, 0, 1).copy()


def encode_pgm(gray):
    """Encode a (h, w) uint8 array as binary PGM bytes."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise FormatError(f"encode_pgm wants (h, w) uint8, got {gray.dtype} {gray.shape}")
    height, width = gray.shape
    return b"P5\n%d %d\n255\n" % (width, height) + gray.tobytes()


def write_pgm(path, gray):
    Path(path).write_bytes(encode_pgm(gray))


def resize_nearest(image, size):
    """Nearest-neighbor resize of a (c, h, w) tensor to (c, *size)."""
    target_h, target_w = size
    _, h, w = image.shape
    if (h, w) == (target_h, target_w):
        return image
    rows = np.minimum((np.arange(target_h) + 0.5) * (h / target_h), h - 1).astype(int)
    cols = np.minimum((np.arange(target_w) + 0.5) * (w / target_w), w - 1).astype(int)
    return np.ascontiguousarray(image[:, rows[:, None], cols[None, :]])


def ingest_dataset(root, size=None):
    """Load a class-per-directory image tree into a Dataset.

    Class names are the sorted subdirectory names; samples follow sorted
    file paths.  Images are resized to `size` (h, w) when given; otherwise
    all images must share one size.  Undecodable files are skipped and
    listed in the dataset's error report.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} holds no class directories")
    samples = []
    errors = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        loaded = 0
        for path in files:
            try:
                image = decode_netpbm(path.read_bytes())
            except (FormatError, OSError) as exc:
                errors.append((str(path), str(exc)))
                continue
            if size is not None:
                image = resize_nearest(image, size)
            samples.append(Sample(image, label, str(path)))
            loaded += 1
        if loaded == 0:
            raise DataError(f"class directory {class_dir} holds no decodable images")
    if size is None:
        shapes = {s.image.shape for s in samples}
        if len(shapes) > 1:
            raise DataError(f"images disagree on size: {sorted(shapes)}")
    return Dataset(samples, [p.name for p in class_dirs], errors=errors)


def _snap(value):
    # cos/sin of right angles land within one ulp of an integer; snapping
    # makes 90-degree rotations exact grid permutations.
    rounded = round(value)
    return float(rounded) if abs(value - rounded) < 1e-12 else value


def _bilinear_gather(image, src_x, src_y):
    _, h, w = image.shape
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    out = np.zeros((image.shape[0],) + src_x.shape, dtype=np.float64)
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        yy = y0 + dy
        y_ok = (yy >= 0) & (yy < h)
        yc = np.clip(yy, 0, h - 1)
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            xx = x0 + dx
            ok = y_ok & (xx >= 0) & (xx < w)
            xc = np.clip(xx, 0, w - 1)
            out += (wy * wx * ok) * image[:, yc, xc]
    return out.astype(image.dtype)


def rotate_image(image, angle):
    """Rotate a (c, h, w) tensor by `angle` degrees about its center.

    Positive angles turn counter-clockwise on screen; bilinear sampling,
    zero fill outside the source.  Right angles land exactly on the grid.
    """
    cos_a = _snap(math.cos(math.radians(angle)))
    sin_a = _snap(math.sin(math.radians(angle)))
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - cx
    dy = yy - cy
    src_x = cos_a * dx - sin_a * dy + cx
    src_y = sin_a * dx + cos_a * dy + cy
    return _bilinear_gather(image, src_x, src_y)


def shift_image(image, dx, dy):
    """Translate a (c, h, w) tensor by (dx, dy) pixels, bilinear, zero fill."""
    _, h, w = image.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return _bilinear_gather(image, xx - dx, yy - dy)


def rotate_augment(sample, angle):
    """Rotated copy of a sample; the label is preserved."""
    if abs(angle) > 180.0:
        raise ValueError(f"rotation angle {angle} outside [-180, 180]")
    return Sample(rotate_image(sample.image, angle), sample.label,
                  f"{sample.source}+rot{angle:.2f}")


def augment_dataset(dataset, spec):
    """Append `spec.copies` rotated variants of every train-tagged sample.

    Angles are drawn uniformly from the rotation range; the optional
    translate flag adds a +-10% shift.  Augmented copies are tagged train.
    """
    rng = SeededRng(spec.seed)
    samples = list(dataset.samples)
    tags = list(dataset.tags)
    lo, hi = spec.rotation
    for idx in dataset.indices("train"):
        base = dataset.samples[idx]
        for _ in range(spec.copies):
            angle = lo + (hi - lo) * rng.uniform()
            copy = rotate_augment(base, angle)
            if spec.translate:
                _, h, w = copy.image.shape
                dx = (2.0 * rng.uniform() - 1.0) * 0.1 * w
                dy = (2.0 * rng.uniform() - 1.0) * 0.1 * h
                copy = Sample(shift_image(copy.image, dx, dy), copy.label,
                              f"{copy.source}+shift")
            samples.append(copy)
            tags.append("train")
    return Dataset(samples, dataset.class_names, tags, errors=list(dataset.errors))


def _round_half_up(value):
    return int(math.floor(value + 0.5))


def split_dataset(dataset, seed):
    """Tag every sample train/val/test, stratified per class.

    Per class: 20% test; of the remainder 30% val and 70% train, counts
    rounded half-up.  The shuffle is seeded, so identical seeds reproduce
    identical taggings.
    """
    rng = SeededRng(seed)
    tags = [""] * len(dataset.samples)
    for label in range(len(dataset.class_names)):
        members = [i for i, s in enumerate(dataset.samples) if s.label == label]
        order = rng.permutation(len(members))
        shuffled = [members[int(j)] for j in order]
        total = len(shuffled)
        n_test = _round_half_up(total * 0.2)
        remain = total - n_test
        n_val = _round_half_up(remain * 0.3)
        n_train = remain - n_val
        if min(n_test, n_val, n_train) < 1:
            raise DataError(f"class {dataset.class_names[label]!r} has {total} "
                            f"samples, too few to populate train/val/test")
        for pos, idx in enumerate(shuffled):
            if pos < n_test:
                tags[idx] = "test"
            elif pos < n_test + n_val:
                tags[idx] = "val"
            else:
                tags[idx] = "train"
    dataset.tags = tags
    return dataset


def kfold_partition(dataset, n_folds, seed):
    """Stratified k-fold views: list of (train_indices, test_indices).

    Per class the fold sizes differ by at most one; every sample lands in
    exactly one test fold.
    """
    if n_folds < 2:
        raise DataError(f"need at least 2 folds, got {n_folds}")
    counts = dataset.class_counts()
    if min(counts) < n_folds:
        raise DataError(f"smallest class has {min(counts)} samples, "
                        f"cannot make {n_folds} folds")
    rng = SeededRng(seed)
    fold_members = [[] for _ in range(n_folds)]
    for label in range(len(dataset.class_names)):
        members = [i for i, s in enumerate(dataset.samples) if s.label == label]
        order = rng.permutation(len(members))
        shuffled = [members[int(j)] for j in order]
        base, extra = divmod(len(shuffled), n_folds)
        pos = 0
        for fold in range(n_folds):
            take = base + (1 if fold < extra else 0)
            fold_members[fold].extend(shuffled[pos:pos + take])
            pos += take
    views = []
    for fold in range(n_folds):
        test_idx = sorted(fold_members[fold])
        train_idx = sorted(i for other in range(n_folds) if other != fold
                           for i in fold_members[other])
        views.append((train_idx, test_idx))
    return views


def synth_dataset(out_dir, classes, per_class, size, seed, noise=0.05):
    """Write a synthetic oriented-grating dataset as a PGM tree.

    Class c holds gratings at orientation c * (180 / classes) degrees with
    a random phase inside a quarter period and additive Gaussian noise.
    Deterministic per seed: reruns produce byte-identical trees.  Returns
    the number of images written.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be positive, got {per_class}")
    if size < 16:
        raise ValueError(f"size must be at least 16, got {size}")
    if noise < 0:
        raise ValueError(f"noise stddev must be non-negative, got {noise}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(seed)
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    written = 0
    for label in range(classes):
        theta = math.radians(label * 180.0 / classes)
        projection = (xx * math.cos(theta) + yy * math.sin(theta)) / size
        class_dir = out_dir / f"class{label:02d}"
        class_dir.mkdir(exist_ok=True)
        for index in range(per_class):
            phase = rng.uniform() * (0.5 * math.pi)
            img = 0.5 + 0.4 * np.sin(2.0 * math.pi * GRATING_CYCLES * projection
                                     + phase)
            if noise > 0:
                img = img + noise * rng.normal(size * size).reshape(size, size)
            img = np.clip(img, 0.0, 1.0)
            gray = np.floor(img * 255.0 + 0.5).astype(np.uint8)
            write_pgm(class_dir / f"sample{index:04d}.pgm", gray)
            written += 1
    return written


def write_split_manifest(dataset, path):
    """Audit manifest: one '<path>\\t<class>\\t<tag>' line per sample."""
    lines = []
    for sample, tag in zip(dataset.samples, dataset.tags):
        lines.append(f"{sample.source}\t{dataset.class_names[sample.label]}\t{tag}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
