"""Synthetic classification tasks and the adversary's surrogate data.

Every task draws samples in a natural coordinate space, then maps them to
``[0, 1]`` with a fixed affine squash. Class regions (used to certify that
out-of-distribution surrogates avoid the victim's support) are balls of
radius ``noise * (sqrt(d) + 3 / sqrt(2))`` around the class mean or class
manifold: the chi-distributed noise norm plus three of its standard deviations.
"""
import csv
import io
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import containers
from .errors import ConfigError, DatasetFormatError

KINDS = ("gaussian_blobs", "ring_patterns", "textured_patches")
RELATIONS = ("in_distribution", "near_distribution", "out_of_distribution")


@dataclass
class TaskSpec:
    kind: str = "textured_patches"
    num_classes: int = 10
    input_shape: tuple = (1, 8, 8)
    n_train: int = 2000
    n_test: int = 1000
    seed: int = 0
    noise: float = 0.8
    separation: float = 6.0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.noise <= 0:
            raise ConfigError("noise must be positive")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("split sizes must be positive")
        if self.kind == "textured_patches" and len(self.input_shape) != 3:
            raise ConfigError("textured_patches needs input_shape (C, H, W)")
        if self.kind == "ring_patterns" and self.input_shape != (2,):
            raise ConfigError("ring_patterns needs input_shape (2,)")
        if self.kind == "gaussian_blobs" and len(self.input_shape) != 1:
            raise ConfigError("gaussian_blobs needs a vector input_shape (D,)")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class DistributionRelation:
    relation: str = "out_of_distribution"
    shift: float = 2.0

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ConfigError(f"unknown relation {self.relation!r}")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    input_shape: tuple
    meta: dict = field(default_factory=dict)

    def class_counts(self, split="train"):
        return np.bincount(getattr(self, split).y, minlength=self.num_classes)


@dataclass
class SurrogateSet:
    """Unlabeled adversary inputs; ``reference_labels`` are for measurement only."""
    x: np.ndarray
    reference_labels: np.ndarray
    relation: str


class _Geometry:
    """Natural-space sampler for one task kind."""

    def __init__(self, spec):
        self.spec = spec
        self.d = int(np.prod(spec.input_shape))
        self.sigma = spec.noise
        self.radius = self.sigma * (math.sqrt(self.d) + 3 / math.sqrt(2))
        rng = np.random.default_rng([spec.seed, 0x6E0])
        self._setup(rng)

    def squash(self, z):
        x = (z - self.lo) / (self.hi - self.lo)
        return np.clip(x, 0.0, 1.0).astype(np.float32)

    def unsquash(self, x):
        return np.asarray(x, dtype=np.float64) * (self.hi - self.lo) + self.lo

    def noise(self, rng, n):
        return np.clip(rng.standard_normal((n, self.d)), -4, 4) * self.sigma

    def inside_any_region(self, z):
        return self.class_distances(z).min(axis=1) <= self.radius

    def nearest_class(self, z):
        return self.class_distances(z).argmin(axis=1)


class _Blobs(_Geometry):
    def _setup(self, rng):
        k = self.spec.num_classes
        dirs = rng.standard_normal((k, self.d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self.means = dirs * self.spec.separation * self.sigma
        span = np.abs(self.means).max() + 4 * self.sigma
        self.lo, self.hi = -2 * span, 2 * span

    def sample(self, rng, labels):
        return self.means[labels] + self.noise(rng, len(labels))

    def class_distances(self, z):
        return np.linalg.norm(z[:, None, :] - self.means[None], axis=2)

    def sample_ood(self, rng, n):
        scale = 1.5 * self.spec.separation * self.sigma / math.sqrt(self.d)
        return rng.standard_normal((n, self.d)) * scale


class _Rings(_Geometry):
    def _setup(self, rng):
        self.spacing = self.spec.separation * self.sigma
        self.radii = self.spacing * (np.arange(self.spec.num_classes) + 1)
        span = self.radii[-1] + self.spacing
        self.lo, self.hi = -span, span
        self.radius = 3 * self.sigma  # radial bands are one-dimensional

    def _polar(self, r, theta):
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)

    def sample(self, rng, labels):
        theta = rng.uniform(0, 2 * np.pi, len(labels))
        r = self.radii[labels] + np.clip(rng.standard_normal(len(labels)), -4, 4) * self.sigma
        return self._polar(r, theta)

    def class_distances(self, z):
        r = np.linalg.norm(z, axis=1)
        return np.abs(r[:, None] - self.radii[None])

    def sample_ood(self, rng, n):
        r = rng.uniform(0, self.radii[-1] + self.spacing * 0.9, n)
        return self._polar(r, rng.uniform(0, 2 * np.pi, n))


class _Patches(_Geometry):
    FREQS = (0.12, 0.24)
    PHASES = 96

    def _setup(self, rng):
        k = self.spec.num_classes
        self.n_freq = 2 if k >= 4 else 1
        self.n_orient = math.ceil(k / self.n_freq)
        c, h, w = self.spec.input_shape
        yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
        self.coords = (yy.ravel(), xx.ravel())
        self.channels = c
        self.orient = np.array([np.pi * (i % self.n_orient) / self.n_orient for i in range(k)])
        self.freq = np.array([self.FREQS[(i // self.n_orient) % len(self.FREQS)] for i in range(k)])
        self.lo, self.hi = -(1.5 + 4 * self.sigma), 1.5 + 4 * self.sigma
        phases = np.linspace(0, 2 * np.pi, self.PHASES, endpoint=False)
        self.manifolds = np.stack([self.grating(np.full(self.PHASES, self.orient[i]),
                                                np.full(self.PHASES, self.freq[i]), phases)
                                   for i in range(k)])  # [K, PHASES, d]

    def grating(self, theta, freq, phase, amplitude=1.0):
        yy, xx = self.coords
        arg = 2 * np.pi * freq[:, None] * (xx[None] * np.cos(theta)[:, None] + yy[None] * np.sin(theta)[:, None])
        g = np.asarray(amplitude).reshape(-1, 1) * np.cos(arg + phase[:, None])
        return np.tile(g, (1, self.channels))

    def sample(self, rng, labels):
        n = len(labels)
        g = self.grating(self.orient[labels], self.freq[labels], rng.uniform(0, 2 * np.pi, n))
        return g + self.noise(rng, n)

    def class_distances(self, z):
        out = np.empty((len(z), self.spec.num_classes))
        zz = (z * z).sum(axis=1)
        for k, m in enumerate(self.manifolds):
            d2 = zz[:, None] - 2 * z @ m.T + (m * m).sum(axis=1)[None]
            out[:, k] = np.sqrt(np.maximum(d2.min(axis=1), 0))
        return out

    def sample_ood(self, rng, n):
        theta = rng.uniform(0, np.pi, n)
        freq = rng.uniform(0.04, 0.45, n)
        amp = rng.uniform(0.5, 1.5, n)
        return self.grating(theta, freq, rng.uniform(0, 2 * np.pi, n), amp) + self.noise(rng, n)


_GEOMETRIES = {"gaussian_blobs": _Blobs, "ring_patterns": _Rings, "textured_patches": _Patches}


def geometry(spec):
    return _GEOMETRIES[spec.kind](spec)


def balanced_labels(rng, n, k):
    return rng.permutation(np.arange(n) % k)


def generate(task):
    """Deterministic train/test splits for ``task``; labels balanced within one sample."""
    geo = geometry(task)
    rng = np.random.default_rng([task.seed, 1])
    out = []
    for n in (task.n_train, task.n_test):
        y = balanced_labels(rng, n, task.num_classes)
        x = geo.squash(geo.sample(rng, y)).reshape((n,) + task.input_shape)
        out.append(Split(x, y.astype(np.int64)))
    return Dataset(out[0], out[1], task.num_classes, task.input_shape, {"task": task.to_dict()})


def _row_keys(x):
    x = np.ascontiguousarray(x.reshape(len(x), -1))
    return {row.tobytes() for row in x}


def adversary_variant(task, relation, seed, n=None):
    """Surrogate inputs for an attacker standing in ``relation`` to the victim's data.

    ``in_distribution`` reuses the class generator with a fresh stream;
    ``near_distribution`` moves every class mean by ``shift * noise`` (in
    norm) along one fixed direction and shares the in-distribution random
    stream, so the two variants differ only by the shift; ``out_of_distribution`` draws a
    different pattern family and rejects anything inside a class region.
    """
    if isinstance(relation, str):
        relation = DistributionRelation(relation)
    n = task.n_train if n is None else n
    geo = geometry(task)
    rng = np.random.default_rng([task.seed, 2, seed])
    victim = generate(task)
    taken = _row_keys(victim.train.x) | _row_keys(victim.test.x)
    xs, refs, have = [], [], 0
    while have < n:
        m = max(n - have, 16)
        if relation.relation == "out_of_distribution":
            z = geo.sample_ood(rng, 2 * m)
            z = z[~geo.inside_any_region(z)][:m]
            ref = geo.nearest_class(z)
        else:
            ref = balanced_labels(rng, m, task.num_classes)
            z = geo.sample(rng, ref)
            if relation.relation == "near_distribution":
                u = np.random.default_rng([task.seed, 3]).standard_normal(geo.d)
                z = z + relation.shift * geo.sigma * u / np.linalg.norm(u)
        x = geo.squash(z)
        keep = np.array([row.tobytes() not in taken for row in x], dtype=bool)
        xs.append(x[keep])
        refs.append(ref[keep])
        have += int(keep.sum())
    x = np.concatenate(xs)[:n].reshape((n,) + task.input_shape)
    return SurrogateSet(x, np.concatenate(refs)[:n].astype(np.int64), relation.relation)


def fraction_outside_regions(task, x):
    geo = geometry(task)
    z = geo.unsquash(np.asarray(x).reshape(len(x), -1))
    return float(np.mean(~geo.inside_any_region(z)))


# -- persistence ---------------------------------------------------------------

def _dataset_arrays(ds):
    return {"train.x": ds.train.x.astype(np.float32), "train.y": ds.train.y.astype(np.int32),
            "test.x": ds.test.x.astype(np.float32), "test.y": ds.test.y.astype(np.int32)}


def save_dataset(ds, path, fmt=None):
    meta = {"num_classes": ds.num_classes, "input_shape": list(ds.input_shape)}
    containers.save(path, "dataset", meta, _dataset_arrays(ds), fmt)


def load_dataset(path):
    header, arrays = containers.load(path, "dataset")
    meta = header["meta"]
    return Dataset(Split(arrays["train.x"], arrays["train.y"].astype(np.int64)),
                   Split(arrays["test.x"], arrays["test.y"].astype(np.int64)),
                   int(meta["num_classes"]), tuple(meta["input_shape"]))


def _fmt(v):
    return np.format_float_positional(np.float32(v), unique=True, trim="-")


def export_csv(ds, path):
    """Debug CSV: a ``# shape=..., classes=...`` line, a header, then split,label,features."""
    d = int(np.prod(ds.input_shape))
    with open(path, "w", newline="") as fh:
        fh.write(f"# shape={'x'.join(map(str, ds.input_shape))} classes={ds.num_classes}\n")
        w = csv.writer(fh)
        w.writerow(["split", "label"] + [f"f{i}" for i in range(d)])
        for name in ("train", "test"):
            s = getattr(ds, name)
            for row, label in zip(s.x.reshape(len(s), -1), s.y):
                w.writerow([name, int(label)] + [_fmt(v) for v in row])


def _parse_csv(path, input_shape=None, num_classes=None):
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    shape, k = input_shape, num_classes
    body = []
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "shape" and shape is None:
                    shape = tuple(int(v) for v in val.split("x"))
                elif key == "classes" and k is None:
                    k = int(val)
            continue
        if line.strip():
            body.append((lineno, line))
    if not body:
        raise DatasetFormatError(f"{path}: no data rows")
    rows = [(ln, next(csv.reader(io.StringIO(line)))) for ln, line in body]
    header = None
    try:
        [float(v) for v in rows[0][1] if v not in ("train", "test")]
    except ValueError:
        header = [h.strip() for h in rows[0][1]]
        rows = rows[1:]
    if header is not None and "label" in header:
        label_col = header.index("label")
    else:
        label_col = len(rows[0][1]) - 1 if rows else 0
    split_col = header.index("split") if header is not None and "split" in header else None
    width = len(header) if header is not None else (len(rows[0][1]) if rows else 0)
    feats = {"train": [], "test": []}
    labels = {"train": [], "test": []}
    for ln, rec in rows:
        if len(rec) != width:
            raise DatasetFormatError(f"{path}: line {ln} has {len(rec)} fields, expected {width}")
        split = rec[split_col] if split_col is not None else "train"
        if split not in feats:
            raise DatasetFormatError(f"{path}: line {ln} has unknown split {split!r}")
        try:
            label = float(rec[label_col])
            values = [float(v) for i, v in enumerate(rec) if i not in (label_col, split_col)]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {ln}: {exc}") from None
        if label != int(label) or label < 0:
            raise DatasetFormatError(f"{path}: line {ln}: label {rec[label_col]!r} is not a class index")
        feats[split].append(values)
        labels[split].append(int(label))
    d = width - 1 - (split_col is not None)
    shape = tuple(shape) if shape is not None else (d,)
    if int(np.prod(shape)) != d:
        raise DatasetFormatError(f"{path}: declared shape {shape} does not match {d} features")
    return feats, labels, shape, k


def import_external(path, fmt="csv", labels_path=None, input_shape=None, num_classes=None):
    """Load a small external dataset, normalizing inputs into ``[0, 1]``.

    ``csv``: one row per sample, label in a ``label`` column (or last column),
    optional ``split`` column and ``# shape=CxHxW classes=K`` comment.
    ``idx``: an IDX image file plus ``labels_path``; unsigned bytes map to x/255.
    """
    if fmt == "csv":
        feats, labels, shape, k = _parse_csv(path, input_shape, num_classes)
        arrays = {s: np.asarray(feats[s], dtype=np.float64).reshape((-1,) + shape) for s in feats}
        allv = np.concatenate([a.ravel() for a in arrays.values()]) if any(a.size for a in arrays.values()) else np.zeros(1)
        lo, hi = allv.min(), allv.max()
        if lo < 0 or hi > 1:
            span = hi - lo if hi > lo else 1.0
            arrays = {s: (a - lo) / span for s, a in arrays.items()}
        ys = {s: np.asarray(labels[s], dtype=np.int64) for s in labels}
        k = k or int(max((y.max() for y in ys.values() if y.size), default=0)) + 1
        splits = {s: Split(arrays[s].astype(np.float32), ys[s]) for s in arrays}
        return Dataset(splits["train"], splits["test"], max(k, 2), shape, {"source": str(path)})
    if fmt == "idx":
        if labels_path is None:
            raise ConfigError("idx import needs labels_path")
        x = _read_idx(path)
        y = _read_idx(labels_path).astype(np.int64)
        if len(x) != len(y):
            raise DatasetFormatError(f"{path}: {len(x)} images but {len(y)} labels")
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / 255.0
        else:
            x = x.astype(np.float64)
            lo, hi = x.min(), x.max()
            x = ((x - lo) / (hi - lo if hi > lo else 1.0)).astype(np.float32)
        if x.ndim == 3:
            x = x[:, None]
        shape = tuple(x.shape[1:])
        k = num_classes or int(y.max()) + 1
        empty = Split(np.zeros((0,) + shape, np.float32), np.zeros(0, np.int64))
        return Dataset(Split(x, y), empty, max(k, 2), shape, {"source": str(path)})
    raise ConfigError(f"unknown import format {fmt!r}")


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DatasetFormatError(f"{path}: truncated at byte offset {len(blob)} (magic needs 4 bytes)")
    zero, code, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise DatasetFormatError(f"{path}: bad IDX magic at byte offset 0")
    end = 4 + 4 * ndim
    if len(blob) < end:
        raise DatasetFormatError(f"{path}: truncated at byte offset {len(blob)} (dimensions end at {end})")
    dims = struct.unpack(f">{ndim}I", blob[4:end])
    dt = np.dtype(_IDX_TYPES[code])
    need = end + int(np.prod(dims)) * dt.itemsize
    if len(blob) < need:
        raise DatasetFormatError(f"{path}: truncated at byte offset {len(blob)} (data ends at {need})")
    return np.frombuffer(blob[end:need], dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, arr):
    arr = np.asarray(arr)
    codes = {("u", 1): 0x08, ("i", 1): 0x09, ("i", 2): 0x0B, ("i", 4): 0x0C, ("f", 4): 0x0D, ("f", 8): 0x0E}
    code = codes.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ConfigError(f"IDX cannot hold dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(np.dtype(_IDX_TYPES[code])).tobytes())
