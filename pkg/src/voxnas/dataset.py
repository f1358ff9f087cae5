"""Voxel occupancy grids: synthetic shapes, stratified splits and on-disk format.

Directory layout::

    manifest.txt     voxd 1 <X> <Y> <Z> <num_classes>
                     <relative-file> <label> <train|test>   (one per sample)
    classes.txt      optional, one class name per line
    *.vox            VOXB, u16 version, 3 x u32 extents, X*Y*Z bytes of 0/1
"""

from __future__ import annotations

import os
import shutil
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DatasetFormatError

VOX_MAGIC = b"VOXB"
VOX_VERSION = 1
MANIFEST = "manifest.txt"
CLASSES = "classes.txt"
PADDING = 3
MIN_GRID = 12

SHAPE_FAMILIES = (
    "solid_box",
    "sphere",
    "hollow_box",
    "cylinder",
    "plus_sign",
    "l_slab",
    "cone",
    "torus",
)


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3:
            raise DatasetFormatError(f"voxel grid must be 3D, got shape {occ.shape}")
        if occ.dtype != bool:
            if not np.isin(occ, (0, 1)).all():
                raise DatasetFormatError("voxel values must be 0 or 1")
            occ = occ.astype(bool)
        object.__setattr__(self, "occupancy", occ)

    @property
    def dims(self):
        return self.occupancy.shape


@dataclass
class LabeledDataset:
    """Samples stacked as ``voxels[N, X, Y, Z]`` (bool) with integer ``labels``.

    ``is_train`` is ``None`` until :func:`split` assigns one.
    """

    voxels: np.ndarray
    labels: np.ndarray
    class_names: list
    is_train: np.ndarray | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.voxels.ndim != 4 or len(self.voxels) != len(self.labels):
            raise DatasetFormatError("voxels must be [N, X, Y, Z] with one label per sample")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetFormatError("label out of range of class_names")
        if self.is_train is not None:
            self.is_train = np.asarray(self.is_train, dtype=bool)

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self):
        return tuple(self.voxels.shape[1:])

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def input_dims(self):
        return (1, *self.dims)

    def grid(self, i):
        return VoxelGrid(self.voxels[i])

    def _mask(self, which):
        if self.is_train is None:
            raise ValueError("dataset has no train/test split assigned")
        return self.is_train if which == "train" else ~self.is_train

    def arrays(self, which):
        """``(x, y)`` for ``'train'``, ``'test'`` or ``'all'``; x is float64."""
        if which == "all":
            m = np.ones(len(self), dtype=bool)
        elif which in ("train", "test"):
            m = self._mask(which)
        else:
            raise ValueError(f"unknown split {which!r}")
        return self.voxels[m].astype(np.float64), self.labels[m]

    def equals(self, other):
        same_split = (self.is_train is None and other.is_train is None) or (
            self.is_train is not None
            and other.is_train is not None
            and np.array_equal(self.is_train, other.is_train)
        )
        return (
            np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.labels, other.labels)
            and list(self.class_names) == list(other.class_names)
            and same_split
        )


# -- synthetic shapes -------------------------------------------------------


def _coords(n):
    c = np.arange(n) + 0.5
    return np.meshgrid(c, c, c, indexing="ij")


def _draw(family, size, rng):
    """One shape in an ``size**3`` box (before rotation and placement)."""
    x, y, z = _coords(size)
    mid = size / 2
    occ = np.zeros((size,) * 3, dtype=bool)
    if family == "solid_box":
        a, b, c = rng.integers(max(2, size // 2), size + 1, size=3)
        occ[:a, :b, :c] = True
    elif family == "hollow_box":
        a, b, c = rng.integers(min(max(5, size // 2), size), size + 1, size=3)
        occ[:a, :b, :c] = True
        occ[1 : a - 1, 1 : b - 1, 1 : c - 1] = False
    elif family == "sphere":
        occ = (x - mid) ** 2 + (y - mid) ** 2 + (z - mid) ** 2 <= mid**2
    elif family == "cylinder":
        h = rng.integers(max(2, size // 2), size + 1)
        occ = ((x - mid) ** 2 + (y - mid) ** 2 <= mid**2) & (z < h)
    elif family == "plus_sign":
        t = max(1, size // 4)
        lo, hi = (size - t) // 2, (size - t) // 2 + t
        occ[lo:hi, lo:hi, :] = True
        occ[lo:hi, :, lo:hi] = True
        occ[:, lo:hi, lo:hi] = True
    elif family == "l_slab":
        t = max(1, size // 4)
        occ[:, :t, :] = True
        occ[:t, :, :] = True
        occ[:, :, size // 2 :] = False
    elif family == "cone":
        r = (size - z) / size * mid
        occ = (x - mid) ** 2 + (y - mid) ** 2 <= r**2
    elif family == "torus":
        big, small = mid * 0.65, mid * 0.35
        ring = np.sqrt((x - mid) ** 2 + (y - mid) ** 2) - big
        occ = ring**2 + (z - mid) ** 2 <= small**2
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return occ


def _rotate(occ, rng):
    # random member of the axis-aligned 90-degree rotation group
    axes = [(0, 1), (0, 2), (1, 2)]
    for ax in axes:
        occ = np.rot90(occ, k=int(rng.integers(4)), axes=ax)
    return occ


def generate_synthetic(num_classes, per_class, grid=30, seed=0):
    """Balanced set of primitive solids, each inside the central ``(grid-6)**3`` cube."""
    if not 2 <= num_classes <= len(SHAPE_FAMILIES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPE_FAMILIES)}]")
    if grid < MIN_GRID:
        raise ValueError(f"grid must be at least {MIN_GRID}")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    rng = np.random.default_rng(seed)
    inner = grid - 2 * PADDING
    voxels = np.zeros((num_classes * per_class, grid, grid, grid), dtype=bool)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, label in enumerate(labels):
        size = int(rng.integers(max(4, inner // 2), inner + 1))
        occ = _rotate(_draw(SHAPE_FAMILIES[label], size, rng), rng)
        ox, oy, oz = rng.integers(0, inner - size + 1, size=3)
        box = voxels[i, PADDING : PADDING + inner, PADDING : PADDING + inner, PADDING : PADDING + inner]
        box[ox : ox + size, oy : oy + size, oz : oz + size] = occ
    return LabeledDataset(voxels, labels, list(SHAPE_FAMILIES[:num_classes]))


def split(ds, train_fraction=0.8, seed=0):
    """Stratified train/test assignment; each class keeps >= 1 sample on each side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    is_train = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        n_train = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        is_train[rng.permutation(idx)[:n_train]] = True
    return LabeledDataset(ds.voxels, ds.labels, list(ds.class_names), is_train)


# -- on-disk format ---------------------------------------------------------


def encode_grid(occ):
    occ = np.asarray(occ)
    head = VOX_MAGIC + struct.pack("<H3I", VOX_VERSION, *occ.shape)
    return head + occ.astype(np.uint8).tobytes()


def decode_grid(data, name="<bytes>"):
    if len(data) < 18 or data[:4] != VOX_MAGIC:
        raise DatasetFormatError(f"{name}: bad magic bytes")
    version, x, y, z = struct.unpack("<H3I", data[4:18])
    if version != VOX_VERSION:
        raise DatasetFormatError(f"{name}: unsupported version {version}")
    body = data[18:]
    if len(body) != x * y * z:
        raise DatasetFormatError(f"{name}: expected {x * y * z} voxel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    if arr.max(initial=0) > 1:
        raise DatasetFormatError(f"{name}: voxel bytes must be 0 or 1")
    return arr.reshape(x, y, z).astype(bool)


def save_dataset(ds, directory):
    """Write ``ds`` to ``directory`` via a temporary sibling and a rename.

    ``directory`` must not exist or be empty.
    """
    if ds.is_train is None:
        raise ValueError("assign a train/test split before saving")
    directory = os.path.abspath(directory)
    if os.path.exists(directory) and os.listdir(directory):
        raise FileExistsError(f"{directory} exists and is not empty")
    parent = os.path.dirname(directory)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".voxd-", dir=parent)
    try:
        x, y, z = ds.dims
        lines = [f"voxd 1 {x} {y} {z} {ds.num_classes}"]
        width = max(5, len(str(len(ds))))
        for i in range(len(ds)):
            name = f"sample_{i:0{width}d}.vox"
            with open(os.path.join(tmp, name), "wb") as fh:
                fh.write(encode_grid(ds.voxels[i]))
            lines.append(f"{name} {ds.labels[i]} {'train' if ds.is_train[i] else 'test'}")
        with open(os.path.join(tmp, MANIFEST), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(os.path.join(tmp, CLASSES), "w") as fh:
            fh.write("\n".join(ds.class_names) + "\n")
        if os.path.exists(directory):
            os.rmdir(directory)
        os.rename(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_dataset(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(path):
        raise DatasetFormatError(f"missing manifest: {path}")
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or len(lines[0]) != 6 or lines[0][:2] != ["voxd", "1"]:
        raise DatasetFormatError(f"{path}: bad header")
    try:
        dims = tuple(int(v) for v in lines[0][2:5])
        num_classes = int(lines[0][5])
    except ValueError:
        raise DatasetFormatError(f"{path}: bad header") from None

    names_path = os.path.join(directory, CLASSES)
    if os.path.isfile(names_path):
        with open(names_path) as fh:
            names = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if len(names) != num_classes:
            raise DatasetFormatError(f"{names_path}: expected {num_classes} names")
    else:
        names = [f"class_{i}" for i in range(num_classes)]

    voxels, labels, is_train = [], [], []
    for lineno, parts in enumerate(lines[1:], 2):
        if len(parts) != 3 or parts[2] not in ("train", "test"):
            raise DatasetFormatError(f"{path}:{lineno}: expected '<file> <label> <train|test>'")
        fname, label, which = parts
        try:
            label = int(label)
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: bad label {label!r}") from None
        if not 0 <= label < num_classes:
            raise DatasetFormatError(f"{path}:{lineno}: label {label} out of range")
        fpath = os.path.join(directory, fname)
        if not os.path.isfile(fpath):
            raise DatasetFormatError(f"missing sample file: {fname}")
        with open(fpath, "rb") as fh:
            occ = decode_grid(fh.read(), fname)
        if occ.shape != dims:
            raise DatasetFormatError(f"{fname}: dims {occ.shape} differ from manifest {dims}")
        voxels.append(occ)
        labels.append(label)
        is_train.append(which == "train")
    if not voxels:
        raise DatasetFormatError(f"{path}: no samples")
    return LabeledDataset(np.stack(voxels), np.array(labels), names, np.array(is_train))
