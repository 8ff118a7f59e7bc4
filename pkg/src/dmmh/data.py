"""Feature banks, label files, dataset manifests and the synthetic generator.

Binary layouts (all integers little-endian):

* DMFB features: ``b"DMFB"``, u32 version=1, u64 n, u32 dim, ``n*dim`` float32.
* DMLB labels:   ``b"DMLB"``, u64 n, u32 C, ``n*C`` bytes in {0, 1}.

Manifests are JSON; file paths inside are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import make_rng

FEATURE_MAGIC = b"DMFB"
FEATURE_VERSION = 1
LABEL_MAGIC = b"DMLB"
_FB_HEADER = struct.Struct("<4sIQI")
_LB_HEADER = struct.Struct("<4sQI")

SPLITS = ("training", "retrieval", "query")

# Statistics of the public benchmarks the model was published on.
PAPER_DATASETS = {
    "MIR-Flickr25K": {"training": 5000, "retrieval": 17772, "query": 2243,
                      "categories": 24, "vision_dim": 4096, "text_dim": 1386},
    "NUS-WIDE": {"training": 21000, "retrieval": 193749, "query": 2085,
                 "categories": 21, "vision_dim": 4096, "text_dim": 1000},
    "MS COCO": {"training": 18000, "retrieval": 82783, "query": 5981,
                "categories": 80, "vision_dim": 4096, "text_dim": 2000},
}


class FormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


class ZeroDimError(FormatError):
    pass


class ManifestError(ValueError):
    """Base class for manifest validation failures."""


class SplitOverlapError(ManifestError):
    pass


class IndexRangeError(ManifestError):
    pass


class DimMismatchError(ManifestError):
    pass


class LabelShapeError(ManifestError):
    pass


class SchemaError(ManifestError):
    pass


# --------------------------------------------------------------------------- features

def write_feature_bank(path, bank: np.ndarray) -> None:
    bank = np.asarray(bank)
    if bank.ndim != 2:
        raise ValueError(f"feature bank must be 2-D, got shape {bank.shape}")
    n, dim = bank.shape
    if dim == 0:
        raise ZeroDimError("feature dim must be >= 1")
    if not np.all(np.isfinite(bank)):
        raise NonFiniteValueError("feature bank contains NaN/Inf")
    with open(path, "wb") as f:
        f.write(_FB_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, dim))
        f.write(np.ascontiguousarray(bank, dtype="<f4").tobytes())


def read_feature_header(path) -> tuple[int, int]:
    """Return ``(n, dim)`` after checking magic, version and payload length."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(_FB_HEADER.size)
    if len(head) < 4 or head[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a DMFB feature file")
    if len(head) < _FB_HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, version, n, dim = _FB_HEADER.unpack(head)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported DMFB version {version}")
    if dim == 0:
        raise ZeroDimError(f"{path}: feature dim is 0")
    expected = _FB_HEADER.size + 4 * n * dim
    if size < expected:
        raise TruncatedError(f"{path}: payload has {size - _FB_HEADER.size} bytes, "
                             f"expected {4 * n * dim}")
    if size > expected:
        raise FormatError(f"{path}: {size - expected} trailing bytes")
    return n, dim


def read_feature_bank(path) -> np.ndarray:
    n, dim = read_feature_header(path)
    with open(path, "rb") as f:
        f.seek(_FB_HEADER.size)
        data = np.frombuffer(f.read(4 * n * dim), dtype="<f4").reshape(n, dim)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{path}: feature bank contains NaN/Inf")
    return data.astype(np.float32)


# --------------------------------------------------------------------------- labels

def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"labels must be 2-D, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise FormatError("labels must be 0/1")
    n, c = labels.shape
    with open(path, "wb") as f:
        f.write(_LB_HEADER.pack(LABEL_MAGIC, n, c))
        f.write(labels.astype(np.uint8).tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != LABEL_MAGIC:
        raise BadMagicError(f"{path}: not a DMLB label file")
    if len(raw) < _LB_HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, n, c = _LB_HEADER.unpack_from(raw)
    body = raw[_LB_HEADER.size:]
    if len(body) < n * c:
        raise TruncatedError(f"{path}: label payload has {len(body)} bytes, expected {n * c}")
    if len(body) > n * c:
        raise FormatError(f"{path}: {len(body) - n * c} trailing bytes")
    labels = np.frombuffer(body, dtype=np.uint8).reshape(n, c)
    if labels.size and labels.max() > 1:
        raise FormatError(f"{path}: label bytes must be 0/1")
    return labels.copy()


# --------------------------------------------------------------------------- manifest

@dataclass
class Modality:
    name: str
    dim: int
    path: str


@dataclass
class DatasetManifest:
    name: str
    modalities: list[Modality]
    labels: str
    categories: int
    splits: dict = field(default_factory=dict)
    root: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, root=".") -> "DatasetManifest":
        known = {"name", "modalities", "labels", "categories", "splits"}
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown manifest keys: {sorted(extra)}")
        missing = known - set(d)
        if missing:
            raise SchemaError(f"missing manifest keys: {sorted(missing)}")
        mods = []
        for m in d["modalities"]:
            if set(m) != {"name", "dim", "path"}:
                raise SchemaError(f"modality entries need name/dim/path, got {sorted(m)}")
            mods.append(Modality(str(m["name"]), int(m["dim"]), str(m["path"])))
        return cls(str(d["name"]), mods, str(d["labels"]), int(d["categories"]),
                   dict(d["splits"]), Path(root))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "modalities": [{"name": m.name, "dim": m.dim, "path": m.path}
                           for m in self.modalities],
            "labels": self.labels,
            "categories": self.categories,
            "splits": self.splits,
        }

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def split_indices(self, n: int) -> dict[str, np.ndarray]:
        """Materialize split index arrays; size-form splits are drawn with the split seed."""
        sp = self.splits
        if all(isinstance(sp.get(s), list) for s in SPLITS):
            return {s: np.asarray(sp[s], dtype=np.int64) for s in SPLITS}
        if all(isinstance(sp.get(s), int) for s in SPLITS):
            sizes = [sp[s] for s in SPLITS]
            if any(v < 0 for v in sizes):
                raise SchemaError(f"negative split size in {sizes}")
            if sum(sizes) > n:
                raise IndexRangeError(f"split sizes {sizes} exceed {n} samples")
            perm = make_rng(int(sp.get("seed", 0))).permutation(n)
            out, start = {}, 0
            for s, size in zip(SPLITS, sizes):
                out[s] = np.sort(perm[start:start + size])
                start += size
            return out
        raise SchemaError("splits must give index lists or integer sizes for "
                          "training/retrieval/query")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as f:
        return DatasetManifest.from_dict(json.load(f), root=path.parent)


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2)
        f.write("\n")


def validate_manifest(manifest: DatasetManifest) -> DatasetManifest:
    if not manifest.modalities:
        raise SchemaError("manifest declares no modalities")
    names = [m.name for m in manifest.modalities]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate modality names: {names}")
    n_samples = None
    for m in manifest.modalities:
        n, dim = read_feature_header(manifest.resolve(m.path))
        if dim != m.dim:
            raise DimMismatchError(f"modality {m.name!r} declares {m.dim}-D but "
                                   f"{m.path} holds {dim}-D features")
        if n_samples is not None and n != n_samples:
            raise DimMismatchError(f"modality {m.name!r} has {n} samples, expected {n_samples}")
        n_samples = n
    labels = read_labels(manifest.resolve(manifest.labels))
    if labels.shape != (n_samples, manifest.categories):
        raise LabelShapeError(f"label file is {labels.shape[0]}x{labels.shape[1]}, expected "
                              f"{n_samples}x{manifest.categories}")
    splits = manifest.split_indices(n_samples)
    for s, idx in splits.items():
        bad = idx[(idx < 0) | (idx >= n_samples)]
        if bad.size:
            raise IndexRangeError(f"split {s!r} has out-of-range indices {bad[:10].tolist()}")
        vals, counts = np.unique(idx, return_counts=True)
        if np.any(counts > 1):
            raise SplitOverlapError(f"split {s!r} repeats indices {vals[counts > 1][:10].tolist()}")
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1:]:
            common = np.intersect1d(splits[a], splits[b])
            if common.size:
                raise SplitOverlapError(f"splits {a!r} and {b!r} share indices "
                                        f"{common[:10].tolist()}")
    return manifest


@dataclass
class Dataset:
    """A validated manifest with its features and labels loaded."""

    manifest: DatasetManifest
    features: dict[str, np.ndarray]
    labels: np.ndarray
    splits: dict[str, np.ndarray]

    def split(self, name: str) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        idx = self.splits[name]
        return {k: v[idx] for k, v in self.features.items()}, self.labels[idx], idx


def load_dataset(path) -> Dataset:
    manifest = validate_manifest(load_manifest(path))
    feats = {m.name: read_feature_bank(manifest.resolve(m.path)) for m in manifest.modalities}
    labels = read_labels(manifest.resolve(manifest.labels))
    n = labels.shape[0]
    return Dataset(manifest, feats, labels, manifest.split_indices(n))


# --------------------------------------------------------------------------- synthetic

def generate_synthetic(out_dir, classes: int, per_class: int, dims, sigma: float = 0.1,
                       seed: int = 0, names=None) -> Path:
    """Write a clustered multi-modal dataset and return its manifest path.

    Each class owns one Gaussian prototype per modality; samples are the
    prototype plus isotropic noise, so every modality carries the same class
    structure. Samples are split 60/30/10 into training/retrieval/query.
    """
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    if classes < 1:
        raise ValueError("classes must be >= 1")
    dims = [int(d) for d in dims]
    if not dims or min(dims) < 1:
        raise ValueError(f"modality dims must be positive, got {dims}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if names is None:
        names = ["vision", "text"] if len(dims) == 2 else [f"m{i}" for i in range(len(dims))]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    n = classes * per_class
    cls = np.repeat(np.arange(classes), per_class)

    modalities = []
    for name, dim in zip(names, dims):
        protos = rng.standard_normal((classes, dim))
        x = protos[cls] + sigma * rng.standard_normal((n, dim))
        fname = f"{name}.dmfb"
        write_feature_bank(out / fname, x.astype(np.float32))
        modalities.append(Modality(name, dim, fname))

    labels = np.zeros((n, classes), dtype=np.uint8)
    labels[np.arange(n), cls] = 1
    write_labels(out / "labels.dmlb", labels)

    perm = rng.permutation(n)
    n_train = int(round(0.6 * n))
    n_ret = int(round(0.3 * n))
    splits = {
        "training": np.sort(perm[:n_train]).tolist(),
        "retrieval": np.sort(perm[n_train:n_train + n_ret]).tolist(),
        "query": np.sort(perm[n_train + n_ret:]).tolist(),
    }
    manifest = DatasetManifest(f"synthetic-c{classes}-n{per_class}-s{seed}", modalities,
                               "labels.dmlb", classes, splits, out)
    path = out / "manifest.json"
    save_manifest(path, manifest)
    return path
