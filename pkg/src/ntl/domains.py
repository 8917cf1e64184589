"""Labeled domain datasets: synthetic glyph pairs, trigger patches, loaders and serialization.

Images are kept as ``uint8`` arrays in ``(N, H, W, C)`` layout. Patching happens
in that integer domain; conversion to model input (``float32`` in ``[0, 1]``,
``(N, C, H, W)``) happens only in :meth:`DomainDataset.to_tensor`.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ntl.errors import (
    ChecksumMismatch,
    GeometryMismatch,
    LabelDestroyingShift,
    MissingFiles,
    UnknownDataset,
    ValidationError,
)

NUM_GLYPH_CLASSES = 10
MANIFEST_VERSION = 1


@dataclass(frozen=True, eq=False)
class DomainDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain_tag: int = 0
    name: str = "dataset"
    # optional per-sample integer group id (auxiliary-union part, augmentation cell, ...)
    groups: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise GeometryMismatch(f"images must be (N, H, W, C), got shape {images.shape}")
        if images.dtype != np.uint8:
            images = images.astype(np.float32)
            if images.size and (images.min() < 0.0 or images.max() > 1.0):
                raise ValidationError("float images must lie in [0, 1]")
        if labels.shape != (images.shape[0],):
            raise ValidationError("labels must be one index per image")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        groups = self.groups
        if groups is not None:
            groups = np.asarray(groups, dtype=np.int64)
            if groups.shape != labels.shape:
                raise ValidationError("groups must be one id per image")
            groups.setflags(write=False)
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def as_uint8(self) -> np.ndarray:
        if self.images.dtype == np.uint8:
            return self.images
        return np.rint(self.images * 255.0).astype(np.uint8)

    def to_tensor(self, idx=None) -> torch.Tensor:
        x = self.images if idx is None else self.images[idx]
        x = torch.from_numpy(np.array(x, copy=True)).permute(0, 3, 1, 2)
        if x.dtype == torch.uint8:
            return x.float().div_(255.0)
        return x.float()

    def label_tensor(self, idx=None) -> torch.Tensor:
        y = self.labels if idx is None else self.labels[idx]
        return torch.from_numpy(np.array(y, copy=True))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def balance_ratio(self) -> float:
        counts = self.class_counts()
        if counts.min() == 0:
            return float("inf")
        return float(counts.max() / counts.min())

    def subset(self, idx, name: Optional[str] = None) -> "DomainDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            groups=None if self.groups is None else self.groups[idx],
            name=name or self.name,
        )

    def split(self, n_test: int) -> tuple["DomainDataset", "DomainDataset"]:
        """First ``len - n_test`` samples for training, the rest for testing."""
        if not 0 < n_test < len(self):
            raise ValidationError(f"n_test must be in (0, {len(self)})")
        n_train = len(self) - n_test
        return (
            self.subset(np.arange(n_train), f"{self.name}/train"),
            self.subset(np.arange(n_train, len(self)), f"{self.name}/test"),
        )

    def stratified_fraction(self, fraction: float, seed: int, name: Optional[str] = None) -> "DomainDataset":
        """Class-balanced random subset holding ``fraction`` of every class."""
        if not 0.0 < fraction <= 1.0:
            raise ValidationError("fraction must be in (0, 1]")
        rng = np.random.default_rng(seed)
        keep = []
        for k in range(self.num_classes):
            members = np.flatnonzero(self.labels == k)
            n = max(1, int(round(fraction * members.size))) if members.size else 0
            keep.append(rng.permutation(members)[:n])
        idx = np.sort(np.concatenate(keep))
        return self.subset(idx, name or f"{self.name}[{fraction:g}]")

    def with_tag(self, tag: int) -> "DomainDataset":
        return replace(self, domain_tag=tag)


def concat(datasets: Sequence[DomainDataset], name: str, domain_tag: int = 1,
           group_by_part: bool = True) -> DomainDataset:
    """Union of datasets sharing K and geometry; part index becomes the group id."""
    if not datasets:
        raise ValidationError("nothing to concatenate")
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.num_classes != first.num_classes or ds.geometry != first.geometry:
            raise GeometryMismatch("datasets differ in K or geometry")
    images = np.concatenate([ds.as_uint8() for ds in datasets])
    labels = np.concatenate([ds.labels for ds in datasets])
    groups = None
    if group_by_part:
        groups = np.concatenate([np.full(len(ds), i) for i, ds in enumerate(datasets)])
    return DomainDataset(images, labels, first.num_classes, domain_tag, name, groups)


# ---------------------------------------------------------------------------
# trigger patch

@dataclass(frozen=True)
class PatchSpec:
    v: int = 20
    channel: int = 0

    def __post_init__(self):
        if not 0 <= int(self.v) <= 255:
            raise ValidationError("patch increment v must be in [0, 255]")
        if self.channel < 0:
            raise ValidationError("patch channel must be nonnegative")


def parity_mask(height: int, width: int) -> np.ndarray:
    """True where the row index or the column index is even."""
    rows = np.arange(height)[:, None] % 2 == 0
    cols = np.arange(width)[None, :] % 2 == 0
    return rows | cols


def apply_patch(dataset: DomainDataset, patch: PatchSpec) -> DomainDataset:
    images = dataset.as_uint8()
    n, h, w, c = images.shape
    if patch.channel >= c:
        raise GeometryMismatch(f"patch channel {patch.channel} but images have {c} channels")
    out = images.copy()
    mask = parity_mask(h, w)
    plane = out[:, :, :, patch.channel].astype(np.int16)
    plane[:, mask] = np.minimum(plane[:, mask] + int(patch.v), 255)
    out[:, :, :, patch.channel] = plane.astype(np.uint8)
    meta = dict(dataset.meta)
    meta["patch"] = asdict(patch)
    return replace(dataset, images=out, name=f"{dataset.name}+patch(v={patch.v})", meta=meta)


# ---------------------------------------------------------------------------
# synthetic glyph domains

# seven-segment layout (a, b, c, d, e, f, g)
_SEGMENTS = np.array([
    [1, 1, 1, 1, 1, 1, 0],
    [0, 1, 1, 0, 0, 0, 0],
    [1, 1, 0, 1, 1, 0, 1],
    [1, 1, 1, 1, 0, 0, 1],
    [0, 1, 1, 0, 0, 1, 1],
    [1, 0, 1, 1, 0, 1, 1],
    [1, 0, 1, 1, 1, 1, 1],
    [1, 1, 1, 0, 0, 0, 0],
    [1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 1, 1],
], dtype=bool)

# worst-case intensities of the unshifted renderer, used by the contrast check
_FG_LOW = 170
_BG_HIGH = 64
_MIN_CONTRAST = 40.0


@dataclass(frozen=True)
class SyntheticShiftSpec:
    """Deterministic, label-preserving transform family for the shifted domain.

    ``tint`` is added to every channel (background tint), ``texture`` is the
    amplitude of a random per-image sinusoidal grating, ``permutation``
    reorders channels.
    """

    tint: tuple[int, int, int] = (0, 0, 0)
    texture: float = 0.0
    permutation: tuple[int, int, int] = (0, 1, 2)
    image_size: int = 32

    @classmethod
    def identity(cls, image_size: int = 32) -> "SyntheticShiftSpec":
        return cls(image_size=image_size)

    @classmethod
    def strong_tint(cls, image_size: int = 32) -> "SyntheticShiftSpec":
        return cls(tint=(10, 90, 130), texture=20.0, permutation=(0, 1, 2), image_size=image_size)

    @property
    def is_identity(self) -> bool:
        return tuple(self.tint) == (0, 0, 0) and self.texture == 0 and tuple(self.permutation) == (0, 1, 2)

    def contrast(self) -> float:
        fg = np.minimum(255.0, _FG_LOW + np.asarray(self.tint, float) - self.texture)
        bg = np.minimum(255.0, _BG_HIGH + np.asarray(self.tint, float) + self.texture)
        return float(np.mean(fg - bg))

    def validate(self) -> None:
        if len(self.tint) != 3 or any(not 0 <= t <= 255 for t in self.tint):
            raise ValidationError("tint must be three values in [0, 255]")
        if self.texture < 0:
            raise ValidationError("texture amplitude must be nonnegative")
        if sorted(self.permutation) != [0, 1, 2]:
            raise ValidationError("permutation must reorder channels (0, 1, 2)")
        if self.image_size < 12:
            raise ValidationError("image_size must be at least 12")
        if self.contrast() < _MIN_CONTRAST:
            raise LabelDestroyingShift(
                f"shift leaves glyph/background contrast {self.contrast():.1f} < {_MIN_CONTRAST}"
            )


def _render_glyphs(rng: np.random.Generator, labels: np.ndarray, size: int) -> np.ndarray:
    n = labels.shape[0]
    scale = size / 32.0
    h = rng.uniform(16, 24, n) * scale
    w = h * rng.uniform(0.5, 0.65, n)
    t = np.maximum(1.0, rng.choice([2.0, 3.0], n) * scale)
    oy = (size - h) / 2 + rng.uniform(-3, 3, n) * scale
    ox = (size - w) / 2 + rng.uniform(-3, 3, n) * scale

    ys = np.arange(size, dtype=np.float64)[None, :, None]
    xs = np.arange(size, dtype=np.float64)[None, None, :]

    def col(v):
        return v[:, None, None]

    def rect(y0, y1, x0, x1):
        return (ys >= col(y0)) & (ys < col(y1)) & (xs >= col(x0)) & (xs < col(x1))

    mid = oy + h / 2
    segs = [
        rect(oy, oy + t, ox, ox + w),                      # a
        rect(oy, mid + t / 2, ox + w - t, ox + w),         # b
        rect(mid - t / 2, oy + h, ox + w - t, ox + w),     # c
        rect(oy + h - t, oy + h, ox, ox + w),              # d
        rect(mid - t / 2, oy + h, ox, ox + t),             # e
        rect(oy, mid + t / 2, ox, ox + t),                 # f
        rect(mid - t / 2, mid + t / 2, ox, ox + w),        # g
    ]
    active = _SEGMENTS[labels]
    mask = np.zeros((n, size, size), dtype=bool)
    for s, seg in enumerate(segs):
        mask |= seg & active[:, s][:, None, None]

    fg = rng.uniform(_FG_LOW, 255, (n, 1, 1, 3))
    bg = rng.uniform(0, 40, (n, 1, 1, 3))
    noise = np.clip(rng.normal(0, 8, (n, size, size, 3)), -24, 24)
    img = np.where(mask[..., None], fg, bg + noise)
    return img


def _shift_images(rng: np.random.Generator, img: np.ndarray, shift: SyntheticShiftSpec) -> np.ndarray:
    if shift.is_identity:
        return img
    n, size = img.shape[0], img.shape[1]
    out = img + np.asarray(shift.tint, dtype=np.float64)[None, None, None, :]
    if shift.texture > 0:
        fy = rng.uniform(1, 4, n)[:, None, None]
        fx = rng.uniform(1, 4, n)[:, None, None]
        phase = rng.uniform(0, 2 * np.pi, n)[:, None, None]
        ys = np.arange(size)[None, :, None]
        xs = np.arange(size)[None, None, :]
        grating = np.sin(2 * np.pi * (fy * ys + fx * xs) / size + phase)
        out = out + shift.texture * grating[..., None]
    out = out[..., list(shift.permutation)]
    return out


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def make_synthetic_domain_pair(
    seed: int,
    shift: SyntheticShiftSpec,
    n_samples: int = 9000,
) -> tuple[DomainDataset, DomainDataset]:
    """Source glyph domain (tag 0) and an independently drawn shifted domain (tag 1)."""
    shift.validate()
    if n_samples < NUM_GLYPH_CLASSES:
        raise ValidationError(f"n_samples must be at least {NUM_GLYPH_CLASSES}")
    src_seq, tgt_seq = np.random.SeedSequence(seed).spawn(2)
    src_rng, tgt_rng = np.random.default_rng(src_seq), np.random.default_rng(tgt_seq)

    y_src = _balanced_labels(src_rng, n_samples, NUM_GLYPH_CLASSES)
    x_src = _render_glyphs(src_rng, y_src, shift.image_size)
    y_tgt = _balanced_labels(tgt_rng, n_samples, NUM_GLYPH_CLASSES)
    x_tgt = _shift_images(tgt_rng, _render_glyphs(tgt_rng, y_tgt, shift.image_size), shift)

    def pack(x):
        return np.clip(np.rint(x), 0, 255).astype(np.uint8)

    meta = {"seed": int(seed), "shift": _shift_to_dict(shift)}
    source = DomainDataset(pack(x_src), y_src, NUM_GLYPH_CLASSES, 0, "synthetic-source", meta=meta)
    shifted = DomainDataset(pack(x_tgt), y_tgt, NUM_GLYPH_CLASSES, 1, "synthetic-shifted", meta=meta)
    return source, shifted


def _shift_to_dict(shift: SyntheticShiftSpec) -> dict:
    d = asdict(shift)
    d["tint"] = list(d["tint"])
    d["permutation"] = list(d["permutation"])
    return d


def shift_from_dict(d: dict) -> SyntheticShiftSpec:
    return SyntheticShiftSpec(
        tint=tuple(d.get("tint", (0, 0, 0))),
        texture=float(d.get("texture", 0.0)),
        permutation=tuple(d.get("permutation", (0, 1, 2))),
        image_size=int(d.get("image_size", 32)),
    )


# ---------------------------------------------------------------------------
# loaders for standard archives

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

KNOWN_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaceb5e8f6f44b6fc0e8b6",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
    "data_batch_1": "c99cafc152244af753f735de768cd75f",
    "data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
    "data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
    "data_batch_4": "634d18415352ddfa80567beed471001a",
    "data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
    "test_batch": "40351d587109b95175f43aff81a1287e",
    "train_32x32.mat": "e26dedcc434d2e4c54c9b2d4a06d8373",
    "test_32x32.mat": "eb5a983be6a315427106f1b164d9cef3",
}


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check(path: Path, verify: bool, checksums: dict) -> None:
    if not path.exists():
        raise MissingFiles(str(path))
    expected = checksums.get(path.name)
    if verify and expected is not None and _md5(path) != expected:
        raise ChecksumMismatch(f"{path} does not match md5 {expected}")


def to_rgb32(images: np.ndarray) -> np.ndarray:
    """Replicate grayscale ``(N, H, W)`` to 3 channels and zero-pad to 32x32."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.shape[-1] == 1:
        images = np.repeat(images, 3, axis=-1)
    n, h, w, c = images.shape
    if h > 32 or w > 32:
        raise GeometryMismatch(f"cannot pad {h}x{w} to 32x32")
    top, left = (32 - h) // 2, (32 - w) // 2
    out = np.zeros((n, 32, 32, c), dtype=images.dtype)
    out[:, top:top + h, left:left + w] = images
    return out


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _load_mnist(root: Path, split: str, verify: bool, checksums: dict):
    paths = []
    for stem in _MNIST_FILES[split]:
        gz, raw = root / f"{stem}.gz", root / stem
        path = gz if gz.exists() else raw
        _check(path, verify, checksums)
        paths.append(path)
    return to_rgb32(_read_idx(paths[0])), _read_idx(paths[1]).astype(np.int64), 10


def _load_usps(root: Path, split: str, verify: bool, checksums: dict):
    import h5py

    path = root / "usps.h5"
    _check(path, verify, checksums)
    with h5py.File(path, "r") as f:
        data = np.asarray(f[split]["data"]).reshape(-1, 16, 16)
        target = np.asarray(f[split]["target"]).astype(np.int64)
    img = np.rint(np.clip(data, 0, 1) * 255).astype(np.uint8)
    img = img.repeat(2, axis=1).repeat(2, axis=2)
    return to_rgb32(img), target, 10


def _load_svhn(root: Path, split: str, verify: bool, checksums: dict):
    from scipy.io import loadmat

    path = root / f"{split}_32x32.mat"
    _check(path, verify, checksums)
    mat = loadmat(path)
    img = np.transpose(mat["X"], (3, 0, 1, 2)).astype(np.uint8)
    labels = mat["y"].reshape(-1).astype(np.int64) % 10
    return img, labels, 10


def _load_cifar10(root: Path, split: str, verify: bool, checksums: dict):
    base = root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").exists() else root
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    xs, ys = [], []
    for name in names:
        path = base / name
        _check(path, verify, checksums)
        with open(path, "rb") as f:
            batch = pickle.load(f, encoding="latin1")
        xs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(np.asarray(batch["labels"], dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), 10


_LOADERS = {
    "mnist": _load_mnist,
    "usps": _load_usps,
    "svhn": _load_svhn,
    "cifar10": _load_cifar10,
}


def ingest_dataset(
    name: str,
    root,
    split: str = "train",
    verify: bool = True,
    seed: int = 2021,
    shift: Optional[SyntheticShiftSpec] = None,
    n_samples: int = 9000,
    checksums: Optional[dict] = None,
) -> DomainDataset:
    """Load a named dataset as uint8 RGB 32x32 (digit sets) or native RGB (CIFAR10).

    ``synthetic`` returns the source half of :func:`make_synthetic_domain_pair`,
    ``synthetic-shifted`` the shifted half; ``root`` is ignored for both.
    """
    key = name.lower()
    if key in ("synthetic", "synthetic-shifted"):
        pair = make_synthetic_domain_pair(seed, shift or SyntheticShiftSpec.strong_tint(), n_samples)
        return pair[0] if key == "synthetic" else pair[1]
    if key not in _LOADERS:
        raise UnknownDataset(name)
    if split not in ("train", "test"):
        raise ValidationError("split must be 'train' or 'test'")
    root = Path(root)
    if not root.exists():
        raise MissingFiles(str(root))
    images, labels, k = _LOADERS[key](root, split, verify, KNOWN_MD5 if checksums is None else checksums)
    return DomainDataset(images, labels, k, 0, f"{key}/{split}")


# ---------------------------------------------------------------------------
# serialization

def save_dataset(ds: DomainDataset, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", ds.as_uint8())
    np.save(directory / "labels.npy", ds.labels)
    if ds.groups is not None:
        np.save(directory / "groups.npy", ds.groups)
    manifest = {
        "version": MANIFEST_VERSION,
        "name": ds.name,
        "num_classes": ds.num_classes,
        "domain_tag": ds.domain_tag,
        "geometry": list(ds.geometry),
        "count": len(ds),
        "class_counts": ds.class_counts().tolist(),
        "meta": ds.meta,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> DomainDataset:
    directory = Path(directory)
    for required in ("manifest.json", "images.npy", "labels.npy"):
        if not (directory / required).exists():
            raise MissingFiles(str(directory / required))
    manifest = json.loads((directory / "manifest.json").read_text())
    groups_path = directory / "groups.npy"
    return DomainDataset(
        np.load(directory / "images.npy"),
        np.load(directory / "labels.npy"),
        manifest["num_classes"],
        manifest["domain_tag"],
        manifest["name"],
        np.load(groups_path) if groups_path.exists() else None,
        manifest.get("meta", {}),
    )


def patch_from_manifest(directory) -> PatchSpec:
    manifest = json.loads((Path(directory) / "manifest.json").read_text())
    return PatchSpec(**manifest["meta"]["patch"])
