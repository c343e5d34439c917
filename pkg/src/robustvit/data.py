"""MTEN1 tensors, checkpoint archives, JSON-manifest datasets and the toy generator.

MTEN1 layout: ``b"MTEN1"``, u8 rank, rank x u32 little-endian dims, then the
float32 little-endian payload in row-major order.

Checkpoint archives: ``b"MTAR1"``, u32 little-endian header length, a UTF-8
JSON header ``{"version", "config", "meta", "tensors": [{"name", "shape"}]}``
and then one MTEN1 record per header entry, in header order.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MTEN1"
ARCHIVE_MAGIC = b"MTAR1"
ARCHIVE_VERSION = 1


class FormatError(ValueError):
    """Malformed MTEN1 payload or checkpoint archive."""


# ---------------------------------------------------------------------------
# MTEN1


def write_tensor(stream, array) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    if arr.ndim > 255:
        raise FormatError("rank above 255 cannot be encoded")
    stream.write(MAGIC)
    stream.write(struct.pack("<B", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.tobytes())


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream) -> np.ndarray:
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<B", _read_exact(stream, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def encode_tensor(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoint archives


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None,
                    meta: dict | None = None) -> None:
    entries = [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors.items()]
    header = json.dumps(
        {"version": ARCHIVE_VERSION, "config": config or {}, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in tensors.values():
            write_tensor(fh, arr)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(ARCHIVE_MAGIC))
        if magic != ARCHIVE_MAGIC:
            raise FormatError(f"{path}: not a checkpoint archive (magic {magic!r})")
        (length,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, length))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupt header: {exc}") from None
        if header.get("version") != ARCHIVE_VERSION:
            raise FormatError(f"{path}: unsupported archive version {header.get('version')!r}")
        tensors = {}
        for entry in header["tensors"]:
            name = entry["name"]
            if name in tensors:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            try:
                arr = read_tensor(fh)
            except FormatError as exc:
                raise FormatError(f"{path}: tensor {name!r}: {exc}") from None
            if list(arr.shape) != list(entry["shape"]):
                raise FormatError(
                    f"{path}: tensor {name!r} has dims {list(arr.shape)} but header says {entry['shape']}"
                )
            tensors[name] = arr
    return Checkpoint(tensors, header.get("config", {}), header.get("meta", {}))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ImageBatch:
    """N x H x W x C pixels in [0, 1] with class labels and adversarial provenance."""

    x: np.ndarray
    y: np.ndarray
    adversarial: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or len(self.x) != len(self.y):
            raise ValueError(f"images {self.x.shape} and labels {self.y.shape} do not line up")
        if self.adversarial is None:
            self.adversarial = np.zeros(len(self.y), dtype=bool)

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "ImageBatch":
        return ImageBatch(self.x[idx], self.y[idx], self.adversarial[idx])

    def batches(self, batch_size: int, seed: int | None = None, epoch: int = 0,
                drop_last: bool = False):
        order = shuffle_order(len(self), seed, epoch) if seed is not None else np.arange(len(self))
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for start in range(0, stop, batch_size):
            yield self.take(order[start:start + batch_size])


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation keyed by ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class DatasetManifest:
    name: str
    height: int
    width: int
    channels: int
    classes: int
    splits: dict  # split -> {"images": file, "labels": file, "count": n}
    root: Path
    pixel_scale: float = 1.0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def check_patch(self, patch: int) -> None:
        if self.height % patch or self.width % patch:
            raise ValueError(
                f"dataset {self.name!r}: {self.height}x{self.width} images are not divisible by patch {patch}"
            )

    def to_json(self) -> dict:
        return {
            "name": self.name, "height": self.height, "width": self.width,
            "channels": self.channels, "classes": self.classes,
            "pixel_scale": self.pixel_scale, "splits": self.splits,
        }


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    raw = json.loads(path.read_text())
    return DatasetManifest(
        name=raw["name"], height=int(raw["height"]), width=int(raw["width"]),
        channels=int(raw["channels"]), classes=int(raw["classes"]), splits=raw["splits"],
        root=path.parent, pixel_scale=float(raw.get("pixel_scale", 1.0)),
    )


def load_dataset(manifest, split: str, patch: int | None = None) -> ImageBatch:
    """Load one split, rescale pixels to [0, 1] and validate against the manifest."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    if patch is not None:
        manifest.check_patch(patch)
    if split not in manifest.splits:
        raise KeyError(f"dataset {manifest.name!r} has no split {split!r}")
    info = manifest.splits[split]
    x = load_tensor(manifest.root / info["images"])
    y = load_tensor(manifest.root / info["labels"])
    expected = (int(info.get("count", len(x))),) + manifest.image_shape
    if x.shape != expected:
        raise ValueError(f"split {split!r}: images have dims {x.shape}, manifest says {expected}")
    if y.shape != (expected[0],):
        raise ValueError(f"split {split!r}: labels have dims {y.shape}, expected {(expected[0],)}")
    if manifest.pixel_scale != 1.0:
        x = x / np.float32(manifest.pixel_scale)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError(f"split {split!r}: pixels fall outside [0, 1] after scaling")
    labels = y.astype(np.int64)
    if (labels != y).any() or labels.min(initial=0) < 0 or labels.max(initial=0) >= manifest.classes:
        raise ValueError(f"split {split!r}: labels must be integers in [0, {manifest.classes})")
    return ImageBatch(x, labels)


def write_dataset(root, name: str, splits: dict[str, ImageBatch], classes: int) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    _, h, w, c = first.x.shape
    entries = {}
    for split, batch in splits.items():
        save_tensor(root / f"{split}_images.mten", batch.x)
        save_tensor(root / f"{split}_labels.mten", batch.y.astype(np.float32))
        entries[split] = {"images": f"{split}_images.mten", "labels": f"{split}_labels.mten",
                          "count": len(batch)}
    manifest = DatasetManifest(name, h, w, c, classes, entries, root)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# toy data and augmentation


def render_bars(labels: np.ndarray, classes: int, size: tuple[int, int, int],
                rng: np.random.Generator, contrast=(0.25, 0.45), background=(0.3, 0.5)) -> np.ndarray:
    """One anti-aliased bar per image; the class fixes the bar's orientation."""
    h, w, c = size
    n = len(labels)
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    angle = np.pi * labels / classes + rng.uniform(-0.15, 0.15, n)
    cy = rng.uniform(0.35 * h, 0.65 * h, n)
    cx = rng.uniform(0.35 * w, 0.65 * w, n)
    half_len = rng.uniform(0.3, 0.4, n) * min(h, w)
    width = rng.uniform(0.8, 1.3, n)
    amp = rng.uniform(*contrast, n) * rng.choice([-1.0, 1.0], n)
    base = rng.uniform(*background, n)
    dy, dx = np.sin(angle), np.cos(angle)
    ry = yy[None] - cy[:, None, None]
    rx = xx[None] - cx[:, None, None]
    along = ry * dy[:, None, None] + rx * dx[:, None, None]
    across = -ry * dx[:, None, None] + rx * dy[:, None, None]
    body = np.exp(-0.5 * (across / width[:, None, None]) ** 2)
    ends = 1.0 / (1.0 + np.exp((np.abs(along) - half_len[:, None, None]) * 2.0))
    img = base[:, None, None] + amp[:, None, None] * body * ends
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[..., None], c, axis=-1).astype(np.float32)


def render_stripes(labels: np.ndarray, classes: int, size: tuple[int, int, int],
                   rng: np.random.Generator, contrast=(0.1, 0.2), background=(0.35, 0.65)) -> np.ndarray:
    """Parallel soft bars filling the image; the class fixes their orientation."""
    h, w, c = size
    n = len(labels)
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    angle = np.pi * labels / classes + rng.uniform(-0.15, 0.15, n)
    period = rng.uniform(4.0, 7.0, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(*contrast, n)
    base = rng.uniform(*background, n)
    across = -yy[None] * np.cos(angle)[:, None, None] + xx[None] * np.sin(angle)[:, None, None]
    wave = np.sin(2 * np.pi * across / period[:, None, None] + phase[:, None, None])
    img = np.clip(base[:, None, None] + amp[:, None, None] * wave, 0.0, 1.0)
    return np.repeat(img[..., None], c, axis=-1).astype(np.float32)


PATTERNS = {"stripes": render_stripes, "bar": render_bars}


def synth_toy_dataset(classes: int = 2, n: int = 2000, dims=(16, 16, 1), seed: int = 0,
                      root=None, train_fraction: float = 0.8, name: str = "toy-bars",
                      pattern: str = "stripes", contrast: tuple[float, float] | None = None):
    """Balanced oriented-pattern dataset with an 80/20 train/test split.

    Returns ``{"train": ImageBatch, "test": ImageBatch}``; with ``root`` the
    splits are also written as MTEN1 files plus ``manifest.json``.
    """
    if n % classes:
        raise ValueError("n must be a multiple of the class count")
    rng = np.random.default_rng(seed)
    per_class = n // classes
    labels = np.repeat(np.arange(classes), per_class)
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {sorted(PATTERNS)}")
    extra = {} if contrast is None else {"contrast": tuple(contrast)}
    images = PATTERNS[pattern](labels, classes, tuple(dims), rng, **extra)
    train_idx, test_idx = [], []
    n_train = int(round(per_class * train_fraction))
    for k in range(classes):
        idx = rng.permutation(np.flatnonzero(labels == k))
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    splits = {
        "train": ImageBatch(images[train_idx], labels[train_idx]),
        "test": ImageBatch(images[test_idx], labels[test_idx]),
    }
    if root is not None:
        write_dataset(root, name, splits, classes)
    return splits


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and ``pad``-pixel zero-pad random crop, per image."""
    n, h, w, _ = x.shape
    flips = rng.random(n) < 0.5
    out = np.where(flips[:, None, None, None], x[:, :, ::-1], x)
    if pad == 0:
        return np.ascontiguousarray(out)
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    return np.stack([padded[i, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])
