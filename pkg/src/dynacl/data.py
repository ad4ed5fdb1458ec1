"""Dataset ingestion: CIFAR-10 binary batches, npz tensor containers and
synthetic blob images, each described by a hashable manifest."""
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import ImageBatch
from .errors import ConfigError, DataError

CIFAR_RECORDS = 10000
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")


def data_root() -> Optional[Path]:
    root = os.environ.get("DYNACL_DATA_DIR")
    return Path(root) if root else None


def resolve_path(path) -> Path:
    """Relative paths are taken against ``$DYNACL_DATA_DIR`` when it is set."""
    p = Path(path)
    root = data_root()
    if root is not None and not p.is_absolute():
        return root / p
    return p


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def parse_cifar10_batch(raw: bytes, name: str = "<bytes>", records: int = CIFAR_RECORDS) -> ImageBatch:
    """Decode records of 1 label byte + 3072 channel-planar pixel bytes."""
    expected = records * CIFAR_RECORD_BYTES
    if len(raw) != expected:
        raise DataError(f"{name}: expected {expected} bytes ({records} records), found {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(records, CIFAR_RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DataError(f"{name}: record {bad} has label byte {labels[bad]} (must be < 10)")
    pixels = arr[:, 1:].reshape(records, 3, 32, 32).astype(np.float32) / 255.0
    return ImageBatch(pixels, labels, num_classes=10)


def serialize_cifar10_batch(batch: ImageBatch) -> bytes:
    pixels = np.rint(np.asarray(batch.data, dtype=np.float64) * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DataError("pixel values must lie in [0, 1]")
    n = len(batch)
    out = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = batch.labels
    out[:, 1:] = pixels.reshape(n, -1).astype(np.uint8)
    return out.tobytes()


def _locate_cifar_dir(path: Path) -> Path:
    for cand in (path, path / "cifar-10-batches-bin"):
        if (cand / CIFAR_TEST_FILE).exists() or (cand / CIFAR_TRAIN_FILES[0]).exists():
            return cand
    raise DataError(f"no CIFAR-10 binary batches under {path}")


def load_cifar10_binary(path) -> tuple[ImageBatch, ImageBatch]:
    """``(train, test)`` with shapes (50000, 3, 32, 32) and (10000, 3, 32, 32)."""
    root = _locate_cifar_dir(resolve_path(path))
    parts = []
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        f = root / name
        if not f.is_file():
            raise DataError(f"missing CIFAR-10 batch file {f}")
        parts.append(parse_cifar10_batch(f.read_bytes(), name=str(f)))
    train = ImageBatch(np.concatenate([p.data for p in parts[:5]]),
                       np.concatenate([p.labels for p in parts[:5]]), num_classes=10)
    return train, parts[5]


def write_cifar10_binary(train: ImageBatch, test: ImageBatch, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if len(train) != 5 * CIFAR_RECORDS or len(test) != CIFAR_RECORDS:
        raise DataError("CIFAR-10 layout needs 50000 training and 10000 test records")
    for i, name in enumerate(CIFAR_TRAIN_FILES):
        sl = slice(i * CIFAR_RECORDS, (i + 1) * CIFAR_RECORDS)
        (root / name).write_bytes(serialize_cifar10_batch(train.subset(sl)))
    (root / CIFAR_TEST_FILE).write_bytes(serialize_cifar10_batch(test))
    return root


# ---------------------------------------------------------------------------
# synthetic blob images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Class-conditional Gaussian bumps.

    Each image holds one bump whose centre is drawn around a class-specific
    anchor; anchors sit on a circle with ``cluster_separation * position_sigma``
    pixels between neighbours.
    """

    classes: int = 2
    per_class: int = 256
    image_size: int = 32
    cluster_separation: float = 10.0
    seed: int = 0
    position_sigma: Optional[float] = None
    bump_width: Optional[float] = None
    pixel_noise: float = 0.0
    channels: int = 3

    def __post_init__(self):
        if self.classes < 1 or self.per_class < 1 or self.image_size < 2:
            raise ConfigError(f"invalid synthetic spec: {self}")
        if self.cluster_separation < 0:
            raise ConfigError("cluster_separation must be >= 0")


def synth_dataset(spec: SynthSpec) -> ImageBatch:
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    sigma = spec.position_sigma if spec.position_sigma is not None else size / 40
    width = spec.bump_width if spec.bump_width is not None else size / 6
    k = spec.classes
    gap = spec.cluster_separation * sigma
    radius = 0.0 if k == 1 else gap / (2 * math.sin(math.pi / k))
    centre = (size - 1) / 2
    # first anchor straight above the centre keeps two-class sets flip-invariant
    angles = math.pi / 2 + 2 * math.pi * np.arange(k) / k
    anchors = np.stack([centre - radius * np.sin(angles), centre + radius * np.cos(angles)], 1)

    labels = np.repeat(np.arange(k), spec.per_class)
    pos = anchors[labels] + sigma * rng.standard_normal((len(labels), 2))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (yy[None] - pos[:, 0, None, None]) ** 2 + (xx[None] - pos[:, 1, None, None]) ** 2
    bump = 0.15 + 0.7 * np.exp(-d2 / (2 * width ** 2))
    tint = np.linspace(1.0, 0.8, spec.channels)[None, :, None, None]
    imgs = bump[:, None] * tint
    if spec.pixel_noise > 0:
        imgs = imgs + spec.pixel_noise * rng.standard_normal(imgs.shape)
    imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(len(labels))
    return ImageBatch(imgs[order], labels[order], num_classes=k)


# ---------------------------------------------------------------------------
# tensor container + manifests
# ---------------------------------------------------------------------------


def save_tensor_container(batch: ImageBatch, path) -> Path:
    path = Path(path)
    np.savez(path, images=batch.data, labels=batch.labels if batch.labels is not None else np.zeros(0),
             num_classes=np.int64(batch.num_classes or 0))
    return path


def load_tensor_container(path) -> ImageBatch:
    path = resolve_path(path)
    if not path.is_file():
        raise DataError(f"tensor container not found: {path}")
    try:
        with np.load(path) as z:
            images, labels = z["images"], z["labels"]
            k = int(z["num_classes"]) if "num_classes" in z else None
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"cannot read tensor container {path}: {exc}") from exc
    return ImageBatch(images, labels if labels.size else None, num_classes=k or None)


def content_hash(batch: ImageBatch) -> str:
    h = hashlib.sha256()
    h.update(str(batch.data.shape).encode())
    h.update(np.ascontiguousarray(batch.data, dtype=np.float32).tobytes())
    if batch.labels is not None:
        h.update(np.ascontiguousarray(batch.labels, dtype=np.int64).tobytes())
    return h.hexdigest()


@dataclass
class DatasetManifest:
    name: str
    source: str
    format: str
    split: str
    content_hash: str
    num_classes: int
    shape: tuple

    def to_json(self) -> str:
        d = asdict(self)
        d["shape"] = list(d["shape"])
        return json.dumps(d, sort_keys=True)


def make_manifest(batch: ImageBatch, name: str, source: str, fmt: str, split: str) -> DatasetManifest:
    return DatasetManifest(name, source, fmt, split, content_hash(batch),
                           int(batch.num_classes or 0), tuple(batch.data.shape))


def verify_manifest(batch: ImageBatch, manifest: DatasetManifest) -> None:
    if tuple(batch.data.shape[1:]) != tuple(manifest.shape[1:]):
        raise DataError(f"image shape {batch.data.shape[1:]} != manifest {tuple(manifest.shape[1:])}")
    actual = content_hash(batch)
    if actual != manifest.content_hash:
        raise DataError(f"dataset {manifest.name}: content hash {actual[:12]} does not match "
                        f"manifest {manifest.content_hash[:12]}")


def stratified_subset(batch: ImageBatch, per_class: int, seed: int = 0) -> ImageBatch:
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(batch.num_classes):
        idx = np.flatnonzero(batch.labels == c)
        keep.append(rng.permutation(idx)[:per_class])
    keep = np.sort(np.concatenate(keep))
    return batch.subset(keep)
