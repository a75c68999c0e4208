"""Image datasets: synthetic colour blobs, CIFAR binary batches and the E2DS file."""
import colorsys
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from e2bows import binio
from e2bows.errors import ArgumentError, DimensionError, FormatError
from e2bows.losses import CategoryTree

DATASET_MAGIC = b"E2DS"
CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
# label bytes ahead of the pixels, and which of them is kept
CIFAR_VARIANTS = {"cifar10": (1, 0, 10), "cifar100": (2, 1, 100)}
DEFAULT_JITTER = 0.6
BLOB_WIDTH = 1.0 / 8.0

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    ids: np.ndarray  # (N,) uint64
    images: np.ndarray  # (N, h, w, c) in [0, 1]
    label_sets: Sequence[Tuple[int, ...]]
    class_count: int
    tree: Optional[CategoryTree] = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.images = np.asarray(self.images, dtype=np.float64)
        self.label_sets = [tuple(int(label) for label in labels) for labels in self.label_sets]
        if self.images.ndim != 4:
            raise DimensionError(f"images must be stacked (N, h, w, c), got {self.images.shape}")
        if not self.ids.size == self.images.shape[0] == len(self.label_sets):
            raise DimensionError("ids, images and labels differ in length")
        if np.unique(self.ids).size != self.ids.size:
            raise ArgumentError("image ids must be unique")
        for image_id, labels in zip(self.ids.tolist(), self.label_sets):
            if not labels:
                raise ArgumentError(f"image {image_id} has no label")
            if min(labels) < 0 or max(labels) >= self.class_count:
                raise ArgumentError(f"image {image_id} has a label outside [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def labels(self) -> np.ndarray:
        """Primary (first) label of every image."""
        return np.array([labels[0] for labels in self.label_sets], dtype=np.int64)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def label_map(self) -> Dict[int, Tuple[int, ...]]:
        return dict(zip(self.ids.tolist(), self.label_sets))

    def position(self, image_id: int) -> int:
        found = np.flatnonzero(self.ids == np.uint64(image_id))
        if not found.size:
            raise ArgumentError(f"image {image_id} is not in the dataset")
        return int(found[0])


@dataclass(frozen=True)
class SyntheticConfig:
    class_count: int = 10
    images_per_class: int = 60
    image_size: int = 32
    noise_sigma: float = 0.1
    rng_seed: int = 7
    labels_per_image: int = 1
    id_offset: int = 0
    position_jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.class_count < 2:
            raise ArgumentError("synthetic data needs at least two classes")
        if self.images_per_class < 1 or self.image_size < 1:
            raise ArgumentError("image count and size must be positive")
        if self.noise_sigma < 0:
            raise ArgumentError("noise sigma must be non-negative")
        if not 1 <= self.labels_per_image <= self.class_count:
            raise ArgumentError(f"labels per image must lie in [1, {self.class_count}]")
        if self.id_offset < 0:
            raise ArgumentError("id offset must be non-negative")
        if not 0 <= self.position_jitter <= 1:
            raise ArgumentError("position jitter must lie in [0, 1]")

    @property
    def max_shift(self) -> int:
        """Largest blob displacement in pixels along either axis."""
        return int(round(self.position_jitter * self.image_size / 2))


def class_template(class_index: int, class_count: int, size: int, shift: Tuple[int, int] = (0, 0)) -> np.ndarray:
    """Gaussian blob in the hue of ``class_index``, centred and moved by ``shift`` pixels."""
    red, green, blue = colorsys.hsv_to_rgb(class_index / class_count, 1.0, 1.0)
    centre = (size - 1) / 2 + np.asarray(shift, dtype=np.float64)
    rows, cols = np.mgrid[0:size, 0:size]
    distance = (rows - centre[0]) ** 2 + (cols - centre[1]) ** 2
    blob = np.exp(-distance / (2 * (BLOB_WIDTH * size) ** 2))
    return blob[..., None] * np.array([red, green, blue])


def gen_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Class-major synthetic dataset; ids run from ``cfg.id_offset``.

    A class is a hue. Each image places the blob of its primary class,
    plus blobs of ``labels_per_image - 1`` other classes drawn at random,
    at integer shifts drawn uniformly from ``[-max_shift, max_shift]``,
    then adds Gaussian pixel noise and clips to [0, 1]. Position carries no
    class information, so features that ignore colour cannot rank by class.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    count = cfg.class_count * cfg.images_per_class
    images = np.empty((count, cfg.image_size, cfg.image_size, 3))
    label_sets = []
    for i in range(count):
        primary = i // cfg.images_per_class
        others = [c for c in range(cfg.class_count) if c != primary]
        extra = rng.choice(others, size=cfg.labels_per_image - 1, replace=False).tolist() if cfg.labels_per_image > 1 else []
        labels = (primary, *sorted(extra))
        shifts = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=(len(labels), 2))
        blobs = [class_template(c, cfg.class_count, cfg.image_size, tuple(s)) for c, s in zip(labels, shifts.tolist())]
        image = np.clip(np.sum(blobs, axis=0), 0.0, 1.0)
        if cfg.noise_sigma > 0:
            image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
        images[i] = np.clip(image, 0.0, 1.0)
        label_sets.append(labels)
    ids = np.arange(cfg.id_offset, cfg.id_offset + count, dtype=np.uint64)
    log.info(f"Generated {count} synthetic images over {cfg.class_count} classes (seed {cfg.rng_seed})")
    return Dataset(ids, images, label_sets, cfg.class_count)


def read_cifar(path, variant: str = "cifar10") -> Dataset:
    """Parse a CIFAR binary batch; pixels are scaled by 1/255 into (32, 32, 3)."""
    if variant not in CIFAR_VARIANTS:
        raise ArgumentError(f"unknown CIFAR variant {variant!r}, expected one of {sorted(CIFAR_VARIANTS)}")
    label_bytes, kept_label, class_count = CIFAR_VARIANTS[variant]
    record = label_bytes + CIFAR_PIXELS
    data = binio.read_file(path)
    if len(data) % record:
        raise FormatError(
            f"{variant} file size {len(data)} is not a multiple of the {record}-byte record",
            offset=len(data) - len(data) % record,
        )

    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = records[:, kept_label].astype(np.int64)
    if labels.size and labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise FormatError(f"label {labels[bad]} outside [0, {class_count})", offset=bad * record + kept_label)
    planar = records[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planar.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    log.info(f"Read {labels.size} {variant} images from {path}")
    return Dataset(np.arange(labels.size, dtype=np.uint64), images, [(label,) for label in labels.tolist()], class_count)


def save_dataset(dataset: Dataset, path) -> None:
    h, w, c = dataset.image_shape
    with open(path, "wb") as fh:
        binio.write_header(fh, DATASET_MAGIC)
        fh.write(binio.pack("5I", len(dataset), h, w, c, dataset.class_count))
        for image_id, image, labels in zip(dataset.ids.tolist(), dataset.images, dataset.label_sets):
            fh.write(binio.pack("QI", image_id, len(labels)))
            fh.write(binio.pack(f"{len(labels)}I", *labels))
            fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())
    log.info(f"Saved {len(dataset)} images to {path}")


def load_dataset(path, tree: Optional[CategoryTree] = None) -> Dataset:
    reader = binio.BinaryReader(binio.read_file(path), name="dataset file")
    reader.expect_magic(DATASET_MAGIC)
    count, h, w, c, class_count = reader.unpack("5I")
    pixels = h * w * c
    ids = np.empty(count, dtype=np.uint64)
    images = np.empty((count, h, w, c))
    label_sets = []
    for i in range(count):
        start = reader.offset
        ids[i] = reader.u64()
        labels = reader.unpack(f"{reader.u32()}I")
        if not labels or max(labels) >= class_count:
            raise FormatError(f"record {i} has labels {labels} outside [0, {class_count})", offset=start)
        label_sets.append(labels)
        images[i] = reader.array("<f4", pixels).reshape(h, w, c)
    reader.expect_end()
    try:
        return Dataset(ids, images, label_sets, class_count, tree)
    except (ArgumentError, DimensionError) as e:
        raise FormatError(f"inconsistent dataset file: {e}")
