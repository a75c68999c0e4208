"""Bag-of-Words Layer.

Every SFM owns a local fully connected bank mapping its h*w activations to
m visual words through a ReLU, so an image yields m*n words. Word
``c*m + j`` is word j of SFM c. Words are L2-normalized, then entries not
strictly above the learned threshold beta are dropped.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from e2bows import binio
from e2bows.backbone import glorot_uniform
from e2bows.errors import ArgumentError, DimensionError, FormatError
from e2bows.numerics import l2_normalize
from e2bows.sfm import SfmStack

WORD_DTYPE = np.float32
WORDS_HEADER = "# e2bows words"

log = logging.getLogger(__name__)


@dataclass
class BowlParams:
    weights: np.ndarray  # (n, h*w, m)
    biases: np.ndarray  # (n, m)
    beta: float = 0.0

    def __post_init__(self):
        n, _, m = self.weights.shape
        if self.biases.shape != (n, m):
            raise DimensionError(f"bank biases {self.biases.shape} do not match weights {self.weights.shape}")
        if self.beta < 0:
            raise ArgumentError(f"threshold must be non-negative, got {self.beta}")

    @property
    def sfm_count(self) -> int:
        return self.weights.shape[0]

    @property
    def words_per_sfm(self) -> int:
        return self.weights.shape[2]

    @property
    def dim(self) -> int:
        return self.sfm_count * self.words_per_sfm

    @property
    def weight_count(self) -> int:
        return self.weights.size


@dataclass
class BowlCache:
    params: BowlParams
    map_shape: Tuple[int, int]
    flat_maps: np.ndarray  # (..., n, h*w)
    pre: np.ndarray  # (..., n, m)
    mask: np.ndarray  # (..., n)


@dataclass
class VisualWordVector:
    dim: int
    word_ids: np.ndarray
    values: np.ndarray
    binary: bool = False

    def __post_init__(self):
        self.word_ids = np.asarray(self.word_ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=WORD_DTYPE)
        if self.word_ids.shape != self.values.shape or self.word_ids.ndim != 1:
            raise DimensionError("word ids and values must be equal-length vectors")
        if self.word_ids.size:
            if np.any(np.diff(self.word_ids) <= 0):
                raise ArgumentError("word ids must be strictly increasing")
            if self.word_ids[0] < 0 or self.word_ids[-1] >= self.dim:
                raise DimensionError(f"word id outside [0, {self.dim})")
            if np.any(self.values <= 0):
                raise ArgumentError("stored word values must be strictly positive")
            if self.binary and np.any(self.values != 1):
                raise ArgumentError("binary vectors hold only ones")

    def __len__(self) -> int:
        return int(self.word_ids.size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        dense[self.word_ids] = self.values
        return dense

    def __eq__(self, other) -> bool:
        if not isinstance(other, VisualWordVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.binary == other.binary
            and np.array_equal(self.word_ids, other.word_ids)
            and np.array_equal(self.values, other.values)
        )


def init_bowl(rng: np.random.Generator, sfm_count: int, map_size: int, words_per_sfm: int, beta: float = 0.0) -> BowlParams:
    if words_per_sfm < 1:
        raise ArgumentError("at least one word per SFM is required")
    weights = glorot_uniform(rng, (sfm_count, map_size, words_per_sfm), map_size, words_per_sfm)
    return BowlParams(weights, np.zeros((sfm_count, words_per_sfm)), beta)


def bowl_forward(s: SfmStack, mask: np.ndarray, p: BowlParams) -> Tuple[np.ndarray, BowlCache]:
    maps = s.maps
    n, h, w = maps.shape[-3:]
    if n != p.sfm_count or h * w != p.weights.shape[1]:
        raise DimensionError(f"SFM stack {maps.shape[-3:]} does not fit banks {p.weights.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != maps.shape[:-2]:
        raise DimensionError(f"mask shape {mask.shape} does not match {maps.shape[:-2]}")

    flat = maps.reshape(maps.shape[:-2] + (h * w,))
    pre = np.einsum("...nk,nkm->...nm", flat, p.weights) + p.biases
    raw = np.maximum(pre, 0.0) * mask[..., None]
    cache = BowlCache(p, (h, w), flat, pre, mask)
    return raw.reshape(raw.shape[:-2] + (p.dim,)), cache


def bowl_backward(cache: BowlCache, grad_raw: np.ndarray) -> Tuple[BowlParams, np.ndarray]:
    """Exact gradients of the local banks; masked-off SFMs receive zeros.

    The returned ``BowlParams`` carries weight/bias gradients summed over the
    batch with ``beta`` left at 0: beta is learned through the sparsity loss only.
    """
    p = cache.params
    expected = cache.pre.shape[:-2] + (p.dim,)
    if np.shape(grad_raw) != expected:
        raise DimensionError(f"word gradient {np.shape(grad_raw)} does not match {expected}")
    grad = np.asarray(grad_raw, dtype=np.float64).reshape(cache.pre.shape)
    grad_pre = grad * (cache.pre > 0) * cache.mask[..., None]

    n, k, m = p.weights.shape
    flat_grad = grad_pre.reshape(-1, n, m)
    flat_maps = cache.flat_maps.reshape(-1, n, k)
    grad_weights = np.einsum("bnk,bnm->nkm", flat_maps, flat_grad)
    grad_biases = flat_grad.sum(axis=0)

    grad_maps = np.einsum("...nm,nkm->...nk", grad_pre, p.weights)
    grad_maps = grad_maps.reshape(grad_maps.shape[:-1] + cache.map_shape)
    return BowlParams(grad_weights, grad_biases, 0.0), grad_maps


def normalized_words(raw: np.ndarray) -> np.ndarray:
    """Un-thresholded L2-normalized words, the form the training losses consume."""
    return l2_normalize(raw)


def words_postprocess(raw: np.ndarray, beta: float) -> VisualWordVector:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1:
        raise DimensionError(f"expected one word tensor, got shape {raw.shape}")
    v = l2_normalize(raw)
    word_ids = np.flatnonzero(v > beta)
    values = v[word_ids].astype(WORD_DTYPE)
    # float32 can flush a vanishing word to zero; zeros are never stored
    keep = values > 0
    return VisualWordVector(raw.size, word_ids[keep], values[keep])


def binarize(v: VisualWordVector) -> VisualWordVector:
    return VisualWordVector(v.dim, v.word_ids.copy(), np.ones(len(v), dtype=WORD_DTYPE), binary=True)


def sparsity_ratio(batch: np.ndarray, beta: float) -> float:
    """Fraction of words strictly above ``beta`` over a batch of normalized word tensors."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ArgumentError("sparsity ratio needs at least one image")
    if batch.ndim == 1:
        batch = batch[None]
    return float(np.count_nonzero(batch > beta)) / batch.size


def extract_words(raw_batch: np.ndarray, beta: float, binary: bool = False) -> List[VisualWordVector]:
    vectors = [words_postprocess(raw, beta) for raw in np.asarray(raw_batch)]
    if binary:
        vectors = [binarize(v) for v in vectors]
    return vectors


def write_words_file(path, records: Sequence[Tuple[int, VisualWordVector]], dim: Optional[int] = None) -> None:
    """Write one ``image_id K id:val ...`` line per image under a comment header."""
    if dim is None:
        dim = records[0][1].dim if records else 0
    for image_id, v in records:
        if v.dim != dim:
            raise DimensionError(f"image {image_id} has dimension {v.dim}, file holds {dim}")
    binary = bool(records) and all(v.binary for _, v in records)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{WORDS_HEADER} dim={dim} binary={int(binary)}\n")
        for image_id, v in records:
            entries = " ".join(
                f"{word}:1" if v.binary else f"{word}:{value:.9g}"
                for word, value in zip(v.word_ids.tolist(), v.values.tolist())
            )
            fh.write(f"{image_id} {len(v)} {entries}".rstrip() + "\n")
    log.info(f"Wrote {len(records)} word vectors to {path}")


def _parse_header(line: str) -> Tuple[Optional[int], bool]:
    fields = dict(part.split("=", 1) for part in line[len(WORDS_HEADER):].split() if "=" in part)
    dim = int(fields["dim"]) if "dim" in fields else None
    return dim, fields.get("binary", "0") == "1"


def read_words_file(path, dim: Optional[int] = None) -> List[Tuple[int, VisualWordVector]]:
    return parse_words_lines(binio.read_text_lines(path, "words file"), dim)


def parse_words_lines(lines: Iterable[str], dim: Optional[int] = None) -> List[Tuple[int, VisualWordVector]]:
    binary = False
    parsed = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith(WORDS_HEADER):
            file_dim, binary = _parse_header(line)
            if dim is None:
                dim = file_dim
            elif file_dim is not None and file_dim != dim:
                raise FormatError(f"file dimension {file_dim} differs from requested {dim}", offset=number)
            continue
        if line.startswith("#"):
            continue
        try:
            fields = line.split()
            image_id, count = int(fields[0]), int(fields[1])
            pairs = [entry.split(":", 1) for entry in fields[2:]]
            word_ids = [int(word) for word, _ in pairs]
            values = [float(value) for _, value in pairs]
        except (IndexError, ValueError):
            raise FormatError(f"malformed words line {line!r}", offset=number)
        if count != len(pairs):
            raise FormatError(f"line declares {count} entries but holds {len(pairs)}", offset=number)
        parsed.append((number, image_id, word_ids, values))

    if dim is None:
        dim = max((max(ids) + 1 for _, _, ids, _ in parsed if ids), default=0)

    records = []
    for number, image_id, word_ids, values in parsed:
        try:
            records.append((image_id, VisualWordVector(dim, word_ids, values, binary=binary)))
        except (ArgumentError, DimensionError) as e:
            raise FormatError(str(e), offset=number)
    return records
