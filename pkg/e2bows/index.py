"""Inverted file over sparse visual-word vectors.

Postings live in a ``scipy.sparse.csc_matrix`` with one row per image
(rows ordered by ascending image id) and one column per word, so column
j *is* the posting list of word j, sorted by image id. Posting values are
float32; scores accumulate in float64.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np
from scipy.sparse import csc_matrix

from e2bows import binio
from e2bows.bowl import VisualWordVector
from e2bows.errors import ArgumentError, DimensionError, FormatError

INDEX_MAGIC = b"E2IX"
POSTING_DTYPE = np.dtype([("image_id", "<u8"), ("value", "<f4")])

log = logging.getLogger(__name__)


@dataclass
class InvertedIndex:
    dim: int
    image_ids: np.ndarray  # (image_count,) uint64, ascending
    matrix: csc_matrix  # (image_count, dim) float32
    nonzero_counts: np.ndarray  # (image_count,)

    @property
    def image_count(self) -> int:
        return int(self.image_ids.size)

    def postings(self, word_id: int) -> List[Tuple[int, float]]:
        start, end = self.matrix.indptr[word_id], self.matrix.indptr[word_id + 1]
        rows = self.matrix.indices[start:end]
        return list(zip(self.image_ids[rows].tolist(), self.matrix.data[start:end].tolist()))

    def posting_lengths(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def vectors(self) -> List[Tuple[int, VisualWordVector]]:
        """Per-image vectors rebuilt from the postings."""
        rows = self.matrix.tocsr()
        rows.sort_indices()
        out = []
        for position, image_id in enumerate(self.image_ids.tolist()):
            start, end = rows.indptr[position], rows.indptr[position + 1]
            out.append((image_id, VisualWordVector(self.dim, rows.indices[start:end], rows.data[start:end])))
        return out


@dataclass(frozen=True)
class IndexStats:
    anv: float
    ani: float
    ano: float
    image_count: int = 0
    nonempty_lists: int = 0
    total_postings: int = 0


@dataclass
class QueryResult:
    hits: List[Tuple[int, float]]
    touched: int

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)


def _from_arrays(dim: int, image_ids: np.ndarray, rows: np.ndarray, cols: np.ndarray, values: np.ndarray) -> InvertedIndex:
    matrix = csc_matrix(
        (values.astype(np.float32), (rows, cols)),
        shape=(image_ids.size, dim),
        dtype=np.float32,
    )
    matrix.sort_indices()
    counts = np.bincount(rows, minlength=image_ids.size) if rows.size else np.zeros(image_ids.size, dtype=np.int64)
    return InvertedIndex(dim, image_ids, matrix, counts)


def build_index(vectors: Iterable[Tuple[int, VisualWordVector]], dim: int) -> InvertedIndex:
    """
    Build the inverted index of a set of word vectors.

    Args:
        vectors: (image_id, vector) pairs with unique ids, in any order.
        dim: Word vocabulary size every vector must share.

    Returns:
        An index whose posting lists hold images in ascending id order
    """
    vectors = list(vectors)
    ids = np.array([int(image_id) for image_id, _ in vectors], dtype=np.uint64)
    if np.unique(ids).size != ids.size:
        raise ArgumentError("duplicate image id in index input")
    for image_id, v in vectors:
        if v.dim != dim:
            raise DimensionError(f"image {image_id} has dimension {v.dim}, index has {dim}")

    order = np.argsort(ids, kind="stable")
    position = np.empty_like(order)
    position[order] = np.arange(order.size)
    rows = np.concatenate([np.full(len(v), position[i]) for i, (_, v) in enumerate(vectors)] or [np.zeros(0, dtype=np.int64)])
    cols = np.concatenate([v.word_ids for _, v in vectors] or [np.zeros(0, dtype=np.int64)])
    values = np.concatenate([v.values for _, v in vectors] or [np.zeros(0, dtype=np.float32)])
    index = _from_arrays(dim, ids[order], rows.astype(np.int64), cols.astype(np.int64), values)
    log.info(f"Indexed {index.image_count} images, {index.matrix.nnz} postings over {dim} words")
    return index


def query(index: InvertedIndex, q: VisualWordVector, k: int) -> QueryResult:
    """
    Top-k images by accumulated dot product, walking only q's posting lists.

    Zero-score images are never returned; ties go to the smaller image id.

    Args:
        index: Index to search.
        q: Query word vector of the index dimension.
        k: Maximum number of hits.

    Returns:
        The hits with their scores, and ``touched``, the count of every
        posting entry visited
    """
    if k < 1:
        raise ArgumentError("k must be at least 1")
    if q.dim != index.dim:
        raise DimensionError(f"query dimension {q.dim} does not match index dimension {index.dim}")

    indptr, indices, data = index.matrix.indptr, index.matrix.indices, index.matrix.data
    scores = np.zeros(index.image_count)
    touched = 0
    for word, weight in zip(q.word_ids.tolist(), q.values.tolist()):
        start, end = indptr[word], indptr[word + 1]
        scores[indices[start:end]] += weight * data[start:end].astype(np.float64)
        touched += int(end - start)

    positive = np.flatnonzero(scores > 0)
    order = np.lexsort((index.image_ids[positive], -scores[positive]))[:k]
    picked = positive[order]
    hits = list(zip(index.image_ids[picked].tolist(), scores[picked].tolist()))
    return QueryResult(hits, touched)


def index_stats(index: InvertedIndex) -> IndexStats:
    if index.image_count == 0:
        raise ArgumentError("statistics need at least one indexed image")
    lengths = index.posting_lengths()
    total = int(lengths.sum())
    nonempty = int(np.count_nonzero(lengths))
    anv = float(index.nonzero_counts.sum()) / index.image_count
    ani = total / nonempty if nonempty else 0.0
    return IndexStats(anv, ani, anv * ani, index.image_count, nonempty, total)


def linear_scan_ops(image_count: int, code_bits: int) -> int:
    """Operations of an exhaustive Hamming scan over ``code_bits``-bit codes."""
    return image_count * code_bits


def save_index(index: InvertedIndex, path) -> None:
    lengths = index.posting_lengths()
    with open(path, "wb") as fh:
        binio.write_header(fh, INDEX_MAGIC)
        fh.write(binio.pack("II", index.dim, index.image_count))
        for word in range(index.dim):
            start, end = index.matrix.indptr[word], index.matrix.indptr[word + 1]
            postings = np.empty(end - start, dtype=POSTING_DTYPE)
            postings["image_id"] = index.image_ids[index.matrix.indices[start:end]]
            postings["value"] = index.matrix.data[start:end]
            fh.write(binio.pack("I", int(lengths[word])))
            fh.write(postings.tobytes())
        # images without words appear in no list; their ids close the file
        fh.write(index.image_ids[index.nonzero_counts == 0].astype("<u8").tobytes())
    log.info(f"Saved index of {index.image_count} images to {path}")


def load_index(path) -> InvertedIndex:
    reader = binio.BinaryReader(binio.read_file(path), name="index file")
    reader.expect_magic(INDEX_MAGIC)
    dim, image_count = reader.unpack("II")

    lists = []
    for word in range(dim):
        list_offset = reader.offset
        postings = reader.array(POSTING_DTYPE, reader.u32())
        if postings.size > 1 and np.any(np.diff(postings["image_id"].astype(np.int64)) <= 0):
            raise FormatError(f"posting list of word {word} is not sorted by image id", offset=list_offset)
        if np.any(postings["value"] <= 0):
            raise FormatError(f"posting list of word {word} stores a non-positive value", offset=list_offset)
        lists.append(postings)

    seen = np.unique(np.concatenate([p["image_id"] for p in lists] or [np.zeros(0, dtype=np.uint64)]))
    missing = image_count - seen.size
    if missing < 0:
        raise FormatError(f"postings name {seen.size} images, header declares {image_count}", offset=12)
    empty_ids = reader.array("<u8", missing)
    reader.expect_end()

    image_ids = np.union1d(seen, empty_ids).astype(np.uint64)
    if image_ids.size != image_count:
        raise FormatError("image ids repeat between postings and trailer", offset=reader.offset)
    rows = np.concatenate([np.searchsorted(image_ids, p["image_id"]) for p in lists] or [np.zeros(0, dtype=np.int64)])
    cols = np.concatenate([np.full(p.size, word) for word, p in enumerate(lists)] or [np.zeros(0, dtype=np.int64)])
    values = np.concatenate([p["value"] for p in lists] or [np.zeros(0, dtype=np.float32)])
    return _from_arrays(dim, image_ids, rows.astype(np.int64), cols.astype(np.int64), values)
