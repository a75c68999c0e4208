"""Tests for the inverted index: construction, queries, statistics and the E2IX file."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

import e2bows.index as index
from e2bows.bowl import VisualWordVector, extract_words
from e2bows.errors import ArgumentError, DimensionError, FormatError
from e2bows.evaluation import brute_force_rank


def _vec(dim, words, binary=False):
    ids = sorted(words)
    return VisualWordVector(dim, ids, [words[i] for i in ids], binary=binary)


def _small_index():
    return index.build_index(
        [
            (7, _vec(6, {0: 0.5, 2: 0.25})),
            (3, _vec(6, {0: 0.5, 5: 1.0})),
            (9, _vec(6, {2: 1.0})),
            (4, _vec(6, {})),
        ],
        dim=6,
    )


def _random_vectors(rng, count, dim, density, first_id=0):
    raw = rng.random((count, dim)) * (rng.random((count, dim)) < density)
    return list(zip(range(first_id, first_id + count), extract_words(raw, 0.0, binary=False)))


def test_postings_sorted_by_image_id():
    idx = _small_index()
    assert idx.image_ids.tolist() == [3, 4, 7, 9]
    assert idx.postings(0) == [(3, 0.5), (7, 0.5)]
    assert idx.postings(2) == [(7, 0.25), (9, 1.0)]
    assert idx.postings(1) == []
    assert idx.posting_lengths().tolist() == [2, 0, 2, 0, 0, 1]
    assert idx.nonzero_counts.tolist() == [2, 0, 2, 1]


def test_query_scores_and_tie_break():
    idx = _small_index()
    result = index.query(idx, _vec(6, {0: 1.0, 2: 1.0}), k=10)
    assert result.hits == [(9, 1.0), (7, 0.75), (3, 0.5)]
    assert result.touched == 4

    tied = index.query(idx, _vec(6, {0: 1.0}), k=10)
    assert [image_id for image_id, _ in tied] == [3, 7]


def test_query_truncates_to_k_and_skips_zero_scores():
    idx = _small_index()
    result = index.query(idx, _vec(6, {0: 1.0, 2: 1.0}), k=2)
    assert len(result) == 2
    assert index.query(idx, _vec(6, {1: 1.0}), k=5).hits == []
    assert index.query(idx, _vec(6, {}), k=5).touched == 0


def test_query_argument_errors():
    idx = _small_index()
    with pytest.raises(ArgumentError):
        index.query(idx, _vec(6, {0: 1.0}), k=0)
    with pytest.raises(DimensionError):
        index.query(idx, _vec(7, {0: 1.0}), k=1)


def test_build_rejects_bad_input():
    with pytest.raises(ArgumentError):
        index.build_index([(1, _vec(4, {0: 1.0})), (1, _vec(4, {1: 1.0}))], dim=4)
    with pytest.raises(DimensionError):
        index.build_index([(1, _vec(5, {0: 1.0}))], dim=4)


def test_vectors_rebuilt_from_postings():
    source = dict([(7, _vec(6, {0: 0.5, 2: 0.25})), (4, _vec(6, {}))])
    idx = index.build_index(source.items(), dim=6)
    assert dict(idx.vectors()) == source


def test_query_matches_dense_oracle():
    rng = np.random.default_rng(0)
    database = _random_vectors(rng, 1000, 1000, 0.015)
    queries = _random_vectors(rng, 100, 1000, 0.015, first_id=5000)
    idx = index.build_index(database, dim=1000)
    dense = [(image_id, v.to_dense().astype(np.float32).astype(np.float64)) for image_id, v in database]
    for _, q in queries:
        result = index.query(idx, q, k=20)
        expected = [(image_id, score) for image_id, score in brute_force_rank(dense, q.to_dense()) if score > 0][:20]
        assert [image_id for image_id, _ in result] == [image_id for image_id, _ in expected]
        assert_allclose([s for _, s in result], [s for _, s in expected], rtol=1e-9)
        words = set(q.word_ids.tolist())
        assert result.touched == sum(len(idx.postings(w)) for w in words)


def test_binary_scores_count_shared_words():
    a = _vec(8, {1: 1.0, 3: 1.0, 4: 1.0}, binary=True)
    b = _vec(8, {3: 1.0, 4: 1.0, 6: 1.0}, binary=True)
    idx = index.build_index([(1, a), (2, b)], dim=8)
    result = index.query(idx, _vec(8, {3: 1.0, 4: 1.0, 6: 1.0}, binary=True), k=2)
    assert result.hits == [(2, 3.0), (1, 2.0)]


def test_touched_postings_fall_as_threshold_rises():
    rng = np.random.default_rng(1)
    raw = np.maximum(rng.normal(size=(80, 60)), 0.0)
    touched = []
    for beta in (0.0, 0.05, 0.1, 0.2):
        vectors = extract_words(raw, beta, binary=False)
        idx = index.build_index(enumerate(vectors[:60]), dim=60)
        touched.append(sum(index.query(idx, q, k=10).touched for q in vectors[60:]))
    assert touched == sorted(touched, reverse=True)
    assert touched[-1] < touched[0]


def test_stats_of_identical_images():
    words = {w: 1.0 for w in range(15)}
    idx = index.build_index([(i, _vec(40, words)) for i in range(150)], dim=40)
    stats = index.index_stats(idx)
    assert stats.anv == 15
    assert stats.ani == 150
    assert stats.ano == 2250
    assert (stats.nonempty_lists, stats.total_postings) == (15, 2250)


def test_stats_single_image_and_empty_images():
    single = index.index_stats(index.build_index([(0, _vec(10, {1: 0.2, 4: 0.3, 8: 0.9}))], dim=10))
    assert (single.anv, single.ani, single.ano) == (3.0, 1.0, 3.0)

    stats = index.index_stats(_small_index())
    assert stats.anv == pytest.approx(5 / 4)
    assert stats.ani == pytest.approx(5 / 3)
    assert stats.ano == pytest.approx(25 / 12)

    blank = index.index_stats(index.build_index([(0, _vec(4, {}))], dim=4))
    assert (blank.anv, blank.ani, blank.ano) == (0.0, 0.0, 0.0)


def test_stats_need_an_image():
    with pytest.raises(ArgumentError):
        index.index_stats(index.build_index([], dim=4))


def test_linear_scan_ops():
    assert index.linear_scan_ops(4090, 409) == 1672810
    assert index.linear_scan_ops(1, 64) == 64


def test_save_load_keeps_postings_and_empty_images(tmp_path):
    idx = _small_index()
    path = tmp_path / "db.e2ix"
    index.save_index(idx, path)
    loaded = index.load_index(path)
    assert loaded.dim == 6
    assert loaded.image_ids.tolist() == [3, 4, 7, 9]
    assert loaded.nonzero_counts.tolist() == [2, 0, 2, 1]
    for word in range(6):
        assert loaded.postings(word) == idx.postings(word)
    q = _vec(6, {0: 0.3, 2: 0.7, 5: 0.1})
    assert index.query(loaded, q, k=4) == index.query(idx, q, k=4)


def test_load_rejects_damaged_files(tmp_path):
    path = tmp_path / "db.e2ix"
    index.save_index(_small_index(), path)
    data = path.read_bytes()

    path.write_bytes(data[:-1])
    with pytest.raises(FormatError):
        index.load_index(path)

    path.write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        index.load_index(path)

    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError):
        index.load_index(path)


def test_stats_of_a_large_uniform_index():
    words = np.arange(409)
    vectors = [(i, VisualWordVector(500, words, np.ones(409))) for i in range(4090)]
    stats = index.index_stats(index.build_index(vectors, dim=500))
    assert (stats.anv, stats.ani) == (409.0, 4090.0)
    assert stats.ano == 1672810


def test_stats_product_on_random_indexes():
    rng = np.random.default_rng(4)
    for _ in range(20):
        vectors = _random_vectors(rng, int(rng.integers(1, 60)), 50, float(rng.uniform(0.01, 0.3)))
        stats = index.index_stats(index.build_index(vectors, dim=50))
        assert stats.ano == pytest.approx(stats.anv * stats.ani, abs=1e-9)
