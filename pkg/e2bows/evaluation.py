"""Retrieval quality metrics and the dense ranking oracle.

Rankings are image-id sequences in rank order, first element is rank 1.
Relevance comes either from a single shared label (binary) or from the
number of shared labels (graded).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from e2bows import binio
from e2bows.errors import ArgumentError, DimensionError, FormatError
from e2bows.index import IndexStats, QueryResult

STATS_PREFIX = "#stats"

log = logging.getLogger(__name__)


@dataclass
class RelevanceJudgment:
    """Relevance grades of database images for one query; absent ids grade 0."""

    query_id: int
    grades: Dict[int, int] = field(default_factory=dict)
    binary: bool = False

    def __post_init__(self):
        if any(g < 0 for g in self.grades.values()):
            raise ArgumentError("relevance grades must be non-negative")
        if self.binary and any(g > 1 for g in self.grades.values()):
            raise ArgumentError("binary judgments hold grades 0 and 1 only")

    @classmethod
    def from_labels(
        cls,
        query_id: int,
        query_labels: Iterable[int],
        database: Mapping[int, Iterable[int]],
        binary: bool = False,
    ) -> "RelevanceJudgment":
        """Grade every database image by the labels it shares with the query.

        The query's own id is left out of the judged set.
        """
        wanted = set(query_labels)
        grades = {}
        for image_id, labels in database.items():
            if image_id == query_id:
                continue
            shared = len(wanted.intersection(labels))
            if shared:
                grades[image_id] = min(shared, 1) if binary else shared
        return cls(query_id, grades, binary)

    @property
    def relevant(self) -> Set[int]:
        return {image_id for image_id, grade in self.grades.items() if grade >= 1}


@dataclass
class QueryMetrics:
    query_id: int
    ap: float
    ndcg: float
    touched: int


@dataclass
class EvalReport:
    queries: List[QueryMetrics]
    ndcg_k: int
    stats: Optional[Tuple[float, float, float]] = None

    @property
    def mean_ap(self) -> float:
        return mean_average_precision([q.ap for q in self.queries])

    @property
    def mean_ndcg(self) -> float:
        return float(np.mean([q.ndcg for q in self.queries])) if self.queries else 0.0

    @property
    def mean_touched(self) -> float:
        return float(np.mean([q.touched for q in self.queries])) if self.queries else 0.0


@dataclass
class RankedQuery:
    query_id: int
    touched: int
    hits: List[Tuple[int, float]]

    @property
    def ranking(self) -> List[int]:
        return [image_id for image_id, _ in self.hits]


def brute_force_rank(vectors: Sequence[Tuple[int, np.ndarray]], q: np.ndarray) -> List[Tuple[int, float]]:
    """Every image by descending dense dot product with ``q``, ties by ascending id."""
    q = np.asarray(q, dtype=np.float64)
    if not vectors:
        return []
    ids = np.array([image_id for image_id, _ in vectors], dtype=np.uint64)
    dense = np.stack([np.asarray(v, dtype=np.float64) for _, v in vectors])
    if dense.shape[1:] != q.shape or q.ndim != 1:
        raise DimensionError(f"query shape {q.shape} does not match stored vectors {dense.shape[1:]}")
    scores = dense @ q
    order = np.lexsort((ids, -scores))
    return list(zip(ids[order].tolist(), scores[order].tolist()))


def complete_ranking(ranking: Sequence[int], database_ids: Iterable[int], query_id: Optional[int] = None) -> List[int]:
    """Extend ``ranking`` to the whole database.

    Database images the ranking leaves out follow it in ascending id order,
    the order the index gives images tied at score 0. ``query_id`` is never
    appended.

    Args:
        ranking: Image ids in rank order, as returned by a query.
        database_ids: Every id of the searched database.
        query_id: Id of the query image when it is also a database image.

    Returns:
        ``ranking`` followed by the missing ids.
    """
    ranked = list(ranking)
    seen = set(ranked)
    seen.add(query_id)
    return ranked + sorted(image_id for image_id in database_ids if image_id not in seen)


def average_precision(ranking: Sequence[int], relevant: Set[int]) -> float:
    """Mean of precision@i over the ranks i holding relevant images.

    Relevant images missing from ``ranking`` count as never retrieved.
    >>> average_precision([4, 7, 9], {4, 9})
    0.8333333333333333
    """
    if not relevant:
        return 0.0
    hits = np.array([image_id in relevant for image_id in ranking], dtype=bool)
    if not hits.any():
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / len(relevant))


def mean_average_precision(aps: Sequence[float]) -> float:
    if len(aps) == 0:
        raise ArgumentError("mAP needs at least one query")
    return float(np.mean(aps))


def _dcg(gains: np.ndarray) -> float:
    discounts = np.log2(np.arange(2, gains.size + 2))
    return float(np.sum((2.0 ** gains - 1) / discounts))


def ndcg_at_k(ranking: Sequence[int], grades: Mapping[int, int], k: int) -> float:
    """Graded NDCG@k with gain ``2**grade - 1`` and a ``log2(i + 1)`` discount."""
    if k < 1:
        raise ArgumentError("k must be at least 1")
    ranked = np.array([grades.get(image_id, 0) for image_id in list(ranking)[:k]], dtype=np.float64)
    ideal = np.sort(np.array(list(grades.values()), dtype=np.float64))[::-1][:k]
    idcg = _dcg(ideal)
    if idcg == 0:
        return 0.0
    return _dcg(ranked) / idcg


def evaluate_rankings(
    ranked: Sequence[RankedQuery],
    query_labels: Mapping[int, Iterable[int]],
    database_labels: Mapping[int, Iterable[int]],
    ndcg_k: int,
    stats: Optional[Tuple[float, float, float]] = None,
) -> EvalReport:
    """AP and NDCG@k per query over the full database ranking.

    Each returned ranking is completed with ``complete_ranking`` before
    scoring, so a relevant image the index never returned still counts at
    its tied position instead of as missing. AP relevance is "shares at
    least one label"; NDCG uses the number of shared labels as the grade.

    Args:
        ranked: Rankings read from a ranks file or produced by ``query``.
        query_labels: Label set of every query id.
        database_labels: Label set of every database id.
        ndcg_k: Cutoff of the NDCG.
        stats: Optional (ANV, ANI, ANO) carried into the report.

    Returns:
        An ``EvalReport`` with one ``QueryMetrics`` per ranking.
    """
    if not ranked:
        raise ArgumentError("no queries to evaluate")
    metrics = []
    for query in ranked:
        if query.query_id not in query_labels:
            raise ArgumentError(f"no labels for query {query.query_id}")
        judgment = RelevanceJudgment.from_labels(query.query_id, query_labels[query.query_id], database_labels)
        ranking = complete_ranking(query.ranking, database_labels, query.query_id)
        metrics.append(
            QueryMetrics(
                query.query_id,
                average_precision(ranking, judgment.relevant),
                ndcg_at_k(ranking, judgment.grades, ndcg_k),
                query.touched,
            )
        )
    report = EvalReport(metrics, ndcg_k, stats)
    log.info(f"Evaluated {len(metrics)} queries: mAP={report.mean_ap:.4f} NDCG@{ndcg_k}={report.mean_ndcg:.4f}")
    return report


def write_ranks_file(path, results: Sequence[Tuple[int, QueryResult]], stats: IndexStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{STATS_PREFIX} {stats.anv:.9g} {stats.ani:.9g} {stats.ano:.9g}\n")
        for query_id, result in results:
            entries = " ".join(f"{image_id}:{score:.9g}" for image_id, score in result.hits)
            fh.write(f"{query_id} {result.touched} {len(result.hits)} {entries}".rstrip() + "\n")
    log.info(f"Wrote rankings of {len(results)} queries to {path}")


def read_ranks_file(path) -> Tuple[Optional[Tuple[float, float, float]], List[RankedQuery]]:
    stats = None
    ranked = []
    for number, line in enumerate(binio.read_text_lines(path, "ranks file"), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            if line.startswith(STATS_PREFIX):
                anv, ani, ano = (float(part) for part in line.split()[1:])
                stats = (anv, ani, ano)
                continue
            if line.startswith("#"):
                continue
            fields = line.split()
            query_id, touched, count = int(fields[0]), int(fields[1]), int(fields[2])
            hits = [(int(image_id), float(score)) for image_id, score in (entry.split(":", 1) for entry in fields[3:])]
        except (IndexError, ValueError):
            raise FormatError(f"malformed ranks line {line!r}", offset=number)
        if count != len(hits):
            raise FormatError(f"line declares {count} results but holds {len(hits)}", offset=number)
        ranked.append(RankedQuery(query_id, touched, hits))
    return stats, ranked


def write_metrics_report(path, report: EvalReport) -> None:
    k = report.ndcg_k
    with open(path, "w", encoding="utf-8") as fh:
        for q in report.queries:
            fh.write(f"{q.query_id} {q.ap:.6f} {q.ndcg:.6f} {q.touched}\n")
        summary = f"mAP={report.mean_ap:.6f} NDCG@{k}={report.mean_ndcg:.6f}"
        if report.stats is not None:
            anv, ani, ano = report.stats
            summary += f" ANV={anv:.6g} ANI={ani:.6g} ANO={ano:.6g}"
        fh.write(summary + "\n")
    log.info(f"Wrote metrics report to {path}")
