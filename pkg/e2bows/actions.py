import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from e2bows import validators
from e2bows.backbone import BackboneConfig, FeatureMaps, backbone_forward, init_backbone, read_feature_file, write_feature_file
from e2bows.bowl import VisualWordVector, extract_words, read_words_file, write_words_file
from e2bows.config import Config
from e2bows.datasets import Dataset, SyntheticConfig, gen_synthetic, load_dataset, read_cifar, save_dataset
from e2bows.errors import ArgumentError
from e2bows.evaluation import (
    RankedQuery,
    evaluate_rankings,
    read_ranks_file,
    write_metrics_report,
    write_ranks_file,
)
from e2bows.index import (
    InvertedIndex,
    QueryResult,
    build_index as build_inverted_index,
    index_stats,
    linear_scan_ops,
    load_index,
    query as query_index,
    save_index,
)
from e2bows.losses import load_category_tree
from e2bows.trainer import (
    ModelParams,
    TrainConfig,
    extract_vectors,
    forward,
    load_checkpoint,
    raw_words,
    save_checkpoint,
    train as run_training,
)

DEFAULT_QUERY_K = 100
DEFAULT_NDCG_K = 100
DEFAULT_SWEEP_BETAS = (0.0, 0.02, 0.05, 0.08, 0.11, 0.15)
SFM_FILE_PATTERN = "sfm_{:03d}.pgm"

# data_dict keys that override TrainConfig fields
TRAIN_OVERRIDES = {
    "m": "m",
    "rho_hat": "rho_hat",
    "alpha": "alpha",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lr": "learning_rate",
    "beta_lr": "beta_learning_rate",
    "epochs": "epochs",
    "batch": "batch_size",
    "seed": "rng_seed",
    "freeze_backbone": "freeze_backbone",
    "beta_init": "beta_init",
}

log = logging.getLogger(__name__)


def _config(context: Dict[str, Any]) -> Config:
    return context.get("config") or Config()


def _require(data_dict: Dict[str, Any], *fields: str) -> None:
    for name in fields:
        if data_dict.get(name) in (None, ""):
            raise ArgumentError(f"{name} field is required")


def _headless(params: ModelParams) -> ModelParams:
    return ModelParams(None, params.classifier, params.bowl)


def _feature_dataset(features_path, labels: Optional[Dataset]) -> Dataset:
    """Stack an E2FM file into a Dataset, labelled from ``labels`` when given."""
    records = read_feature_file(features_path)
    if not records:
        raise ArgumentError(f"feature file {features_path} holds no records")
    ids = [image_id for image_id, _ in records]
    stack = np.stack([maps.values for _, maps in records])
    if labels is None:
        return Dataset(ids, stack, [(0,)] * len(ids), 1)
    lookup = labels.label_map()
    missing = [image_id for image_id in ids if image_id not in lookup]
    if missing:
        raise ArgumentError(f"{len(missing)} feature records have no labels, first is image {missing[0]}")
    return Dataset(ids, stack, [lookup[image_id] for image_id in ids], labels.class_count, labels.tree)


def _model_inputs(data_dict: Dict[str, Any], params: ModelParams) -> Tuple[Dataset, ModelParams]:
    """Images or feature maps to run, and the parameters that consume them."""
    if data_dict.get("features"):
        return _feature_dataset(data_dict["features"], None), _headless(params)
    _require(data_dict, "data")
    if params.backbone is None:
        raise ArgumentError("checkpoint was trained on features; pass features instead of images")
    return load_dataset(data_dict["data"]), params


def _given(data_dict: Dict[str, Any], key: str, default: Any) -> Any:
    value = data_dict.get(key)
    return default if value is None else value


def gen_data(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Generate a synthetic dataset and save it as an E2DS file.

    Args:
        context: Action context; unused.
        data_dict: ``out`` plus optional ``classes``, ``per_class``,
            ``size``, ``sigma``, ``seed``, ``labels_per_image``,
            ``id_offset`` and ``jitter``.

    Returns:
        Dictionary with the written path and the image count
    """
    _require(data_dict, "out")
    defaults = SyntheticConfig()
    cfg = SyntheticConfig(
        class_count=validators.positive_int(_given(data_dict, "classes", defaults.class_count)),
        images_per_class=validators.positive_int(_given(data_dict, "per_class", defaults.images_per_class)),
        image_size=validators.positive_int(_given(data_dict, "size", defaults.image_size)),
        noise_sigma=validators.non_negative_float(_given(data_dict, "sigma", defaults.noise_sigma)),
        rng_seed=validators.non_negative_int(_given(data_dict, "seed", defaults.rng_seed)),
        labels_per_image=validators.positive_int(_given(data_dict, "labels_per_image", defaults.labels_per_image)),
        id_offset=validators.non_negative_int(_given(data_dict, "id_offset", defaults.id_offset)),
        position_jitter=validators.unit_interval(_given(data_dict, "jitter", defaults.position_jitter)),
    )
    dataset = gen_synthetic(cfg)
    save_dataset(dataset, data_dict["out"])
    return {"success": True, "path": data_dict["out"], "image_count": len(dataset)}


def import_cifar(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """Convert the CIFAR binary batch at ``path`` into the E2DS file ``out``."""
    _require(data_dict, "path", "out")
    dataset = read_cifar(data_dict["path"], data_dict.get("variant") or "cifar10")
    save_dataset(dataset, data_dict["out"])
    return {"success": True, "path": data_dict["out"], "image_count": len(dataset)}


def features(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """Dump backbone feature maps of a dataset to an E2FM file.

    The backbone comes from ``ckpt`` when given, otherwise it is freshly
    initialized from the configured blocks and seed.
    """
    _require(data_dict, "data", "out")
    dataset = load_dataset(data_dict["data"])
    if data_dict.get("ckpt"):
        params, _ = load_checkpoint(data_dict["ckpt"])
        if params.backbone is None:
            raise ArgumentError("checkpoint has no backbone to compute features with")
        backbone = params.backbone
    else:
        cfg = TrainConfig.from_config(_config(context), rng_seed=data_dict.get("seed"))
        h, w, c = dataset.image_shape
        backbone = init_backbone(BackboneConfig(h, w, c, cfg.blocks, cfg.rng_seed))

    batch_size = validators.positive_int(data_dict.get("batch", 64))
    records = []
    for start in range(0, len(dataset), batch_size):
        maps, _ = backbone_forward(dataset.images[start:start + batch_size], backbone)
        ids = dataset.ids[start:start + batch_size].tolist()
        records += [(image_id, FeatureMaps(values)) for image_id, values in zip(ids, maps.values)]
    write_feature_file(data_dict["out"], records)
    return {"success": True, "path": data_dict["out"], "shape": list(backbone.config.output_shape)}


def train(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Train a model on a dataset and save the checkpoint.

    Args:
        context: Action context; ``config`` supplies the training defaults.
        data_dict: ``data`` and ``out``, optional ``tree`` and ``features``,
            and any key of ``TRAIN_OVERRIDES``.

    Returns:
        Dictionary with the checkpoint path, step count, learned threshold
        and the last step's ratio and loss
    """
    _require(data_dict, "data", "out")
    overrides = {field: data_dict.get(key) for key, field in TRAIN_OVERRIDES.items()}
    cfg = TrainConfig.from_config(_config(context), **overrides)

    tree = load_category_tree(data_dict["tree"]) if data_dict.get("tree") else None
    dataset = load_dataset(data_dict["data"], tree)
    head_only = bool(data_dict.get("features"))
    if head_only:
        dataset = _feature_dataset(data_dict["features"], dataset)
    if tree is not None:
        unknown = sorted(set(dataset.labels.tolist()) - set(tree.leaf_of))
        if unknown:
            raise ArgumentError(f"categories {unknown} are missing from the tree")

    log.info(f"Training on {len(dataset)} images, {dataset.class_count} classes, head_only={head_only}")
    params, history = run_training(dataset, cfg, head_only=head_only)
    save_checkpoint(params, cfg, data_dict["out"])
    final = history[-1] if history else None
    return {
        "success": True,
        "path": data_dict["out"],
        "steps": len(history),
        "beta": params.bowl.beta,
        "rho": final.rho if final else None,
        "loss": final.total if final else None,
    }


def extract(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Write the sparse visual words of every image to a words file.

    Args:
        context: Action context; unused.
        data_dict: ``ckpt``, ``out`` and either ``data`` or ``features``;
            optional ``binarize`` and ``beta_override``.

    Returns:
        Dictionary with the written path, word dimension, threshold used
        and the mean number of nonzero words
    """
    _require(data_dict, "ckpt", "out")
    params, _ = load_checkpoint(data_dict["ckpt"])
    dataset, params = _model_inputs(data_dict, params)
    beta = data_dict.get("beta_override")
    vectors = extract_vectors(params, dataset.images, beta=beta, binary=bool(data_dict.get("binarize")))
    write_words_file(data_dict["out"], list(zip(dataset.ids.tolist(), vectors)), dim=params.dim)
    nonzero = float(np.mean([len(v) for v in vectors])) if vectors else 0.0
    return {
        "success": True,
        "path": data_dict["out"],
        "dim": params.dim,
        "beta": params.bowl.beta if beta is None else float(beta),
        "mean_nonzero": nonzero,
    }


def build_index(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Build an inverted index from a words file.

    Args:
        context: Action context; unused.
        data_dict: ``words`` and ``out``; ``dim`` is taken from the first
            record when absent.

    Returns:
        Dictionary with the index path, image count and posting count
    """
    _require(data_dict, "words", "out")
    dim = validators.positive_int(data_dict["dim"]) if data_dict.get("dim") else None
    records = read_words_file(data_dict["words"], dim)
    if dim is None:
        dim = records[0][1].dim if records else 0
    index = build_inverted_index(records, dim)
    save_index(index, data_dict["out"])
    return {"success": True, "path": data_dict["out"], "image_count": index.image_count, "postings": int(index.matrix.nnz)}


def _ranked(index: InvertedIndex, queries: Sequence[Tuple[int, VisualWordVector]], k: int) -> List[Tuple[int, QueryResult]]:
    """Top-k of every query with the query's own id taken out of its results."""
    results = []
    for query_id, q in queries:
        result = query_index(index, q, k + 1)
        hits = [(image_id, score) for image_id, score in result.hits if image_id != query_id][:k]
        results.append((query_id, QueryResult(hits, result.touched)))
    return results


def query(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Rank the indexed images for every query in a words file.

    Args:
        context: Action context; ``config`` supplies the default ``k``.
        data_dict: ``index``, ``words`` and ``out``; optional ``k``.

    Returns:
        Dictionary with the ranks path, query count and mean postings touched
    """
    _require(data_dict, "index", "words", "out")
    k = validators.positive_int(data_dict.get("k") or _config(context).get("e2bows.query.k", DEFAULT_QUERY_K))
    index = load_index(data_dict["index"])
    queries = read_words_file(data_dict["words"], index.dim)
    results = _ranked(index, queries, k)
    write_ranks_file(data_dict["out"], results, index_stats(index))
    touched = [result.touched for _, result in results]
    return {
        "success": True,
        "path": data_dict["out"],
        "queries": len(results),
        "mean_touched": float(np.mean(touched)) if touched else 0.0,
    }


def evaluate(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Score a ranks file against dataset labels.

    Args:
        context: Action context; ``config`` supplies the default NDCG cutoff.
        data_dict: ``ranks``, ``labels`` (the database dataset) and ``out``;
            ``query_labels`` when queries come from another dataset.

    Returns:
        Dictionary with the report path, mAP and mean NDCG
    """
    _require(data_dict, "ranks", "labels", "out")
    ndcg_k = validators.positive_int(
        data_dict.get("ndcg_k") or _config(context).get("e2bows.eval.ndcg_k", DEFAULT_NDCG_K)
    )
    ranks_stats, ranked = read_ranks_file(data_dict["ranks"])
    database = load_dataset(data_dict["labels"]).label_map()
    queries = load_dataset(data_dict["query_labels"]).label_map() if data_dict.get("query_labels") else database
    report = evaluate_rankings(ranked, queries, database, ndcg_k, ranks_stats)
    write_metrics_report(data_dict["out"], report)
    return {"success": True, "path": data_dict["out"], "map": report.mean_ap, "ndcg": report.mean_ndcg}


def stats(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """Sparsity statistics of the index at ``index``, plus the linear-scan
    cost of ``code_bits``-bit codes over the same images when asked.
    """
    _require(data_dict, "index")
    index = load_index(data_dict["index"])
    result = index_stats(index)
    out = {
        "success": True,
        "image_count": result.image_count,
        "dim": index.dim,
        "anv": result.anv,
        "ani": result.ani,
        "ano": result.ano,
    }
    if data_dict.get("code_bits"):
        out["linear_scan_ops"] = linear_scan_ops(result.image_count, validators.positive_int(data_dict["code_bits"]))
    return out


def _to_pgm(values: np.ndarray) -> bytes:
    low, high = values.min(), values.max()
    scaled = (values - low) / (high - low) if high > low else np.zeros_like(values)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def export_sfm(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """
    Write each semantic feature map of one image as a binary graymap.

    Args:
        context: Action context; unused.
        data_dict: ``ckpt``, ``image`` (an image id), ``out`` (a directory)
            and either ``data`` or ``features``.

    Returns:
        Dictionary with the written graymap paths, one per class
    """
    _require(data_dict, "ckpt", "image", "out")
    params, _ = load_checkpoint(data_dict["ckpt"])
    image_id = validators.non_negative_int(data_dict["image"])
    dataset, params = _model_inputs(data_dict, params)
    sample = dataset.images[dataset.position(image_id)]

    maps = forward(params, sample[None]).stack.maps[0]
    os.makedirs(data_dict["out"], exist_ok=True)
    paths = []
    for c, values in enumerate(maps):
        path = os.path.join(data_dict["out"], SFM_FILE_PATTERN.format(c))
        with open(path, "wb") as fh:
            fh.write(_to_pgm(values))
        paths.append(path)
    log.info(f"Exported {len(paths)} SFMs of image {image_id} to {data_dict['out']}")
    return {"success": True, "paths": paths}


def threshold_sweep(context: Dict[str, Any], data_dict: Dict[str, Any]) -> Dict[str, Any]:
    """Efficiency and accuracy of retrieval across word thresholds.

    For each threshold in ``betas`` plus the learned one, database and
    query words are extracted, indexed and searched; the resulting table
    is written as CSV with one row per threshold.
    """
    _require(data_dict, "ckpt", "data", "out")
    ndcg_k = validators.positive_int(
        data_dict.get("ndcg_k") or _config(context).get("e2bows.eval.ndcg_k", DEFAULT_NDCG_K)
    )
    betas = validators.float_list(data_dict.get("betas") or DEFAULT_SWEEP_BETAS)

    params, _ = load_checkpoint(data_dict["ckpt"])
    database = load_dataset(data_dict["data"])
    queries = load_dataset(data_dict["queries"]) if data_dict.get("queries") else database
    if data_dict.get("features"):
        separate = queries is not database
        database = _feature_dataset(data_dict["features"], database)
        if data_dict.get("query_features"):
            queries = _feature_dataset(data_dict["query_features"], queries)
        elif separate:
            raise ArgumentError("a separate query set needs its own feature file")
        else:
            queries = database
        params = _headless(params)
    elif params.backbone is None:
        raise ArgumentError("checkpoint was trained on features; pass features instead of images")
    # without an explicit k every query ranks the whole database
    k = validators.positive_int(data_dict.get("k") or len(database))

    database_raw = raw_words(params, database.images)
    query_raw = database_raw if queries is database else raw_words(params, queries.images)
    learned = params.bowl.beta
    rows = []
    for beta in sorted(set(betas) | {learned}):
        index = build_inverted_index(zip(database.ids.tolist(), extract_words(database_raw, beta)), params.dim)
        results = _ranked(index, list(zip(queries.ids.tolist(), extract_words(query_raw, beta))), k)
        ranked = [RankedQuery(query_id, result.touched, result.hits) for query_id, result in results]
        report = evaluate_rankings(ranked, queries.label_map(), database.label_map(), ndcg_k)
        summary = index_stats(index)
        rows.append(
            {
                "beta": beta,
                "learned": beta == learned,
                "anv": summary.anv,
                "ani": summary.ani,
                "ano": summary.ano,
                "mean_touched": report.mean_touched,
                "map": report.mean_ap,
                "ndcg": report.mean_ndcg,
            }
        )
        log.info(f"beta={beta:.4f}: ANO={summary.ano:.1f} touched={report.mean_touched:.1f} mAP={report.mean_ap:.4f}")

    table = pd.DataFrame(rows).sort_values("beta").reset_index(drop=True)
    table.to_csv(data_dict["out"], index=False, float_format="%.6g")
    log.info(f"Wrote sweep of {len(table)} thresholds to {data_dict['out']}")
    return {"success": True, "path": data_dict["out"], "table": table}


def get_actions() -> Dict[str, Any]:
    return {
        "gen-data": gen_data,
        "import-cifar": import_cifar,
        "features": features,
        "train": train,
        "extract": extract,
        "build-index": build_index,
        "query": query,
        "eval": evaluate,
        "stats": stats,
        "export-sfm": export_sfm,
        "sweep": threshold_sweep,
    }
