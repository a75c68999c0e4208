"""Tests for the action functions behind the command line.

Actions are called the way the CLI calls them, with a ``context`` holding the
config and a ``data_dict`` of flag values, on tiny synthetic datasets.
"""
import numpy as np
import pandas as pd
import pytest

import e2bows.actions as actions
from e2bows.bowl import read_words_file
from e2bows.config import Config
from e2bows.datasets import load_dataset
from e2bows.errors import ArgumentError
from e2bows.evaluation import read_ranks_file
from e2bows.index import load_index

TREE_TEXT = """\
[nodes]
0 -1
1 0
2 0
3 1
4 2
5 3
6 3
7 4
[categories]
0 5
1 6
2 7
"""


def _context():
    return {
        "config": Config(
            {
                "e2bows.backbone.blocks": "3:4",
                "e2bows.train.m": "2",
                "e2bows.train.epochs": "1",
                "e2bows.train.batch_size": "6",
                "e2bows.query.k": "5",
                "e2bows.eval.ndcg_k": "10",
            }
        )
    }


def _run(name, **data_dict):
    return actions.get_actions()[name](_context(), data_dict)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    paths = {name: str(root / name) for name in ("data.e2ds", "model.e2bw", "words.txt", "db.e2ix", "ranks.txt", "report.txt")}
    _run("gen-data", out=paths["data.e2ds"], classes=3, per_class=4, size=8, seed=3)
    _run("train", data=paths["data.e2ds"], out=paths["model.e2bw"])
    _run("extract", ckpt=paths["model.e2bw"], data=paths["data.e2ds"], out=paths["words.txt"], beta_override=0.0)
    _run("build-index", words=paths["words.txt"], out=paths["db.e2ix"])
    _run("query", index=paths["db.e2ix"], words=paths["words.txt"], out=paths["ranks.txt"])
    return paths


def test_registry_names():
    assert sorted(actions.get_actions()) == [
        "build-index",
        "eval",
        "export-sfm",
        "extract",
        "features",
        "gen-data",
        "import-cifar",
        "query",
        "stats",
        "sweep",
        "train",
    ]


@pytest.mark.parametrize("name", ["gen-data", "train", "extract", "build-index", "query", "eval", "stats", "sweep"])
def test_required_fields(name):
    with pytest.raises(ArgumentError, match="field is required"):
        actions.get_actions()[name]({}, {})


def test_gen_data(tmp_path):
    out = str(tmp_path / "d.e2ds")
    result = _run("gen-data", out=out, classes=2, per_class=3, size=4, labels_per_image=2, id_offset=10)
    assert result == {"success": True, "path": out, "image_count": 6}
    assert load_dataset(out).ids.tolist() == list(range(10, 16))


def test_import_cifar(tmp_path):
    source = tmp_path / "batch.bin"
    source.write_bytes(bytes([4]) + bytes(3072) + bytes([9]) + bytes(3072))
    out = str(tmp_path / "cifar.e2ds")
    result = _run("import-cifar", path=str(source), out=out)
    assert result["image_count"] == 2
    assert load_dataset(out).labels.tolist() == [4, 9]


def test_pipeline_outputs(workspace):
    words = read_words_file(workspace["words.txt"])
    assert [image_id for image_id, _ in words] == list(range(12))
    assert words[0][1].dim == 3 * 2

    index = load_index(workspace["db.e2ix"])
    assert index.image_count == 12

    stats, ranked = read_ranks_file(workspace["ranks.txt"])
    assert stats is not None
    assert len(ranked) == 12
    for query in ranked:
        assert len(query.hits) <= 5
        assert query.query_id not in query.ranking


def test_eval_and_stats(workspace):
    result = _run("eval", ranks=workspace["ranks.txt"], labels=workspace["data.e2ds"], out=workspace["report.txt"])
    assert 0.0 <= result["map"] <= 1.0
    assert 0.0 <= result["ndcg"] <= 1.0
    with open(workspace["report.txt"]) as fh:
        last = fh.read().splitlines()[-1]
    assert last.startswith("mAP=") and "NDCG@10=" in last and "ANO=" in last

    stats = _run("stats", index=workspace["db.e2ix"], code_bits=64)
    assert stats["image_count"] == 12
    assert stats["ano"] == pytest.approx(stats["anv"] * stats["ani"])
    assert stats["linear_scan_ops"] == 12 * 64


def test_binarized_extraction(workspace, tmp_path):
    out = str(tmp_path / "binary.txt")
    _run("extract", ckpt=workspace["model.e2bw"], data=workspace["data.e2ds"], out=out, binarize=True)
    assert all(v.binary for _, v in read_words_file(out))


def test_gen_data_jitter(tmp_path):
    out = str(tmp_path / "still.e2ds")
    _run("gen-data", out=out, classes=2, per_class=3, size=8, sigma=0, jitter=0)
    images = load_dataset(out).images
    np.testing.assert_array_equal(images[0], images[2])
    with pytest.raises(ArgumentError, match=r"\[0, 1\]"):
        _run("gen-data", out=out, jitter=1.5)


def test_export_sfm(workspace, tmp_path):
    out = tmp_path / "sfm"
    result = _run("export-sfm", ckpt=workspace["model.e2bw"], data=workspace["data.e2ds"], image=5, out=str(out))
    assert len(result["paths"]) == 3
    header = (out / "sfm_000.pgm").read_bytes()[:9]
    assert header == b"P5\n4 4\n25"
    with pytest.raises(ArgumentError):
        _run("export-sfm", ckpt=workspace["model.e2bw"], data=workspace["data.e2ds"], image=99, out=str(out))


def test_sweep_table(workspace, tmp_path):
    out = str(tmp_path / "sweep.csv")
    result = _run("sweep", ckpt=workspace["model.e2bw"], data=workspace["data.e2ds"], betas="0,0.1,0.3", out=out)
    table = pd.read_csv(out)
    assert list(table.columns) == ["beta", "learned", "anv", "ani", "ano", "mean_touched", "map", "ndcg"]
    assert table["learned"].sum() == 1
    assert table["beta"].is_monotonic_increasing
    assert table["anv"].is_monotonic_decreasing
    assert table["mean_touched"].is_monotonic_decreasing
    assert len(result["table"]) == len(table)


def test_feature_head_training(workspace, tmp_path):
    features = str(tmp_path / "f.e2fm")
    result = _run("features", data=workspace["data.e2ds"], out=features)
    assert result["shape"] == [4, 4, 4]

    head = str(tmp_path / "head.e2bw")
    _run("train", data=workspace["data.e2ds"], features=features, out=head, epochs=2)
    words = str(tmp_path / "head_words.txt")
    _run("extract", ckpt=head, features=features, out=words)
    assert len(read_words_file(words)) == 12

    with pytest.raises(ArgumentError, match="features"):
        _run("extract", ckpt=head, data=workspace["data.e2ds"], out=words)


def test_features_from_checkpoint_drive_full_model(workspace, tmp_path):
    features = str(tmp_path / "f.e2fm")
    _run("features", data=workspace["data.e2ds"], ckpt=workspace["model.e2bw"], out=features)
    from_images = read_words_file(workspace["words.txt"])
    out = str(tmp_path / "w.txt")
    _run("extract", ckpt=workspace["model.e2bw"], features=features, out=out, beta_override=0.0)
    for (a_id, a), (b_id, b) in zip(from_images, read_words_file(out)):
        assert a_id == b_id
        np.testing.assert_allclose(a.to_dense(), b.to_dense(), rtol=1e-4, atol=1e-5)


def test_train_with_category_tree(workspace, tmp_path):
    tree = tmp_path / "tree.txt"
    tree.write_text(TREE_TEXT)
    out = str(tmp_path / "tree.e2bw")
    result = _run("train", data=workspace["data.e2ds"], tree=str(tree), out=out)
    assert result["steps"] == 2

    tree.write_text(TREE_TEXT.replace("2 7\n", ""))
    with pytest.raises(ArgumentError, match="missing from the tree"):
        _run("train", data=workspace["data.e2ds"], tree=str(tree), out=out)


def test_reruns_write_identical_files(workspace, tmp_path):
    outputs = []
    for attempt in ("a", "b"):
        model = str(tmp_path / f"{attempt}.e2bw")
        words = str(tmp_path / f"{attempt}.txt")
        _run("train", data=workspace["data.e2ds"], out=model)
        _run("extract", ckpt=model, data=workspace["data.e2ds"], out=words)
        with open(model, "rb") as m, open(words, "rb") as w:
            outputs.append((m.read(), w.read()))
    assert outputs[0] == outputs[1]


def _default_run(name, **data_dict):
    return actions.get_actions()[name]({"config": Config()}, data_dict)


@pytest.fixture(scope="module")
def default_sweeps(tmp_path_factory):
    """Sweeps of a default-trained and an untrained model over held-out queries."""
    root = tmp_path_factory.mktemp("defaults")
    path = {name: str(root / name) for name in ("db.e2ds", "q.e2ds", "model.e2bw", "fresh.e2bw", "sweep.csv", "fresh.csv")}
    _default_run("gen-data", out=path["db.e2ds"], classes=10, per_class=60, seed=7)
    _default_run("gen-data", out=path["q.e2ds"], classes=10, per_class=5, seed=8, id_offset=100000)
    _default_run("train", data=path["db.e2ds"], out=path["model.e2bw"])
    _default_run("train", data=path["db.e2ds"], out=path["fresh.e2bw"], epochs=0)
    trained = _default_run(
        "sweep",
        ckpt=path["model.e2bw"],
        data=path["db.e2ds"],
        queries=path["q.e2ds"],
        betas="0,0.05,0.1,0.15,0.2,0.3",
        out=path["sweep.csv"],
    )["table"]
    untrained = _default_run(
        "sweep", ckpt=path["fresh.e2bw"], data=path["db.e2ds"], queries=path["q.e2ds"], betas="0", out=path["fresh.csv"]
    )["table"]
    return trained, untrained


@pytest.mark.slow
def test_default_sweep_cost_falls_as_threshold_rises(default_sweeps):
    trained, _ = default_sweeps
    assert len(trained) >= 6
    assert (np.diff(trained["anv"]) <= 0).all()
    assert (np.diff(trained["mean_touched"]) <= 0).all()


@pytest.mark.slow
def test_default_threshold_cuts_cost_without_losing_accuracy(default_sweeps):
    trained, _ = default_sweeps
    dense = trained[trained["beta"] == 0.0].iloc[0]
    learned = trained[trained["learned"]].iloc[0]
    assert learned["beta"] > 0
    assert dense["mean_touched"] / learned["mean_touched"] >= 5
    assert learned["map"] >= dense["map"] - 0.05


@pytest.mark.slow
def test_default_training_beats_untrained_model(default_sweeps):
    trained, untrained = default_sweeps
    assert trained[trained["learned"]].iloc[0]["map"] >= 0.8
    assert untrained[untrained["beta"] == 0.0].iloc[0]["map"] <= 0.15
