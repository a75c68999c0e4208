"""Tests for the loss terms, the category tree and the adaptive margin."""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

import e2bows.losses as losses
from e2bows.errors import ArgumentError, DimensionError, FormatError
from e2bows.numerics import finite_diff_check

# root 0; 1, 2 at depth 1; 3 under 1 and 4 under 2 at depth 2; leaves 5, 6 under 3 and 7 under 4
TOY_EDGES = [(0, -1), (1, 0), (2, 0), (3, 1), (4, 2), (5, 3), (6, 3), (7, 4)]
TOY_CATEGORIES = [(0, 5), (1, 6), (2, 7)]


def _toy_tree():
    return losses.CategoryTree.from_edges(TOY_EDGES, TOY_CATEGORIES)


def test_cross_entropy_examples():
    loss, grad = losses.softmax_cross_entropy(np.zeros(2), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-4)
    assert grad.sum() == pytest.approx(0.0, abs=1e-12)
    loss, grad = losses.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(4, 5))
    labels = np.array([0, 4, 2, 2])
    _, grad = losses.softmax_cross_entropy(scores, labels)
    report = finite_diff_check(lambda s: losses.softmax_cross_entropy(s, labels)[0], scores, grad)
    assert report.max_rel_error < 1e-4
    assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ArgumentError):
        losses.softmax_cross_entropy(np.zeros(3), 3)


def test_triplet_inactive_hinge():
    va = np.array([1.0, 0.0])
    loss, ga, gp, gn = losses.triplet_cosine_loss(va, va, np.array([0.0, 1.0]), 0.2)
    assert loss == 0.0
    assert not (ga.any() or gp.any() or gn.any())


def test_triplet_active_hinge():
    va = np.array([1.0, 0.0])
    vp = np.array([0.5, math.sqrt(0.75)])
    vn = np.array([0.9, math.sqrt(0.19)])
    loss, ga, gp, gn = losses.triplet_cosine_loss(va, vp, vn, 0.2)
    assert loss == pytest.approx(0.6)
    assert_allclose(ga, vn - vp)
    assert_allclose(gp, -va)
    assert_allclose(gn, va)


def test_triplet_identical_vectors_cost_the_margin():
    v = np.array([0.6, 0.8])
    assert losses.triplet_cosine_loss(v, v, v, 0.2)[0] == pytest.approx(0.2)


def test_triplet_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    va, vp, vn = rng.normal(size=(3, 6))
    vn = va + 0.1 * vn  # keep the hinge active
    packed = np.concatenate([va, vp, vn])

    def objective(x):
        return losses.triplet_cosine_loss(x[:6], x[6:12], x[12:], 0.2)[0]

    loss, ga, gp, gn = losses.triplet_cosine_loss(va, vp, vn, 0.2)
    assert loss > 0
    report = finite_diff_check(objective, packed, np.concatenate([ga, gp, gn]))
    assert report.max_rel_error < 1e-4


def test_triplet_length_mismatch():
    with pytest.raises(DimensionError):
        losses.triplet_cosine_loss(np.ones(2), np.ones(3), np.ones(2), 0.2)


def test_sparsity_examples():
    loss, grad = losses.sparsity_loss_and_grad(0.08, 0.08)
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert grad == pytest.approx(0.0, abs=1e-15)
    loss, grad = losses.sparsity_loss_and_grad(0.08, 0.5)
    assert loss == pytest.approx(0.4144, abs=1e-4)
    assert grad == pytest.approx(-0.84)


def test_sparsity_gradient_sign_raises_threshold():
    _, grad = losses.sparsity_loss_and_grad(0.08, 0.3)
    assert grad < 0


def test_surrogate_routes_agree():
    rng = np.random.default_rng(2)
    for rho_hat, rho in rng.uniform(1e-3, 1 - 1e-3, size=(1000, 2)):
        closed = (rho_hat - rho) / (1 - rho)
        assert losses.sparsity_grad_chain_rule(rho_hat, rho) == pytest.approx(closed, rel=1e-12, abs=1e-12)
        assert losses.sparsity_loss_and_grad(rho_hat, rho)[1] == pytest.approx(closed, rel=1e-12, abs=1e-12)


def test_sparsity_loss_clamps_extremes():
    assert math.isfinite(losses.sparsity_loss(0.08, 0.0))
    assert math.isfinite(losses.sparsity_loss(0.08, 1.0))
    assert losses.sparsity_loss(0.08, 0.3) > 0


@pytest.mark.parametrize("rho_hat", [0.0, 1.0, 1.5])
def test_sparsity_target_outside_unit_interval(rho_hat):
    with pytest.raises(ArgumentError):
        losses.sparsity_loss(rho_hat, 0.5)


def test_combined_loss():
    w = losses.LossWeights(lambda1=1.0, lambda2=1.0)
    assert losses.combined_loss(1.0, 0.5, 0.2, w) == pytest.approx(1.7)
    zero = losses.LossWeights(lambda1=0.0, lambda2=0.0)
    assert losses.combined_loss(1.0, 0.5, 0.2, zero) == 1.0
    assert losses.combined_loss(1.0, 1.0, 0.2, w) - losses.combined_loss(1.0, 0.5, 0.2, w) == pytest.approx(0.5)


def test_tree_geometry():
    tree = _toy_tree()
    assert tree.height == 3
    assert tree.depth[3] == 2
    assert tree.lowest_common_ancestor(5, 6) == 3
    assert tree.lowest_common_ancestor(5, 7) == 0


def test_category_similarity():
    tree = _toy_tree()
    assert losses.category_similarity(tree, 0, 1) == pytest.approx(2 / 3)
    assert losses.category_similarity(tree, 0, 2) == 0.0
    assert losses.category_similarity(tree, 1, 0) == losses.category_similarity(tree, 0, 1)
    with pytest.raises(ArgumentError):
        losses.category_similarity(tree, 0, 0)
    with pytest.raises(ArgumentError):
        losses.category_similarity(tree, 0, 9)


@pytest.mark.parametrize(
    "edges, categories",
    [
        ([(0, -1), (1, -1)], []),
        ([(0, -1), (1, 2)], []),
        ([(0, -1), (1, 0)], [(0, 0)]),
        ([(0, -1)], []),
    ],
)
def test_invalid_trees(edges, categories):
    with pytest.raises(ArgumentError):
        losses.CategoryTree.from_edges(edges, categories)


def test_load_category_tree(tmp_path):
    path = tmp_path / "tree.txt"
    lines = ["# toy tree", "[nodes]"] + [f"{a} {b}" for a, b in TOY_EDGES]
    lines += ["[categories]"] + [f"{a} {b}  # leaf" for a, b in TOY_CATEGORIES]
    path.write_text("\n".join(lines) + "\n")
    tree = losses.load_category_tree(path)
    assert tree.leaf_of == {0: 5, 1: 6, 2: 7}


def test_load_category_tree_reports_line(tmp_path):
    path = tmp_path / "tree.txt"
    path.write_text("[nodes]\n0 -1\n1 zero\n")
    with pytest.raises(FormatError, match="offset 3"):
        losses.load_category_tree(path)
    path.write_bytes(b"[nodes]\n0 -1 # r\xf6ot\n")
    with pytest.raises(FormatError, match="offset 2"):
        losses.load_category_tree(path)


def test_adaptive_margin_values():
    assert losses.adaptive_margin(0.2, 0.0) == pytest.approx(0.2)
    assert losses.adaptive_margin(0.2, 0.5) == pytest.approx(0.0889, abs=1e-4)
    assert losses.adaptive_margin(0.2, 1.0) == pytest.approx(0.05)
    margins = [losses.adaptive_margin(0.2, s) for s in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(margins, margins[1:]))
    with pytest.raises(ArgumentError):
        losses.adaptive_margin(0.2, 1.5)
