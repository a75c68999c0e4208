"""Training objective: classification, cosine triplet and sparsity terms.

The total loss is ``l_cls + lambda1 * l_tri + lambda2 * l_spa``. The
triplet margin can shrink for negatives drawn from a category close to
the anchor's in a category tree.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np
from scipy.special import log_softmax

from e2bows import binio
from e2bows.errors import ArgumentError, DimensionError, FormatError, NumericError
from e2bows.numerics import dot

RHO_FLOOR = 1e-6
ROUTE_TOLERANCE = 1e-12

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.2
    rho_hat: float = 0.03

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ArgumentError("loss weights must be non-negative")
        if self.alpha <= 0:
            raise ArgumentError("margin must be positive")
        if not 0 < self.rho_hat < 1:
            raise ArgumentError("target ratio must lie in (0, 1)")


def softmax_cross_entropy(scores: np.ndarray, label) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(scores) against integer labels.

    ``scores`` is one score vector with a scalar label, or a ``(N, n)``
    batch with N labels; the gradient is that of the batch mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label))
    rows = scores.reshape(-1, scores.shape[-1])
    n = rows.shape[1]
    if labels.shape != (rows.shape[0],):
        raise DimensionError(f"{labels.size} labels for {rows.shape[0]} score vectors")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ArgumentError(f"label outside [0, {n})")

    logp = log_softmax(rows, axis=1)
    picked = logp[np.arange(rows.shape[0]), labels]
    loss = float(-picked.mean())

    grad = np.exp(logp)
    grad[np.arange(rows.shape[0]), labels] -= 1.0
    grad /= rows.shape[0]
    return loss, grad.reshape(scores.shape)


def triplet_cosine_loss(
    va: np.ndarray, vp: np.ndarray, vn: np.ndarray, alpha: float
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    va, vp, vn = (np.asarray(v, dtype=np.float64) for v in (va, vp, vn))
    if not va.shape == vp.shape == vn.shape:
        raise DimensionError(f"triplet shapes differ: {va.shape}, {vp.shape}, {vn.shape}")
    loss = max(0.0, dot(va, vn) - dot(va, vp) + alpha)
    if loss > 0:
        return loss, vn - vp, -va, va.copy()
    zero = np.zeros_like(va)
    return 0.0, zero, zero.copy(), zero.copy()


def _clamp_rho(rho: float) -> float:
    return min(max(rho, RHO_FLOOR), 1.0 - RHO_FLOOR)


def sparsity_loss(rho_hat: float, rho: float) -> float:
    if not 0 < rho_hat < 1:
        raise ArgumentError(f"target ratio {rho_hat} outside (0, 1)")
    rho = _clamp_rho(rho)
    return rho_hat * math.log(rho_hat / rho) + (1 - rho_hat) * math.log((1 - rho_hat) / (1 - rho))


def sparsity_grad_chain_rule(rho_hat: float, rho: float) -> float:
    """d l_spa / d beta via d l_spa / d rho times the surrogate d rho / d beta.

    The surrogate derivative of each indicator ``sign(v - beta)`` is
    ``-sign(v - beta)``, so averaging over all words gives ``-rho``.
    """
    rho = _clamp_rho(rho)
    dloss_drho = -rho_hat / rho + (1 - rho_hat) / (1 - rho)
    drho_dbeta = -rho
    return dloss_drho * drho_dbeta


def sparsity_loss_and_grad(rho_hat: float, rho: float) -> Tuple[float, float]:
    loss = sparsity_loss(rho_hat, rho)
    clamped = _clamp_rho(rho)
    grad = (rho_hat - clamped) / (1 - clamped)
    via_chain = sparsity_grad_chain_rule(rho_hat, rho)
    if not math.isclose(grad, via_chain, rel_tol=ROUTE_TOLERANCE, abs_tol=ROUTE_TOLERANCE):
        raise NumericError(f"closed form {grad!r} disagrees with chain rule {via_chain!r}", component="l_spa")
    return loss, grad


def combined_loss(l_cls: float, l_tri: float, l_spa: float, w: LossWeights) -> float:
    return l_cls + w.lambda1 * l_tri + w.lambda2 * l_spa


@dataclass(frozen=True)
class CategoryTree:
    """Rooted category hierarchy; categories hang off leaves."""

    parents: Mapping[int, int]
    root: int
    depth: Mapping[int, int]
    height: int
    leaf_of: Mapping[int, int]

    @classmethod
    def from_edges(cls, edges: Iterable[Tuple[int, int]], categories: Iterable[Tuple[int, int]]) -> "CategoryTree":
        parents: Dict[int, int] = {}
        for node, parent in edges:
            if node in parents:
                raise ArgumentError(f"node {node} listed twice")
            parents[node] = parent

        roots = [node for node, parent in parents.items() if parent == -1]
        if len(roots) != 1:
            raise ArgumentError(f"category tree needs exactly one root, found {len(roots)}")
        for node, parent in parents.items():
            if parent != -1 and parent not in parents:
                raise ArgumentError(f"node {node} has unknown parent {parent}")

        depth: Dict[int, int] = {}
        for node in parents:
            path = []
            current = node
            while current not in depth and current != roots[0]:
                if current in path:
                    raise ArgumentError(f"cycle through node {current}")
                path.append(current)
                current = parents[current]
            base = depth.get(current, 0)
            depth.setdefault(roots[0], 0)
            for offset, visited in enumerate(reversed(path), start=1):
                depth[visited] = base + offset

        has_children = {parent for parent in parents.values() if parent != -1}
        leaf_of: Dict[int, int] = {}
        for category, node in categories:
            if category in leaf_of:
                raise ArgumentError(f"category {category} mapped twice")
            if node not in parents or node in has_children:
                raise ArgumentError(f"category {category} must map to a leaf, got node {node}")
            leaf_of[category] = node

        leaves = [node for node in parents if node not in has_children]
        height = max(depth[node] for node in leaves)
        if height < 1:
            raise ArgumentError("category tree must be at least one level deep")
        return cls(parents, roots[0], depth, height, leaf_of)

    def lowest_common_ancestor(self, a: int, b: int) -> int:
        ancestors = set()
        while a != -1:
            ancestors.add(a)
            a = self.parents[a]
        while b not in ancestors:
            b = self.parents[b]
        return b


def load_category_tree(path) -> CategoryTree:
    """Read a tree file with ``[nodes]`` lines ``node_id parent_id`` and
    ``[categories]`` lines ``category_id node_id``; ``#`` starts a comment.
    """
    sections = {"[nodes]": [], "[categories]": []}
    current = None
    for number, line in enumerate(binio.read_text_lines(path, "tree file"), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line in sections:
            current = sections[line]
            continue
        try:
            first, second = (int(field) for field in line.split())
        except ValueError:
            raise FormatError(f"expected two integers, got {line!r}", offset=number)
        if current is None:
            raise FormatError("entry before any [nodes]/[categories] section", offset=number)
        current.append((first, second))
    return CategoryTree.from_edges(sections["[nodes]"], sections["[categories]"])


def category_similarity(tree: CategoryTree, c1: int, c2: int) -> float:
    if c1 == c2:
        raise ArgumentError("similarity is defined between different categories")
    for category in (c1, c2):
        if category not in tree.leaf_of:
            raise ArgumentError(f"category {category} is not in the tree")
    lca = tree.lowest_common_ancestor(tree.leaf_of[c1], tree.leaf_of[c2])
    return tree.depth[lca] / tree.height


def adaptive_margin(alpha: float, S: float) -> float:
    if alpha <= 0:
        raise ArgumentError("margin must be positive")
    if not 0.0 <= S <= 1.0:
        raise ArgumentError(f"similarity {S} outside [0, 1]")
    return alpha / (1.0 + S) ** 2
