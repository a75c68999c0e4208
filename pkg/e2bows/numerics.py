"""Dense arithmetic shared by every learnable layer and loss.

Tensors are plain ``numpy.ndarray`` objects in float64. Functions that
accept a batch treat the last axis as the vector axis.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from e2bows.errors import DimensionError, NumericError

REL_ERROR_FLOOR = 1e-8

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: int
    analytic: float
    numeric: float


def require_finite(x: np.ndarray, component: str) -> np.ndarray:
    """Raise ``NumericError`` naming ``component`` if ``x`` holds NaN/Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value", component=component)
    return x


def dot(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"dot needs equal-length vectors, got {u.shape} and {v.shape}")
    return float(np.dot(u, v))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` (or each row of a batch) to unit L2 norm.

    All-zero vectors come back unchanged; an image whose every SFM was
    discarded has no words and keeps the empty representation.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return v / safe


def l2_normalize_backward(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``l2_normalize`` at ``v`` given the upstream gradient.

    For u = v/|v| the Jacobian is (I - u u^T)/|v|; zero rows get zero gradient.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != np.shape(grad_out):
        raise DimensionError(f"gradient shape {np.shape(grad_out)} does not match {v.shape}")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    u = v / safe
    proj = np.sum(u * grad_out, axis=-1, keepdims=True)
    grad = (grad_out - u * proj) / safe
    return np.where(norms > 0, grad, 0.0)


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-4,
    coords: Optional[Iterable[int]] = None,
) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``x``.

    Args:
        f: Scalar function of an array shaped like ``x``.
        x: Evaluation point; never modified.
        analytic_grad: Gradient to certify, same shape as ``x``.
        eps: Half step of the central difference.
        coords: Flat indices to perturb; all coordinates when omitted.

    Returns:
        The worst coordinate with its relative error
        ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(f"gradient shape {analytic.shape} does not match {x.shape}")

    flat = x.reshape(-1)
    flat_grad = analytic.reshape(-1)
    indices = range(flat.size) if coords is None else coords

    report = GradCheckReport(0.0, -1, 0.0, 0.0)
    for i in indices:
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = f(x)
        flat[i] = saved - eps
        f_minus = f(x)
        flat[i] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"objective is not finite around coordinate {i}", component="finite_diff_check")

        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = flat_grad[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
        if report.worst_coordinate < 0 or rel > report.max_rel_error:
            report = GradCheckReport(float(rel), int(i), float(a), float(numeric))

    log.debug(f"gradient check: worst relative error {report.max_rel_error:.3e} at {report.worst_coordinate}")
    return report
