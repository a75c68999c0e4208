"""Semantic Feature Maps.

The category classifier is a C x n fully connected layer. Read column by
column it is a bank of n 1x1 convolution kernels; sliding them over the
h x w x C feature maps gives one h x w map per category whose spatial
mean is exactly that category's classification score.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from e2bows.backbone import FeatureMaps, glorot_uniform
from e2bows.errors import DimensionError


@dataclass
class ClassifierWeights:
    weights: np.ndarray  # (C, n)
    biases: np.ndarray  # (n,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise DimensionError(f"classifier weights {self.weights.shape} and biases {self.biases.shape} disagree")
        if self.weights.shape[1] < 2:
            raise DimensionError("a classifier needs at least two categories")

    @property
    def class_count(self) -> int:
        return self.weights.shape[1]


@dataclass
class ConvKernels:
    kernels: np.ndarray  # (n, C): kernel c is the 1x1xC filter of category c
    biases: np.ndarray  # (n,)


@dataclass
class SfmStack:
    maps: np.ndarray  # (..., n, h, w)
    avg: np.ndarray  # (..., n)


def init_classifier(rng: np.random.Generator, channels: int, class_count: int) -> ClassifierWeights:
    return ClassifierWeights(
        glorot_uniform(rng, (channels, class_count), channels, class_count),
        np.zeros(class_count),
    )


def fc_to_conv(fc: ClassifierWeights) -> ConvKernels:
    return ConvKernels(fc.weights.T.copy(), fc.biases.copy())


def conv_to_fc(kernels: ConvKernels) -> ClassifierWeights:
    return ClassifierWeights(kernels.kernels.T.copy(), kernels.biases.copy())


def compute_sfms(f: FeatureMaps, k: ConvKernels) -> SfmStack:
    if f.channels != k.kernels.shape[1]:
        raise DimensionError(f"feature maps have {f.channels} channels, kernels expect {k.kernels.shape[1]}")
    maps = np.einsum("...hwc,nc->...nhw", f.values, k.kernels) + k.biases[:, None, None]
    return SfmStack(maps, maps.mean(axis=(-2, -1)))


def classification_scores(s: SfmStack) -> np.ndarray:
    return s.avg.copy()


def active_sfm_mask(s: SfmStack) -> np.ndarray:
    # zero is not negative, so a map averaging exactly 0 stays active
    return s.avg >= 0


def scores_to_map_grad(grad_scores: np.ndarray, map_shape: Tuple[int, int]) -> np.ndarray:
    """Spread a gradient on the avg-pooled scores uniformly over each map."""
    h, w = map_shape
    grad = np.asarray(grad_scores, dtype=np.float64)[..., None, None] / (h * w)
    return np.broadcast_to(grad, grad.shape[:-2] + (h, w)).copy()


def sfm_backward(
    f: FeatureMaps, k: ConvKernels, grad_maps: np.ndarray
) -> Tuple[ConvKernels, np.ndarray]:
    """Gradients of the 1x1 convolution for a ``(..., n, h, w)`` map gradient.

    Returns kernel/bias gradients summed over any batch axis, and the
    gradient with respect to the feature maps.
    """
    expected = f.values.shape[:-3] + (k.kernels.shape[0],) + f.values.shape[-3:-1]
    if grad_maps.shape != expected:
        raise DimensionError(f"map gradient {grad_maps.shape} does not match {expected}")
    flat_maps = grad_maps.reshape((-1,) + grad_maps.shape[-3:])
    flat_features = f.values.reshape((-1,) + f.values.shape[-3:])
    grad_kernels = np.einsum("bnhw,bhwc->nc", flat_maps, flat_features)
    grad_biases = flat_maps.sum(axis=(0, 2, 3))
    grad_features = np.einsum("...nhw,nc->...hwc", grad_maps, k.kernels)
    return ConvKernels(grad_kernels, grad_biases), grad_features
