"""Small trainable convolutional feature extractor.

Each block is a same-padded stride-1 k x k convolution, ReLU and a 2 x 2
max-pool. Arrays are channels-last, ``(N, H, W, C)``; a single image of
shape ``(H, W, C)`` is accepted everywhere and returned without the batch
axis.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from e2bows import binio
from e2bows.errors import DimensionError, FormatError

FEATURE_MAGIC = b"E2FM"
DEFAULT_BLOCKS = ((3, 16), (3, 32), (3, 64))
POOL = 2

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    input_height: int = 32
    input_width: int = 32
    input_channels: int = 3
    blocks: Tuple[Tuple[int, int], ...] = DEFAULT_BLOCKS
    rng_seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(k), int(c)) for k, c in self.blocks))
        if not self.blocks:
            raise DimensionError("backbone needs at least one block")
        for kernel, channels in self.blocks:
            if kernel < 1 or kernel % 2 == 0 or channels < 1:
                raise DimensionError(f"block ({kernel}, {channels}) needs an odd kernel and positive channels")
        height, width = self.output_shape[:2]
        if height < 1 or width < 1:
            raise DimensionError(f"{len(self.blocks)} pooled blocks shrink the input to {height}x{width}")

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        height, width = self.input_height, self.input_width
        for _ in self.blocks:
            height, width = height // POOL, width // POOL
        return height, width, self.blocks[-1][1]


@dataclass
class BackboneParams:
    config: BackboneConfig
    kernels: List[np.ndarray]
    biases: List[np.ndarray]

    def tensors(self) -> List[np.ndarray]:
        out = []
        for kernel, bias in zip(self.kernels, self.biases):
            out.extend([kernel, bias])
        return out

    def zeros_like(self) -> "BackboneParams":
        return BackboneParams(
            self.config,
            [np.zeros_like(k) for k in self.kernels],
            [np.zeros_like(b) for b in self.biases],
        )


@dataclass
class FeatureMaps:
    """Non-negative ``(h, w, C)`` activations, optionally with a leading batch axis."""

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[-3]

    @property
    def width(self) -> int:
        return self.values.shape[-2]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


@dataclass
class ForwardCache:
    params: "BackboneParams"
    single: bool
    inputs: List[np.ndarray] = field(default_factory=list)
    cols: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    pool_argmax: List[np.ndarray] = field(default_factory=list)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_backbone(config: BackboneConfig) -> BackboneParams:
    rng = np.random.default_rng(config.rng_seed)
    kernels, biases = [], []
    in_channels = config.input_channels
    for kernel, out_channels in config.blocks:
        shape = (kernel, kernel, in_channels, out_channels)
        kernels.append(
            glorot_uniform(rng, shape, kernel * kernel * in_channels, kernel * kernel * out_channels)
        )
        biases.append(np.zeros(out_channels))
        in_channels = out_channels
    return BackboneParams(config, kernels, biases)


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # (N, H, W, C, k, k) -> (N, H, W, k, k, C)
    windows = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
    windows = windows.transpose(0, 1, 2, 4, 5, 3)
    n, h, w = x.shape[:3]
    return windows.reshape(n * h * w, kernel * kernel * x.shape[3])


def _col2im(dcols: np.ndarray, shape: Tuple[int, ...], kernel: int) -> np.ndarray:
    n, h, w, c = shape
    pad = kernel // 2
    dcols = dcols.reshape(n, h, w, kernel, kernel, c)
    dpadded = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(kernel):
        for j in range(kernel):
            dpadded[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return dpadded[:, pad:pad + h, pad:pad + w, :]


def _pool_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    h2, w2 = h // POOL, w // POOL
    trimmed = x[:, :h2 * POOL, :w2 * POOL, :]
    # (N, h2, w2, C, POOL*POOL), window laid out row-major
    windows = trimmed.reshape(n, h2, POOL, w2, POOL, c).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(n, h2, w2, c, POOL * POOL)
    argmax = np.argmax(windows, axis=-1)
    return np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0], argmax


def _pool_backward(grad: np.ndarray, argmax: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    n, h, w, c = shape
    h2, w2 = grad.shape[1:3]
    windows = np.zeros((n, h2, w2, c, POOL * POOL))
    np.put_along_axis(windows, argmax[..., None], grad[..., None], axis=-1)
    windows = windows.reshape(n, h2, w2, c, POOL, POOL).transpose(0, 1, 4, 2, 5, 3)
    out = np.zeros(shape)
    out[:, :h2 * POOL, :w2 * POOL, :] = windows.reshape(n, h2 * POOL, w2 * POOL, c)
    return out


def backbone_forward(image: np.ndarray, params: BackboneParams) -> Tuple[FeatureMaps, ForwardCache]:
    cfg = params.config
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    expected = (cfg.input_height, cfg.input_width, cfg.input_channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(f"image shape {np.shape(image)} does not match configured {expected}")

    cache = ForwardCache(params=params, single=single)
    for (kernel_size, out_channels), kernel, bias in zip(cfg.blocks, params.kernels, params.biases):
        n, h, w, _ = x.shape
        cols = _im2col(x, kernel_size)
        pre = (cols @ kernel.reshape(-1, out_channels) + bias).reshape(n, h, w, out_channels)
        pooled, argmax = _pool_forward(np.maximum(pre, 0.0))
        cache.inputs.append(x)
        cache.cols.append(cols)
        cache.pre_activations.append(pre)
        cache.pool_argmax.append(argmax)
        x = pooled

    return FeatureMaps(x[0] if single else x), cache


def backbone_backward(cache: ForwardCache, grad_out: np.ndarray) -> Tuple[BackboneParams, np.ndarray]:
    """Back-propagate ``grad_out`` (shaped like the forward output) through every block.

    Returns gradients for each kernel and bias, summed over the batch, and
    the gradient with respect to the input image(s).
    """
    params = cache.params
    grad = np.asarray(grad_out, dtype=np.float64)
    if cache.single:
        grad = grad[None]
    if not cache.inputs:
        raise DimensionError("empty forward cache")
    expected = cache.pool_argmax[-1].shape
    if grad.shape != expected:
        raise DimensionError(f"gradient shape {grad.shape} does not match forward output {expected}")

    grads = params.zeros_like()
    for layer in reversed(range(len(params.kernels))):
        kernel = params.kernels[layer]
        kernel_size, _, _, out_channels = kernel.shape
        pre = cache.pre_activations[layer]
        grad_relu = _pool_backward(grad, cache.pool_argmax[layer], pre.shape)
        grad_pre = (grad_relu * (pre > 0)).reshape(-1, out_channels)

        grads.kernels[layer] = (cache.cols[layer].T @ grad_pre).reshape(kernel.shape)
        grads.biases[layer] = grad_pre.sum(axis=0)
        dcols = grad_pre @ kernel.reshape(-1, out_channels).T
        grad = _col2im(dcols, cache.inputs[layer].shape, kernel_size)

    return grads, grad[0] if cache.single else grad


def write_feature_file(path, records: Sequence[Tuple[int, FeatureMaps]]) -> None:
    if records:
        h, w, c = records[0][1].values.shape
    else:
        h = w = c = 0
    for image_id, maps in records:
        if maps.values.shape != (h, w, c):
            raise DimensionError(f"feature maps of image {image_id} are {maps.values.shape}, file holds {(h, w, c)}")
    with open(path, "wb") as fh:
        binio.write_header(fh, FEATURE_MAGIC)
        fh.write(binio.pack("IIII", len(records), h, w, c))
        for image_id, maps in records:
            fh.write(binio.pack("Q", int(image_id)))
            fh.write(np.ascontiguousarray(maps.values, dtype="<f4").tobytes())
    log.info(f"Wrote {len(records)} feature records to {path}")


def read_feature_file(path) -> List[Tuple[int, FeatureMaps]]:
    reader = binio.BinaryReader(binio.read_file(path), name="feature file")
    reader.expect_magic(FEATURE_MAGIC)
    count, h, w, c = reader.unpack("IIII")
    if count and min(h, w, c) == 0:
        raise FormatError(f"header declares {count} records of empty shape {(h, w, c)}", offset=12)

    records = []
    for _ in range(count):
        image_id = reader.u64()
        values = reader.array("<f4", h * w * c).astype(np.float64).reshape(h, w, c)
        records.append((image_id, FeatureMaps(values)))
    reader.expect_end()
    return records

