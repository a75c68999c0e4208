"""SGD training of the backbone, SFM classifier and Bag-of-Words Layer.

One step minimises ``l_cls + lambda1 * l_tri`` over the weights and moves
the threshold beta along the surrogate sparsity gradient scaled by
``lambda2``. Batches are stacked arrays, so every reduction over images is
a fixed-order numpy sum and runs are reproducible from the seed.
"""
import copy
import json
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from e2bows import binio, validators
from e2bows.backbone import (
    DEFAULT_BLOCKS,
    BackboneConfig,
    BackboneParams,
    FeatureMaps,
    backbone_backward,
    backbone_forward,
    init_backbone,
)
from e2bows.bowl import (
    BowlParams,
    VisualWordVector,
    bowl_backward,
    bowl_forward,
    extract_words,
    init_bowl,
    normalized_words,
    sparsity_ratio,
)
from e2bows.errors import ArgumentError, DimensionError, FormatError
from e2bows.losses import (
    CategoryTree,
    LossWeights,
    adaptive_margin,
    category_similarity,
    combined_loss,
    softmax_cross_entropy,
    sparsity_loss_and_grad,
    triplet_cosine_loss,
)
from e2bows.numerics import l2_normalize_backward, require_finite
from e2bows.sfm import (
    ClassifierWeights,
    active_sfm_mask,
    classification_scores,
    compute_sfms,
    conv_to_fc,
    fc_to_conv,
    init_classifier,
    scores_to_map_grad,
    sfm_backward,
)

CHECKPOINT_MAGIC = b"E2BW"
DEFAULT_LAMBDA1 = 1.0
DEFAULT_LAMBDA2 = 1.0
DEFAULT_ALPHA = 0.2
DEFAULT_RHO_HAT = 0.03
DEFAULT_LEARNING_RATE = 0.03
DEFAULT_BETA_LEARNING_RATE = 0.01
DEFAULT_BATCH_SIZE = 16
DEFAULT_EPOCHS = 40
DEFAULT_SEED = 7
DEFAULT_WORDS_PER_SFM = 10

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    alpha: float = DEFAULT_ALPHA
    rho_hat: float = DEFAULT_RHO_HAT
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta_learning_rate: float = DEFAULT_BETA_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    rng_seed: int = DEFAULT_SEED
    m: int = DEFAULT_WORDS_PER_SFM
    freeze_backbone: bool = False
    beta_init: float = 0.0
    blocks: Tuple[Tuple[int, int], ...] = DEFAULT_BLOCKS

    def __post_init__(self):
        checks = {
            "lambda1": validators.non_negative_float,
            "lambda2": validators.non_negative_float,
            "alpha": validators.positive_float,
            "rho_hat": validators.open_unit_interval,
            "learning_rate": validators.positive_float,
            "beta_learning_rate": validators.positive_float,
            "batch_size": validators.positive_int,
            "epochs": validators.non_negative_int,
            "rng_seed": validators.non_negative_int,
            "m": validators.positive_int,
            "freeze_backbone": validators.boolean,
            "beta_init": validators.non_negative_float,
            "blocks": validators.block_list,
        }
        for name, check in checks.items():
            object.__setattr__(self, name, check(getattr(self, name)))

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.alpha, self.rho_hat)

    @classmethod
    def from_config(cls, config: Dict[str, Any], **overrides) -> "TrainConfig":
        """Build from ``e2bows.train.*`` keys; non-None ``overrides`` win."""
        values = {}
        for name in cls.__dataclass_fields__:
            key = "e2bows.backbone.blocks" if name == "blocks" else f"e2bows.train.{name}"
            if name == "rng_seed":
                key = "e2bows.train.seed"
            if config.get(key) is not None:
                values[name] = config.get(key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["blocks"] = [list(block) for block in self.blocks]
        return out


@dataclass
class ModelParams:
    backbone: Optional[BackboneParams]
    classifier: ClassifierWeights
    bowl: BowlParams

    @property
    def class_count(self) -> int:
        return self.classifier.class_count

    @property
    def dim(self) -> int:
        return self.bowl.dim

    def named_tensors(self) -> List[Tuple[str, np.ndarray]]:
        named = []
        if self.backbone is not None:
            for i, (kernel, bias) in enumerate(zip(self.backbone.kernels, self.backbone.biases)):
                named += [(f"backbone.kernel.{i}", kernel), (f"backbone.bias.{i}", bias)]
        named += [
            ("classifier.weights", self.classifier.weights),
            ("classifier.biases", self.classifier.biases),
            ("bowl.weights", self.bowl.weights),
            ("bowl.biases", self.bowl.biases),
        ]
        return named

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_labels: np.ndarray
    negative_labels: np.ndarray
    margins: np.ndarray

    def __len__(self) -> int:
        return int(self.anchors.size)

    @classmethod
    def empty(cls) -> "TripletBatch":
        none = np.zeros(0, dtype=np.int64)
        return cls(none, none, none, none, none, np.zeros(0))


@dataclass
class LossReport:
    cls: float
    tri: float
    spa: float
    total: float
    rho: float
    beta: float
    triplets: int = 0
    step: int = 0
    epoch: int = 0


@dataclass
class Activations:
    features: FeatureMaps
    backbone_cache: Any
    kernels: Any
    stack: Any
    raw: np.ndarray
    bowl_cache: Any


def init_model(
    class_count: int,
    cfg: TrainConfig,
    backbone_config: Optional[BackboneConfig] = None,
    feature_shape: Optional[Tuple[int, int, int]] = None,
) -> ModelParams:
    """Fresh parameters; without ``backbone_config`` the head runs on features of ``feature_shape``."""
    if backbone_config is not None:
        backbone = init_backbone(backbone_config)
        feature_shape = backbone_config.output_shape
    elif feature_shape is None:
        raise ArgumentError("either a backbone config or a feature shape is required")
    else:
        backbone = None
    h, w, channels = feature_shape
    rng = np.random.default_rng([cfg.rng_seed, 1])
    classifier = init_classifier(rng, channels, class_count)
    bowl = init_bowl(rng, class_count, h * w, cfg.m, beta=cfg.beta_init)
    return ModelParams(backbone, classifier, bowl)


def forward(params: ModelParams, inputs: np.ndarray) -> Activations:
    if params.backbone is not None:
        features, backbone_cache = backbone_forward(inputs, params.backbone)
    else:
        features, backbone_cache = FeatureMaps(np.asarray(inputs, dtype=np.float64)), None
    kernels = fc_to_conv(params.classifier)
    stack = compute_sfms(features, kernels)
    raw, bowl_cache = bowl_forward(stack, active_sfm_mask(stack), params.bowl)
    return Activations(features, backbone_cache, kernels, stack, raw, bowl_cache)


def sample_triplets(
    labels: Sequence[int],
    tree: Optional[CategoryTree],
    count: int,
    rng: np.random.Generator,
    alpha: float = DEFAULT_ALPHA,
) -> TripletBatch:
    """Draw ``count`` (anchor, positive, negative) index triplets from one batch.

    Anchors are uniform over images that have a same-label partner. The
    margin of each triplet shrinks with the tree similarity of the anchor
    and negative categories; without a tree every margin is ``alpha``.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ArgumentError("triplets need at least two distinct labels")

    eligible = np.array([i for i in range(labels.size) if np.count_nonzero(labels == labels[i]) > 1])
    if eligible.size == 0:
        log.warning("No label repeats within the batch; no triplet can be formed")
        return TripletBatch.empty()

    anchors = rng.choice(eligible, size=count)
    positives = np.empty(count, dtype=np.int64)
    negatives = np.empty(count, dtype=np.int64)
    margins = np.empty(count)
    for t, a in enumerate(anchors):
        same = np.flatnonzero(labels == labels[a])
        positives[t] = rng.choice(same[same != a])
        negatives[t] = rng.choice(np.flatnonzero(labels != labels[a]))
        if tree is None:
            margins[t] = alpha
        else:
            margins[t] = adaptive_margin(alpha, category_similarity(tree, int(labels[a]), int(labels[negatives[t]])))
    return TripletBatch(anchors, positives, negatives, labels[anchors], labels[negatives], margins)


def _triplet_term(words: np.ndarray, triplets: TripletBatch) -> Tuple[float, np.ndarray]:
    grad = np.zeros_like(words)
    if not len(triplets):
        return 0.0, grad
    total = 0.0
    for a, p, n, margin in zip(triplets.anchors, triplets.positives, triplets.negatives, triplets.margins):
        loss, ga, gp, gn = triplet_cosine_loss(words[a], words[p], words[n], margin)
        total += loss
        grad[a] += ga
        grad[p] += gp
        grad[n] += gn
    return total / len(triplets), grad / len(triplets)


def objective_and_grads(
    inputs: np.ndarray,
    labels: np.ndarray,
    triplets: TripletBatch,
    params: ModelParams,
    cfg: TrainConfig,
) -> Tuple[LossReport, ModelParams, float]:
    """Loss components, weight gradients of ``l_cls + lambda1 * l_tri`` and d l_spa / d beta."""
    acts = forward(params, inputs)
    l_cls, grad_scores = softmax_cross_entropy(classification_scores(acts.stack), labels)

    words = normalized_words(acts.raw)
    l_tri, grad_words = _triplet_term(words, triplets)
    grad_raw = l2_normalize_backward(acts.raw, cfg.lambda1 * grad_words)

    rho = sparsity_ratio(words, params.bowl.beta)
    l_spa, grad_beta = sparsity_loss_and_grad(cfg.rho_hat, rho)

    for name, value in (("l_cls", l_cls), ("l_tri", l_tri), ("l_spa", l_spa)):
        require_finite(np.asarray(value), name)

    bowl_grads, grad_maps = bowl_backward(acts.bowl_cache, grad_raw)
    grad_maps = grad_maps + scores_to_map_grad(grad_scores, acts.stack.maps.shape[-2:])
    kernel_grads, grad_features = sfm_backward(acts.features, acts.kernels, grad_maps)

    backbone_grads = None
    if params.backbone is not None and not cfg.freeze_backbone:
        backbone_grads, _ = backbone_backward(acts.backbone_cache, grad_features)

    grads = ModelParams(backbone_grads, conv_to_fc(kernel_grads), bowl_grads)
    for name, tensor in grads.named_tensors():
        require_finite(tensor, f"gradient of {name}")

    report = LossReport(
        cls=l_cls,
        tri=l_tri,
        spa=l_spa,
        total=combined_loss(l_cls, l_tri, l_spa, cfg.loss_weights),
        rho=rho,
        beta=params.bowl.beta,
        triplets=len(triplets),
    )
    return report, grads, grad_beta


def update_beta(beta: float, grad_beta: float, cfg: TrainConfig) -> float:
    return max(0.0, beta - cfg.beta_learning_rate * cfg.lambda2 * grad_beta)


def train_step(
    inputs: np.ndarray,
    labels: np.ndarray,
    triplets: TripletBatch,
    params: ModelParams,
    cfg: TrainConfig,
) -> Tuple[ModelParams, LossReport]:
    """
    Apply one plain SGD update to a copy of ``params``.

    Args:
        inputs: Batch of images, or feature maps for a headless model.
        labels: Primary label of every batch image.
        triplets: Index triplets into the batch; may be empty.
        params: Current parameters, left untouched.
        cfg: Learning rates, loss weights and the target ratio.

    Returns:
        The updated parameters and the loss report measured before the update
    """
    report, grads, grad_beta = objective_and_grads(inputs, labels, triplets, params, cfg)
    lr = cfg.learning_rate

    updated = params.copy()
    if grads.backbone is not None:
        for i in range(len(updated.backbone.kernels)):
            updated.backbone.kernels[i] -= lr * grads.backbone.kernels[i]
            updated.backbone.biases[i] -= lr * grads.backbone.biases[i]
    updated.classifier.weights -= lr * grads.classifier.weights
    updated.classifier.biases -= lr * grads.classifier.biases
    updated.bowl.weights -= lr * grads.bowl.weights
    updated.bowl.biases -= lr * grads.bowl.biases
    updated.bowl.beta = update_beta(params.bowl.beta, grad_beta, cfg)
    return updated, report


def train(dataset, cfg: TrainConfig, head_only: bool = False) -> Tuple[ModelParams, List[LossReport]]:
    """Run ``epochs * ceil(N / batch_size)`` SGD steps over ``dataset``.

    ``dataset`` needs ``images`` (stacked inputs), ``labels`` (primary label
    per image), ``class_count`` and an optional ``tree``. With ``head_only``
    the images are precomputed ``(h, w, C)`` feature maps and no backbone
    is created.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    if images.shape[0] == 0:
        raise ArgumentError("cannot train on an empty dataset")
    if np.unique(labels).size < 2:
        raise ArgumentError("training needs at least two classes")

    if head_only:
        params = init_model(dataset.class_count, cfg, feature_shape=images.shape[1:])
    else:
        h, w, c = images.shape[1:]
        params = init_model(dataset.class_count, cfg, BackboneConfig(h, w, c, cfg.blocks, cfg.rng_seed))

    rng = np.random.default_rng(cfg.rng_seed)
    tree = getattr(dataset, "tree", None)
    history: List[LossReport] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(images.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            batch_labels = labels[batch]
            if np.unique(batch_labels).size > 1:
                triplets = sample_triplets(batch_labels, tree, cfg.batch_size, rng, cfg.alpha)
            else:
                triplets = TripletBatch.empty()
            params, report = train_step(images[batch], batch_labels, triplets, params, cfg)
            report.step, report.epoch = step, epoch
            history.append(report)
            log.debug(
                f"step {step}: cls={report.cls:.4f} tri={report.tri:.4f} "
                f"spa={report.spa:.4f} rho={report.rho:.4f} beta={report.beta:.4f}"
            )
            step += 1
        epoch_reports = [r for r in history if r.epoch == epoch]
        log.info(
            f"epoch {epoch + 1}/{cfg.epochs}: "
            f"cls={np.mean([r.cls for r in epoch_reports]):.4f} "
            f"tri={np.mean([r.tri for r in epoch_reports]):.4f} "
            f"rho={epoch_reports[-1].rho:.4f} beta={params.bowl.beta:.4f}"
        )
    return params, history


def raw_words(params: ModelParams, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    chunks = [forward(params, inputs[i:i + batch_size]).raw for i in range(0, inputs.shape[0], batch_size)]
    if not chunks:
        return np.zeros((0, params.dim))
    return np.concatenate(chunks)


def extract_vectors(
    params: ModelParams,
    inputs: np.ndarray,
    beta: Optional[float] = None,
    binary: bool = False,
    batch_size: int = 64,
) -> List[VisualWordVector]:
    """Sparse word vectors of ``inputs`` at the learned threshold or ``beta``."""
    threshold = params.bowl.beta if beta is None else validators.non_negative_float(beta)
    return extract_words(raw_words(params, inputs, batch_size), threshold, binary=binary)


def save_checkpoint(params: ModelParams, cfg: TrainConfig, path) -> None:
    backbone_cfg = None
    if params.backbone is not None:
        backbone_cfg = asdict(params.backbone.config)
        backbone_cfg["blocks"] = [list(block) for block in params.backbone.config.blocks]
    header = json.dumps(
        {
            "train": cfg.to_dict(),
            "backbone": backbone_cfg,
            "class_count": params.class_count,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    named = params.named_tensors()
    with open(path, "wb") as fh:
        binio.write_header(fh, CHECKPOINT_MAGIC)
        fh.write(binio.pack("I", len(header)))
        fh.write(header)
        fh.write(binio.pack("I", len(named)))
        for name, tensor in named:
            encoded = name.encode("utf-8")
            fh.write(binio.pack("I", len(encoded)) + encoded)
            fh.write(binio.pack("I", tensor.ndim) + binio.pack(f"{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
        fh.write(binio.pack("d", params.bowl.beta))
    log.info(f"Saved checkpoint to {path}")


def load_checkpoint(path) -> Tuple[ModelParams, TrainConfig]:
    reader = binio.BinaryReader(binio.read_file(path), name="checkpoint")
    reader.expect_magic(CHECKPOINT_MAGIC)
    header_offset = reader.offset
    try:
        header = json.loads(reader.raw(reader.u32()).decode("utf-8"))
        train_values = header["train"]
        train_values["blocks"] = tuple(tuple(block) for block in train_values["blocks"])
        cfg = TrainConfig(**train_values)
        backbone_cfg = None
        if header["backbone"] is not None:
            values = dict(header["backbone"])
            values["blocks"] = tuple(tuple(block) for block in values["blocks"])
            backbone_cfg = BackboneConfig(**values)
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}", offset=header_offset)

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.raw(reader.u32()).decode("utf-8", errors="replace")
        shape = reader.unpack(f"{reader.u32()}I")
        tensors[name] = reader.array("<f8", int(np.prod(shape))).reshape(shape)
    beta_offset = reader.offset
    beta = reader.f64()
    reader.expect_end()

    try:
        backbone = None
        if backbone_cfg is not None:
            layers = range(len(backbone_cfg.blocks))
            backbone = BackboneParams(
                backbone_cfg,
                [tensors[f"backbone.kernel.{i}"] for i in layers],
                [tensors[f"backbone.bias.{i}"] for i in layers],
            )
        params = ModelParams(
            backbone,
            ClassifierWeights(tensors["classifier.weights"], tensors["classifier.biases"]),
            BowlParams(tensors["bowl.weights"], tensors["bowl.biases"], beta),
        )
    except KeyError as e:
        raise FormatError(f"checkpoint lacks tensor {e}", offset=beta_offset)
    except (DimensionError, ArgumentError) as e:
        raise FormatError(f"inconsistent checkpoint: {e}", offset=beta_offset)
    return params, cfg
