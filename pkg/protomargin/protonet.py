"""
Prototype network for protomargin.

Provides the convolutional backbone, the prototype layer, the margin head (h1) and
the malignancy head (h2), plus prototype activation maps and receptive-field
geometry used to visualize prototypes.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from protomargin import functional as F
from protomargin.functional import DEFAULT_EPSILON
from protomargin.seeding import stream_rng
from protomargin.synthgen import NUM_CLASSES
from protomargin.tensor import ShapeError, Tensor, no_grad


logger = logging.getLogger("protomargin.protonet")

# Published malignancy model: sigmoid((w . margin_logits + b) * scale).
PUBLISHED_MALIGNANCY_WEIGHTS = (-16.0, -10.0, 6.0)
PUBLISHED_MALIGNANCY_INTERCEPT = -155.0
PUBLISHED_MALIGNANCY_SCALE = 0.01

PARAM_GROUPS = ("backbone", "prototypes", "last_layer", "malignancy")


@dataclass
class ProtoNetConfig:
    """
    Architecture hyperparameters.

    Attributes:
        channels: Output channels of the conv blocks (each block halves H and W).
        prototype_dim: Latent channels c (the add-on 1x1 conv output).
        prototypes_per_class: Prototypes per margin class at initialization.
        num_classes: Number of margin classes.
        k: Top-k average pooling count.
        epsilon: Similarity epsilon in log((d + 1) / (d + epsilon)).
        image_size: Input side; must be divisible by 2 ** len(channels).

    Example:
        ```python
        from protomargin.protonet import ProtoNetConfig

        config = ProtoNetConfig(prototype_dim=32, k=1)
        ```
    """

    channels: tuple[int, ...] = (16, 32, 64)
    prototype_dim: int = 64
    prototypes_per_class: int = 5
    num_classes: int = NUM_CLASSES
    k: int = 5
    epsilon: float = DEFAULT_EPSILON
    image_size: int = 112

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.image_size % (2 ** len(self.channels)):
            raise ValueError(
                f"image_size {self.image_size} must be divisible by {2 ** len(self.channels)}"
            )
        if self.prototypes_per_class < 1:
            raise ValueError("prototypes_per_class must be at least 1")
        if not 1 <= self.k <= self.grid_size**2:
            raise ValueError(f"k must lie in [1, {self.grid_size ** 2}], got {self.k}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    @property
    def grid_size(self) -> int:
        return self.image_size // (2 ** len(self.channels))

    @property
    def num_prototypes(self) -> int:
        return self.prototypes_per_class * self.num_classes

    def to_dict(self) -> dict[str, object]:
        return {
            "channels": list(self.channels),
            "prototype_dim": self.prototype_dim,
            "prototypes_per_class": self.prototypes_per_class,
            "num_classes": self.num_classes,
            "k": self.k,
            "epsilon": self.epsilon,
            "image_size": self.image_size,
        }


@dataclass(frozen=True)
class Provenance:
    """Training patch a prototype was projected onto."""

    sample_id: str
    row: int
    col: int

    def to_dict(self) -> dict[str, object]:
        return {"sample_id": self.sample_id, "row": self.row, "col": self.col}


@dataclass
class ModelParams:
    """
    All learnable state of the network.

    Attributes:
        config: Architecture the arrays were built for.
        conv_weights: Backbone kernels, the last one being the 1x1 add-on.
        conv_biases: One bias per backbone kernel.
        prototypes: [m, c] prototype vectors.
        prototype_classes: [m] class tag of every prototype.
        prototype_ids: Stable ids, kept across pruning.
        provenance: Projection source per prototype (None before projection).
        last_layer: h1 weights W1 [num_classes, m].
        malignancy_weights: h2 weights [num_classes].
        malignancy_intercept: h2 intercept (0-d).
        malignancy_scale: Fixed multiplier applied to the h2 affine output.
        last_layer_initialized: Whether W1 received its +-1 initialization.
    """

    config: ProtoNetConfig
    conv_weights: list[Tensor]
    conv_biases: list[Tensor]
    prototypes: Tensor
    prototype_classes: np.ndarray
    prototype_ids: list[int]
    provenance: list[Provenance | None]
    last_layer: Tensor
    malignancy_weights: Tensor
    malignancy_intercept: Tensor
    malignancy_scale: float = 1.0
    last_layer_initialized: bool = False

    @property
    def num_prototypes(self) -> int:
        return int(self.prototypes.shape[0])

    def class_counts(self) -> list[int]:
        return [int(np.sum(self.prototype_classes == c)) for c in range(self.config.num_classes)]

    def class_identity(self) -> np.ndarray:
        """[m, num_classes] one-hot of prototype class tags."""
        return np.eye(self.config.num_classes)[self.prototype_classes]

    def group(self, name: str) -> list[Tensor]:
        if name == "backbone":
            pairs = zip(self.conv_weights, self.conv_biases, strict=True)
            return [t for pair in pairs for t in pair]
        if name == "prototypes":
            return [self.prototypes]
        if name == "last_layer":
            return [self.last_layer]
        if name == "malignancy":
            return [self.malignancy_weights, self.malignancy_intercept]
        raise ValueError(f"Unknown parameter group: {name}")

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Arrays in checkpoint field order."""
        named: list[tuple[str, np.ndarray]] = []
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases, strict=True)):
            named.append((f"conv{i}.weight", w.data))
            named.append((f"conv{i}.bias", b.data))
        named.append(("prototypes", self.prototypes.data))
        named.append(("last_layer", self.last_layer.data))
        named.append(("malignancy.weights", self.malignancy_weights.data))
        named.append(("malignancy.intercept", self.malignancy_intercept.data))
        return named

    def fingerprint(self, groups: Iterable[str] = PARAM_GROUPS) -> str:
        """SHA-256 over the raw bytes of the requested parameter groups."""
        digest = hashlib.sha256()
        for name in groups:
            for tensor in self.group(name):
                digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()

    def set_trainable(self, *groups: str) -> None:
        """Make exactly the named groups require gradients."""
        for name in PARAM_GROUPS:
            for tensor in self.group(name):
                tensor.requires_grad = name in groups
                tensor.zero_grad()

    def copy(self) -> ModelParams:
        return copy.deepcopy(self)


def init_params(config: ProtoNetConfig, seed: int) -> ModelParams:
    """
    Draw fresh parameters from the ``init`` stream of `seed`.

    Kernels are He-normal, biases zero, prototypes uniform on the unit hypercube,
    W1 is the +-1 class-connection pattern and h2 starts at zero.
    """
    rng = stream_rng(seed, "init")
    weights: list[Tensor] = []
    biases: list[Tensor] = []
    in_ch = 1
    for out_ch in config.channels:
        std = np.sqrt(2.0 / (in_ch * 9))
        weights.append(Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3))))
        biases.append(Tensor(np.zeros(out_ch)))
        in_ch = out_ch
    std = np.sqrt(1.0 / in_ch)
    weights.append(Tensor(rng.normal(0.0, std, size=(config.prototype_dim, in_ch, 1, 1))))
    biases.append(Tensor(np.zeros(config.prototype_dim)))

    m = config.num_prototypes
    classes = np.repeat(np.arange(config.num_classes), config.prototypes_per_class)
    params = ModelParams(
        config=config,
        conv_weights=weights,
        conv_biases=biases,
        prototypes=Tensor(rng.uniform(0.0, 1.0, size=(m, config.prototype_dim))),
        prototype_classes=classes.astype(np.int64),
        prototype_ids=list(range(m)),
        provenance=[None] * m,
        last_layer=Tensor(class_connection_matrix(classes, config.num_classes)),
        malignancy_weights=Tensor(np.zeros(config.num_classes)),
        malignancy_intercept=Tensor(np.zeros(())),
    )
    params.set_trainable(*PARAM_GROUPS)
    return params


def class_connection_matrix(prototype_classes: np.ndarray, num_classes: int) -> np.ndarray:
    """W1 initialization: +1 from a prototype to its own class, -1 to the others."""
    own = np.eye(num_classes)[np.asarray(prototype_classes)].T
    return 2.0 * own - 1.0


# ============================================================================
# Forward pass
# ============================================================================


@dataclass
class ForwardResult:
    """
    Everything one forward pass produces.

    Tensors stay on the tape when parameters require gradients; the numpy fields
    are plain values.
    """

    latent: Tensor
    distances: Tensor
    similarities: Tensor
    scores: Tensor
    logits: Tensor
    probabilities: np.ndarray
    malignancy: np.ndarray


@dataclass
class PAM:
    """Prototype activation map: a similarity grid upsampled to image resolution."""

    prototype: int
    values: np.ndarray
    sample_id: str = ""


def _as_batch(images: np.ndarray, image_size: int) -> np.ndarray:
    batch = np.asarray(images, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.ndim != 3 or batch.shape[1:] != (image_size, image_size):
        raise ShapeError(
            f"expected images of shape [N, {image_size}, {image_size}], got {np.shape(images)}"
        )
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return batch[:, None, :, :]


class ProtoNet:
    """
    The prototype network: backbone f, prototype layer g, heads h1 and h2.

    Example:
        ```python
        from protomargin.protonet import ProtoNet, ProtoNetConfig, init_params

        net = ProtoNet(init_params(ProtoNetConfig(), seed=0))
        result = net.forward(images)
        result.probabilities  # [N, 3]
        ```
    """

    def __init__(self, params: ModelParams) -> None:
        self.params = params

    @property
    def config(self) -> ProtoNetConfig:
        return self.params.config

    def backbone(self, x: Tensor) -> Tensor:
        """Conv blocks then the sigmoid add-on; [N,1,H,W] -> [N,c,H/8,W/8]."""
        p = self.params
        blocks = len(p.conv_weights) - 1
        for i in range(blocks):
            x = F.relu(F.conv2d(x, p.conv_weights[i], p.conv_biases[i], padding=1))
            x = F.avg_pool2d(x, 2)
        return F.sigmoid(F.conv2d(x, p.conv_weights[blocks], p.conv_biases[blocks]))

    def prototype_layer(self, latent: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return (distances, similarities, pooled scores) for a latent batch."""
        distances = F.l2_distance_map(latent, self.params.prototypes)
        similarities = F.dist_to_sim(distances, self.config.epsilon)
        scores = F.topk_avg_pool(similarities, self.config.k)
        return distances, similarities, scores

    def forward(self, images: np.ndarray) -> ForwardResult:
        x = Tensor(_as_batch(images, self.config.image_size))
        latent = self.backbone(x)
        distances, similarities, scores = self.prototype_layer(latent)
        logits = F.linear(scores, self.params.last_layer)
        return ForwardResult(
            latent=latent,
            distances=distances,
            similarities=similarities,
            scores=scores,
            logits=logits,
            probabilities=F.softmax_probabilities(logits.data),
            malignancy=self.malignancy_probability(logits.data),
        )

    def predict(self, images: np.ndarray) -> ForwardResult:
        """Forward pass without recording a graph."""
        with no_grad():
            return self.forward(images)

    def latent_of(self, image: np.ndarray) -> np.ndarray:
        """[c, g, g] latent of a single image, computed on its own."""
        with no_grad():
            x = Tensor(_as_batch(image, self.config.image_size))
            return self.backbone(x).data[0].copy()

    def malignancy_probability(self, logits: np.ndarray) -> np.ndarray:
        p = self.params
        intercept = float(p.malignancy_intercept.data)
        return malignancy_probability(
            logits, p.malignancy_weights.data, intercept, p.malignancy_scale
        )


def malignancy_probability(
    logits: np.ndarray,
    weights: np.ndarray | tuple[float, ...] = PUBLISHED_MALIGNANCY_WEIGHTS,
    intercept: float = PUBLISHED_MALIGNANCY_INTERCEPT,
    scale: float = PUBLISHED_MALIGNANCY_SCALE,
) -> np.ndarray:
    """
    sigmoid(scale * (weights . logits + intercept)) on unnormalized margin logits.

    Accepts one logit vector or a batch [N, 3].

    Example:
        ```python
        malignancy_probability(np.zeros(3))  # sigmoid(-1.55) ~= 0.1750
        ```
    """
    z = np.asarray(logits, dtype=np.float64) @ np.asarray(weights, dtype=np.float64)
    return expit(scale * (z + intercept))


# ============================================================================
# Activation maps and geometry
# ============================================================================


def compute_pam(
    similarities: np.ndarray | Tensor,
    j: int,
    image_size: int = 112,
    sample_id: str = "",
) -> PAM:
    """
    Upsample prototype `j`'s similarity grid to image resolution (raw values).

    `similarities` is the [m, g, g] stack of one image.

    Raises:
        ValueError: If j is out of range.
    """
    grids = similarities.data if isinstance(similarities, Tensor) else np.asarray(similarities)
    if grids.ndim != 3:
        raise ShapeError(f"expected similarity maps [m, g, g], got {grids.shape}")
    if not 0 <= j < grids.shape[0]:
        raise ValueError(f"prototype index {j} out of range [0, {grids.shape[0]})")
    with no_grad():
        values = F.bilinear_upsample(Tensor(grids[j]), image_size, image_size).data
    return PAM(prototype=j, values=values, sample_id=sample_id)


def receptive_field(
    row: int, col: int, config: ProtoNetConfig | None = None
) -> tuple[int, int, int, int]:
    """
    Pixel box (top, left, bottom, right; bottom/right exclusive) seen by a latent cell.

    Walks the backbone layers (3x3 pad-1 convs, 2x2 pools, the 1x1 add-on) tracking
    field size, jump and first-cell center, then clips to the image.
    """
    config = config or ProtoNetConfig()
    layers: list[tuple[int, int, int]] = []
    for _ in config.channels:
        layers.extend([(3, 1, 1), (2, 2, 0)])
    layers.append((1, 1, 0))

    size, jump, start = 1.0, 1.0, 0.5
    for kernel, stride, padding in layers:
        size += (kernel - 1) * jump
        start += ((kernel - 1) / 2 - padding) * jump
        jump *= stride

    def span(index: int) -> tuple[int, int]:
        center = start + index * jump
        lo = int(np.floor(center - size / 2))
        return max(lo, 0), min(lo + int(size), config.image_size)

    top, bottom = span(row)
    left, right = span(col)
    return top, left, bottom, right


def cell_to_pixel(
    row: int, col: int, grid_size: int = 14, image_size: int = 112
) -> tuple[int, int]:
    """Pixel a latent cell lands on under corner-aligned upsampling."""
    scale = (image_size - 1) / (grid_size - 1)
    return int(round(row * scale)), int(round(col * scale))


def prototypes_by_class(params: ModelParams) -> dict[int, list[int]]:
    """Prototype indices grouped by class tag."""
    grouped: dict[int, list[int]] = {c: [] for c in range(params.config.num_classes)}
    for j, c in enumerate(params.prototype_classes):
        grouped[int(c)].append(j)
    return grouped
