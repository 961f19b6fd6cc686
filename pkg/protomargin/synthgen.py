"""
Synthetic three-margin-class lesion corpus for protomargin.

Generates grayscale lesion images with a margin-class label, a malignancy label, a
lesion-scale mask and a fine-annotation mask. Mask convention everywhere: 0 marks
pixels relevant to mass-margin identification, 1 marks everything else.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from protomargin.seeding import derive_seed


logger = logging.getLogger("protomargin.synthgen")

IMAGE_SIZE = 112
BORDER = 8
BOUNDARY_BAND_PX = 3
SHARP_EDGE_MAX_SIGMA = 0.75
BLURRED_EDGE_MIN_SIGMA = 1.5
GLYPH_BOX = (2, 2, 11, 11)  # top, left, bottom, right (inclusive)
CENTER_ATTEMPTS = 100


class MarginClass(IntEnum):
    """Mass-margin classes, indexed in the order the model heads use."""

    CIRCUMSCRIBED = 0
    INDISTINCT = 1
    SPICULATED = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | int) -> MarginClass:
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"Unknown margin class: {value}") from None
        return cls(value)


NUM_CLASSES = len(MarginClass)

# Synthetic ground truth mirroring the medical prior: spiculated lesions are
# mostly malignant, circumscribed lesions mostly benign.
DEFAULT_MALIGNANCY_RATES: dict[MarginClass, float] = {
    MarginClass.CIRCUMSCRIBED: 0.1,
    MarginClass.INDISTINCT: 0.6,
    MarginClass.SPICULATED: 0.9,
}


def _blur_reach(margin_class: MarginClass, sigma: float) -> float:
    return 2.0 * sigma if margin_class is MarginClass.INDISTINCT else 0.0


def glyph_clearance(center: tuple[float, float]) -> float:
    """Distance in pixels from `center` to the nearest pixel of the glyph box."""
    top, left, bottom, right = GLYPH_BOX
    dy = max(top - center[0], 0.0, center[0] - bottom)
    dx = max(left - center[1], 0.0, center[1] - right)
    return math.hypot(dy, dx)


@dataclass(frozen=True)
class LesionSpec:
    """
    Geometry of one synthetic lesion.

    Attributes:
        margin_class: Margin class the lesion is drawn as.
        center: (row, col) of the lesion center in pixels.
        radii: (row radius, col radius) of the lesion ellipse in pixels.
        edge_blur_sigma: Gaussian blur applied to the lesion edge; large only for
            indistinct lesions.
        spicule_count: Number of radial spicules; positive only for spiculated lesions.
        spicule_length: Spicule length beyond the lesion boundary in pixels.
        background_texture_seed: Seed of the smooth background texture.
        orientation: Rotation of the ellipse axes in radians.
        image_size: Side of the square image in pixels.

    Example:
        ```python
        from protomargin.synthgen import LesionSpec, MarginClass

        spec = LesionSpec(
            margin_class=MarginClass.SPICULATED,
            center=(56.0, 56.0),
            radii=(14.0, 12.0),
            edge_blur_sigma=0.0,
            spicule_count=8,
            spicule_length=10.0,
            background_texture_seed=3,
        )
        ```
    """

    margin_class: MarginClass
    center: tuple[float, float]
    radii: tuple[float, float]
    edge_blur_sigma: float
    spicule_count: int
    spicule_length: float
    background_texture_seed: int
    orientation: float = 0.0
    image_size: int = IMAGE_SIZE

    def __post_init__(self) -> None:
        object.__setattr__(self, "margin_class", MarginClass.parse(self.margin_class))
        if min(self.radii) < 4:
            raise ValueError(f"lesion radii must be at least 4 px, got {self.radii}")

        spiculated = self.margin_class is MarginClass.SPICULATED
        if spiculated != (self.spicule_count > 0):
            raise ValueError(
                f"spicule_count must be positive exactly for spiculated lesions, "
                f"got {self.spicule_count} for {self.margin_class.label}"
            )
        if spiculated and self.spicule_length <= 0:
            raise ValueError("spiculated lesions need a positive spicule_length")

        blurred = self.margin_class is MarginClass.INDISTINCT
        if blurred and self.edge_blur_sigma < BLURRED_EDGE_MIN_SIGMA:
            raise ValueError(
                f"indistinct lesions need edge_blur_sigma >= {BLURRED_EDGE_MIN_SIGMA}, "
                f"got {self.edge_blur_sigma}"
            )
        if not blurred and not 0 <= self.edge_blur_sigma <= SHARP_EDGE_MAX_SIGMA:
            raise ValueError(
                f"{self.margin_class.label} lesions need edge_blur_sigma in "
                f"[0, {SHARP_EDGE_MAX_SIGMA}], got {self.edge_blur_sigma}"
            )

        extent = self.extent
        lo, hi = BORDER + extent, self.image_size - 1 - BORDER - extent
        if not (lo <= self.center[0] <= hi and lo <= self.center[1] <= hi):
            raise ValueError(
                f"lesion centered at {self.center} with extent {extent:.1f} px does not fit "
                f"a {self.image_size} px image with a {BORDER} px border"
            )

    @property
    def extent(self) -> float:
        """Farthest distance from the center that the lesion can reach."""
        blur = _blur_reach(self.margin_class, self.edge_blur_sigma)
        return max(self.radii) + self.spicule_length + blur

    def to_dict(self) -> dict[str, Any]:
        return {
            "margin_class": self.margin_class.label,
            "center": list(self.center),
            "radii": list(self.radii),
            "edge_blur_sigma": self.edge_blur_sigma,
            "spicule_count": self.spicule_count,
            "spicule_length": self.spicule_length,
            "background_texture_seed": self.background_texture_seed,
            "orientation": self.orientation,
            "image_size": self.image_size,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LesionSpec:
        return cls(
            margin_class=MarginClass.parse(data["margin_class"]),
            center=(float(data["center"][0]), float(data["center"][1])),
            radii=(float(data["radii"][0]), float(data["radii"][1])),
            edge_blur_sigma=float(data["edge_blur_sigma"]),
            spicule_count=int(data["spicule_count"]),
            spicule_length=float(data["spicule_length"]),
            background_texture_seed=int(data["background_texture_seed"]),
            orientation=float(data.get("orientation", 0.0)),
            image_size=int(data.get("image_size", IMAGE_SIZE)),
        )


@dataclass
class SynthSample:
    """
    One synthetic corpus item.

    Attributes:
        sample_id: Stable identifier; also the tie-break key for projection.
        image: [size, size] float64 grayscale in [0, 1], quantized to 8-bit levels.
        y_margin: Margin class index.
        y_mal: 1 if malignant.
        lesion_mask: uint8, 1 outside the lesion region.
        fine_mask: uint8, 0 on margin-relevant pixels; None when not exposed.
        confounder_flag: True when a class glyph was drawn.
        spec: Lesion geometry the sample was drawn from.
        seed: Seed that, with `spec`, determines the sample.
    """

    sample_id: str
    image: np.ndarray
    y_margin: int
    y_mal: int
    lesion_mask: np.ndarray
    fine_mask: np.ndarray | None
    confounder_flag: bool = False
    spec: LesionSpec | None = None
    seed: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def margin_class(self) -> MarginClass:
        return MarginClass(self.y_margin)

    @property
    def has_fine_mask(self) -> bool:
        return self.fine_mask is not None


@dataclass
class SynthConfig:
    """
    Configuration for corpus generation.

    Attributes:
        class_counts: Samples per class (circumscribed, indistinct, spiculated).
        confounder_strength: Probability of drawing the class glyph on a sample.
        fine_annotated: Training samples that keep their fine mask (the D' subset).
        malignancy_rates: P(malignant | class) in class-index order.
        image_size: Side of the square images.
        crop_fraction: Random-crop side as a fraction of the image side.

    Example:
        ```python
        from protomargin.synthgen import SynthConfig

        config = SynthConfig(class_counts=(20, 20, 20), confounder_strength=0.9)
        ```
    """

    class_counts: tuple[int, int, int] = (275, 275, 275)
    confounder_strength: float = 0.0
    fine_annotated: int = 30
    malignancy_rates: tuple[float, float, float] = (0.1, 0.6, 0.9)
    image_size: int = IMAGE_SIZE
    crop_fraction: float = 0.8

    def __post_init__(self) -> None:
        self.class_counts = tuple(int(c) for c in self.class_counts)  # type: ignore[assignment]
        rates = tuple(float(r) for r in self.malignancy_rates)
        self.malignancy_rates = rates  # type: ignore[assignment]
        if len(self.class_counts) != NUM_CLASSES or min(self.class_counts) < 1:
            raise ValueError(
                f"class_counts needs {NUM_CLASSES} positive counts, got {self.class_counts}"
            )
        if not 0.0 <= self.confounder_strength <= 1.0:
            raise ValueError(
                f"confounder_strength must lie in [0, 1], got {self.confounder_strength}"
            )
        if self.fine_annotated < 0:
            raise ValueError(f"fine_annotated must be nonnegative, got {self.fine_annotated}")
        if len(self.malignancy_rates) != NUM_CLASSES or not all(
            0.0 <= r <= 1.0 for r in self.malignancy_rates
        ):
            raise ValueError(f"malignancy_rates must be {NUM_CLASSES} probabilities")
        if self.image_size % 8 or self.image_size < 32:
            raise ValueError(f"image_size must be a multiple of 8 and >= 32, got {self.image_size}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")


# ============================================================================
# Lesion drawing
# ============================================================================


def random_spec(
    margin_class: MarginClass | str | int,
    rng: np.random.Generator,
    image_size: int = IMAGE_SIZE,
) -> LesionSpec:
    """
    Draw a valid LesionSpec for the given class.

    The center is redrawn until the lesion and its boundary band clear the
    confounder glyph box; the farthest allowed center is used if no draw does.
    """
    margin_class = MarginClass.parse(margin_class)
    scale = image_size / IMAGE_SIZE
    radii = (float(rng.uniform(10, 17) * scale), float(rng.uniform(10, 17) * scale))

    spicule_count, spicule_length, sigma = 0, 0.0, float(rng.uniform(0.0, 0.5))
    if margin_class is MarginClass.SPICULATED:
        spicule_count = int(rng.integers(6, 13))
        spicule_length = float(rng.uniform(8, 13) * scale)
    elif margin_class is MarginClass.INDISTINCT:
        sigma = float(rng.uniform(2.0, 3.5))

    reach = max(radii) + spicule_length + _blur_reach(margin_class, sigma)
    lo, hi = BORDER + reach, image_size - 1 - BORDER - reach
    # Margin band and spicules stay clear of the confounder glyph corner.
    needed = reach + BOUNDARY_BAND_PX + 3.0
    for _ in range(CENTER_ATTEMPTS):
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        if glyph_clearance(center) > needed:
            break
    else:
        center = (hi, hi)

    return LesionSpec(
        margin_class=margin_class,
        center=center,
        radii=radii,
        edge_blur_sigma=sigma,
        spicule_count=spicule_count,
        spicule_length=spicule_length,
        background_texture_seed=int(rng.integers(0, 2**31 - 1)),
        orientation=float(rng.uniform(0.0, math.pi)),
        image_size=image_size,
    )


def _ellipse(spec: LesionSpec) -> np.ndarray:
    size = spec.image_size
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = rows - spec.center[0], cols - spec.center[1]
    cos_o, sin_o = math.cos(spec.orientation), math.sin(spec.orientation)
    along = dx * cos_o + dy * sin_o
    across = -dx * sin_o + dy * cos_o
    return (along / spec.radii[1]) ** 2 + (across / spec.radii[0]) ** 2 <= 1.0


def _background(spec: LesionSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.background_texture_seed)
    noise = ndimage.gaussian_filter(rng.normal(size=(spec.image_size, spec.image_size)), sigma=3.0)
    noise = (noise - noise.mean()) / (noise.std() + 1e-12)
    return 0.25 + 0.06 * noise


def _spicules(spec: LesionSpec, rng: np.random.Generator) -> np.ndarray:
    canvas = Image.new("L", (spec.image_size, spec.image_size), 0)
    draw = ImageDraw.Draw(canvas)
    cos_o, sin_o = math.cos(spec.orientation), math.sin(spec.orientation)
    base = rng.uniform(0.0, 2.0 * math.pi)
    for i in range(spec.spicule_count):
        t = base + 2.0 * math.pi * i / spec.spicule_count + rng.uniform(-0.15, 0.15)
        along, across = spec.radii[1] * math.cos(t), spec.radii[0] * math.sin(t)
        bx = spec.center[1] + along * cos_o - across * sin_o
        by = spec.center[0] + along * sin_o + across * cos_o
        norm = math.hypot(bx - spec.center[1], by - spec.center[0])
        ux, uy = (bx - spec.center[1]) / norm, (by - spec.center[0]) / norm
        length = spec.spicule_length * rng.uniform(0.8, 1.0)
        start = (bx - 2.0 * ux, by - 2.0 * uy)
        end = (bx + length * ux, by + length * uy)
        draw.line([start, end], fill=255, width=int(rng.integers(1, 3)))
    return np.asarray(canvas) > 127


def _boundary_band(region: np.ndarray, width: int = BOUNDARY_BAND_PX) -> np.ndarray:
    boundary = region & ~ndimage.binary_erosion(region)
    return ndimage.binary_dilation(boundary, iterations=width)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_sample(
    spec: LesionSpec,
    seed: int,
    sample_id: str = "sample",
    malignancy_rates: tuple[float, float, float] | None = None,
) -> SynthSample:
    """
    Draw one sample; the result is fully determined by (spec, seed).

    Circumscribed lesions are sharp-edged ellipses, indistinct lesions have a
    Gaussian-blurred edge, spiculated lesions carry a bundle of radial lines. The fine
    mask marks a 3 px band around the lesion boundary plus every spicule pixel.

    Example:
        ```python
        import numpy as np
        from protomargin.synthgen import MarginClass, generate_sample, random_spec

        spec = random_spec(MarginClass.CIRCUMSCRIBED, np.random.default_rng(0))
        sample = generate_sample(spec, seed=1)
        ```
    """
    rates = malignancy_rates or tuple(DEFAULT_MALIGNANCY_RATES[c] for c in MarginClass)
    rng = np.random.default_rng(seed)

    body = _ellipse(spec)
    layer = body.astype(np.float64)
    if spec.edge_blur_sigma > 0:
        layer = ndimage.gaussian_filter(layer, sigma=spec.edge_blur_sigma)

    spicules = np.zeros_like(body)
    if spec.margin_class is MarginClass.SPICULATED:
        spicules = _spicules(spec, rng)
        layer = np.maximum(layer, 0.85 * spicules)

    intensity = 0.78 + 0.04 * rng.standard_normal()
    image = _background(spec) * (1.0 - layer) + intensity * layer
    image = _quantize(image + rng.normal(0.0, 0.01, size=image.shape))

    lesion_region = ndimage.binary_dilation(body | spicules, iterations=BOUNDARY_BAND_PX)
    relevant = _boundary_band(body) | spicules

    y_mal = int(rng.random() < rates[int(spec.margin_class)])
    return SynthSample(
        sample_id=sample_id,
        image=image,
        y_margin=int(spec.margin_class),
        y_mal=y_mal,
        lesion_mask=(~lesion_region).astype(np.uint8),
        fine_mask=(~relevant).astype(np.uint8),
        spec=spec,
        seed=seed,
    )


# ============================================================================
# Confounders
# ============================================================================


def _glyph(margin_class: MarginClass, size: int) -> np.ndarray:
    top, left, bottom, right = GLYPH_BOX
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    if margin_class is MarginClass.CIRCUMSCRIBED:
        draw.rectangle([left + 1, top + 1, right - 1, bottom - 1], fill=255)
    elif margin_class is MarginClass.INDISTINCT:
        draw.rectangle([left, top + 1, right, top + 2], fill=255)
        draw.rectangle([left, bottom - 2, right, bottom - 1], fill=255)
    else:
        draw.line([(left, top), (right, bottom)], fill=255, width=2)
        draw.line([(left, bottom), (right, top)], fill=255, width=2)
    return np.asarray(canvas) > 127


def inject_confounder(sample: SynthSample, strength: float, seed: int) -> SynthSample:
    """
    With probability `strength`, stamp a corner glyph whose shape encodes the class.

    Glyph pixels are bright and always marked irrelevant in both masks.

    Raises:
        ValueError: If strength is outside [0, 1].
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"confounder strength must lie in [0, 1], got {strength}")
    rng = np.random.default_rng(seed)
    if not rng.random() < strength:
        return sample

    glyph = _glyph(sample.margin_class, sample.image.shape[0])
    image = sample.image.copy()
    image[glyph] = 1.0
    lesion_mask = sample.lesion_mask.copy()
    lesion_mask[glyph] = 1
    fine_mask = None
    if sample.fine_mask is not None:
        fine_mask = sample.fine_mask.copy()
        fine_mask[glyph] = 1
    return replace(
        sample, image=image, lesion_mask=lesion_mask, fine_mask=fine_mask, confounder_flag=True
    )


# ============================================================================
# Augmentation
# ============================================================================


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the joint geometric transform."""

    hflip: bool
    vflip: bool
    angle: float
    crop_top: int
    crop_left: int
    crop_size: int

    @classmethod
    def identity(cls, size: int = IMAGE_SIZE) -> AugmentParams:
        return cls(False, False, 0.0, 0, 0, size)


def draw_augmentation(
    rng: np.random.Generator, size: int = IMAGE_SIZE, crop_fraction: float = 0.8
) -> AugmentParams:
    """Draw flips, a uniform rotation angle and a random crop position."""
    crop_size = round(crop_fraction * size)
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(-180.0, 180.0)),
        crop_top=int(rng.integers(0, size - crop_size + 1)),
        crop_left=int(rng.integers(0, size - crop_size + 1)),
        crop_size=crop_size,
    )


def _transform(array: np.ndarray, params: AugmentParams, is_mask: bool) -> np.ndarray:
    size = array.shape[0]
    out = array.astype(np.float64)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1, :]
    if params.angle:
        if is_mask:
            out = ndimage.rotate(
                out, params.angle, reshape=False, order=0, mode="constant", cval=1.0
            )
        else:
            out = ndimage.rotate(out, params.angle, reshape=False, order=1, mode="reflect")
    out = out[
        params.crop_top : params.crop_top + params.crop_size,
        params.crop_left : params.crop_left + params.crop_size,
    ]
    if params.crop_size != size:
        out = ndimage.zoom(out, size / params.crop_size, order=0 if is_mask else 1)
    if is_mask:
        return (out > 0.5).astype(np.uint8)
    return np.clip(np.ascontiguousarray(out), 0.0, 1.0)


def apply_augmentation(sample: SynthSample, params: AugmentParams) -> SynthSample:
    """Apply one transform jointly to the image and both masks; labels are kept."""
    if params == AugmentParams.identity(sample.image.shape[0]):
        return sample
    return replace(
        sample,
        image=_transform(sample.image, params, is_mask=False),
        lesion_mask=_transform(sample.lesion_mask, params, is_mask=True),
        fine_mask=None
        if sample.fine_mask is None
        else _transform(sample.fine_mask, params, is_mask=True),
    )


def augment(sample: SynthSample, seed: int, crop_fraction: float = 0.8) -> SynthSample:
    """Randomly flip, rotate and crop-rescale a sample, keeping masks registered."""
    rng = np.random.default_rng(seed)
    params = draw_augmentation(rng, sample.image.shape[0], crop_fraction)
    return apply_augmentation(sample, params)


# ============================================================================
# Corpus
# ============================================================================


def generate_corpus(config: SynthConfig, master_seed: int) -> list[SynthSample]:
    """
    Generate `config.class_counts` samples per class from one master seed.

    Samples are returned sorted by id. Each sample uses three sub-seeds of the
    ``data`` stream: one for its spec, one for its pixels, one for its confounder.
    """
    samples: list[SynthSample] = []
    for margin_class in MarginClass:
        for i in range(config.class_counts[margin_class]):
            spec_rng = np.random.default_rng(derive_seed(master_seed, "data", margin_class, i, 0))
            spec = random_spec(margin_class, spec_rng, config.image_size)
            sample_seed = derive_seed(master_seed, "data", margin_class, i, 1)
            sample = generate_sample(
                spec,
                sample_seed,
                sample_id=f"{margin_class.label}-{i:04d}",
                malignancy_rates=config.malignancy_rates,
            )
            if config.confounder_strength > 0:
                sample = inject_confounder(
                    sample,
                    config.confounder_strength,
                    derive_seed(master_seed, "data", margin_class, i, 2),
                )
            samples.append(sample)

    samples.sort(key=lambda s: s.sample_id)
    logger.info(
        "generated synthetic corpus",
        extra={
            "samples": len(samples),
            "class_counts": list(config.class_counts),
            "confounded": sum(s.confounder_flag for s in samples),
        },
    )
    return samples
