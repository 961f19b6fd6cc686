"""
Explanation artifacts for protomargin.

Provides per-case reasoning reports (closest prototypes, their activation maps,
source patches, per-class contributions and the malignancy breakdown), class
activation visualizations and the global prototype gallery. Reports are static
HTML with embedded PNG images; every image is also written as a binary PPM asset
named ``<case>_<prototype id>_<role>.ppm``.
"""

from __future__ import annotations

import base64
import html
import io
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import LinearSegmentedColormap
from PIL import Image, ImageDraw

from protomargin.dataset import DatasetError
from protomargin.protonet import (
    ProtoNet,
    Provenance,
    cell_to_pixel,
    compute_pam,
    receptive_field,
)
from protomargin.synthgen import MarginClass
from protomargin.tensor import ShapeError


logger = logging.getLogger("protomargin.explain")

HEAT_CMAP = LinearSegmentedColormap.from_list(
    "protomargin_heat", ["#0000ff", "#00ffff", "#ffff00", "#ff0000"]
)
PATCH_OUTLINE = (255, 0, 0)


@dataclass
class ExplainConfig:
    """
    Configuration for explanation artifacts.

    Attributes:
        top_n: Prototype rows per case report.
        alpha: Heat-map opacity over the grayscale image.
        logger_name: Logger used for progress messages.

    Example:
        ```python
        from protomargin.explain import ExplainConfig, case_report, explain_case

        explanation = explain_case(net, image, "test-0001", sources=sources)
        case_report(explanation, "reports/", ExplainConfig(alpha=0.6))
        ```
    """

    top_n: int = 3
    alpha: float = 0.5
    logger_name: str = "protomargin.explain"

    def __post_init__(self) -> None:
        if self.top_n < 1:
            raise ValueError(f"top_n must be positive, got {self.top_n}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class PrototypeMatch:
    """One prototype's match against a case image."""

    index: int
    prototype_id: int
    prototype_class: int
    similarity: float
    contribution: float
    pam: np.ndarray
    provenance: Provenance | None = None
    source_image: np.ndarray | None = None
    source_pam: np.ndarray | None = None
    patch_box: tuple[int, int, int, int] | None = None


@dataclass
class CaseExplanation:
    """
    Everything a case report shows.

    Attributes:
        case_id: Case identifier; prefixes every asset file.
        image: Input image [H, W].
        matches: Top prototypes by descending similarity.
        scores: Pooled similarity s_j of every prototype.
        contributions: [K, m] matrix of W1[k, j] * s_j; row sums are the margin logits.
        margin_logits: Margin head output.
        margin_probabilities: Softmax of the logits.
        malignancy_probability: h2 output.
    """

    case_id: str
    image: np.ndarray
    matches: list[PrototypeMatch]
    scores: np.ndarray
    similarities: np.ndarray
    contributions: np.ndarray
    margin_logits: np.ndarray
    margin_probabilities: np.ndarray
    malignancy_probability: float
    prototype_classes: np.ndarray
    prototype_ids: list[int]
    malignancy_weights: np.ndarray
    malignancy_intercept: float
    malignancy_scale: float
    image_size: int = 112

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.margin_probabilities))

    def malignancy_breakdown(self) -> dict[str, object]:
        """Terms of sigmoid(scale * (sum_k w_k * logit_k + intercept))."""
        terms = self.malignancy_weights * self.margin_logits
        linear = float(terms.sum() + self.malignancy_intercept)
        return {
            "terms": {MarginClass(k).label: float(t) for k, t in enumerate(terms)},
            "intercept": self.malignancy_intercept,
            "scale": self.malignancy_scale,
            "linear": linear,
            "probability": self.malignancy_probability,
        }


# ============================================================================
# Explanations
# ============================================================================


def explain_case(
    net: ProtoNet,
    image: np.ndarray,
    case_id: str = "case",
    sources: Mapping[str, np.ndarray] | None = None,
    top_n: int = 3,
) -> CaseExplanation:
    """
    Run one image through the network and collect its explanation.

    Matches are ordered by descending pooled similarity, ties by prototype index.
    When `sources` maps a prototype's provenance sample id to its image, the match
    also carries that image and the prototype's PAM on it.
    """
    params = net.params
    size = net.config.image_size
    result = net.predict(image)
    similarities = result.similarities.data[0]
    scores = result.scores.data[0]
    weights = params.last_layer.data
    contributions = weights * scores[None, :]

    matches: list[PrototypeMatch] = []
    for j in np.argsort(-scores, kind="stable")[:top_n]:
        j = int(j)
        cls = int(params.prototype_classes[j])
        prov = params.provenance[j]
        source = source_pam = box = None
        if sources is not None and prov is not None and prov.sample_id in sources:
            source = np.asarray(sources[prov.sample_id], dtype=np.float64)
            source_sims = net.predict(source).similarities.data[0]
            source_pam = compute_pam(source_sims, j, size, prov.sample_id).values
            box = receptive_field(prov.row, prov.col, net.config)
        matches.append(
            PrototypeMatch(
                index=j,
                prototype_id=params.prototype_ids[j],
                prototype_class=cls,
                similarity=float(scores[j]),
                contribution=float(contributions[cls, j]),
                pam=compute_pam(similarities, j, size, case_id).values,
                provenance=prov,
                source_image=source,
                source_pam=source_pam,
                patch_box=box,
            )
        )

    return CaseExplanation(
        case_id=case_id,
        image=np.asarray(image, dtype=np.float64),
        matches=matches,
        scores=scores.copy(),
        similarities=similarities.copy(),
        contributions=contributions,
        margin_logits=result.logits.data[0].copy(),
        margin_probabilities=result.probabilities[0].copy(),
        malignancy_probability=float(result.malignancy[0]),
        prototype_classes=params.prototype_classes.copy(),
        prototype_ids=list(params.prototype_ids),
        malignancy_weights=params.malignancy_weights.data.copy(),
        malignancy_intercept=float(params.malignancy_intercept.data),
        malignancy_scale=params.malignancy_scale,
        image_size=size,
    )


def minmax(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def class_activation_visualization(explanation: CaseExplanation, margin_class: int) -> np.ndarray:
    """
    Similarity-weighted sum of the PAMs of a class's prototypes, min-max normalized.

    Raises:
        ValueError: If the class has no prototype.
    """
    members = np.flatnonzero(explanation.prototype_classes == int(margin_class))
    if members.size == 0:
        raise ValueError(f"class {margin_class} has no prototypes")
    size = explanation.image_size
    total = np.zeros((size, size))
    for j in members:
        pam = compute_pam(explanation.similarities, int(j), size).values
        total += explanation.scores[j] * pam
    return minmax(total)


# ============================================================================
# Rendering
# ============================================================================


def heat_rgb(values: np.ndarray) -> np.ndarray:
    """Blue-to-red colors of a min-max normalized map, uint8 [H, W, 3]."""
    rgba = HEAT_CMAP(minmax(values))
    return np.round(rgba[..., :3] * 255.0).astype(np.uint8)


def overlay_rgb(image: np.ndarray, values: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != np.shape(values):
        raise ShapeError(f"map shape {np.shape(values)} does not match image {image.shape}")
    gray = np.repeat(image[..., None] * 255.0, 3, axis=2)
    mixed = (1.0 - alpha) * gray + alpha * heat_rgb(values).astype(np.float64)
    return np.clip(np.round(mixed), 0, 255).astype(np.uint8)


def gray_rgb(image: np.ndarray) -> np.ndarray:
    levels = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    return np.repeat(levels.astype(np.uint8)[..., None], 3, axis=2)


def outline_patch(rgb: np.ndarray, box: tuple[int, int, int, int]) -> np.ndarray:
    """Draw the (top, left, bottom, right) box, bottom/right exclusive."""
    top, left, bottom, right = box
    canvas = Image.fromarray(rgb)
    ImageDraw.Draw(canvas).rectangle([left, top, right - 1, bottom - 1], outline=PATCH_OUTLINE)
    return np.asarray(canvas).copy()


def write_ppm(rgb: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    Image.fromarray(rgb).save(path, format="PPM")
    return path


def render_overlay(
    image: np.ndarray, values: np.ndarray, out_path: str | Path, alpha: float = 0.5
) -> Path:
    """
    Write a heat-map-over-grayscale composite as a binary PPM.

    The map is min-max normalized; its maximum gets the reddest color, its minimum
    the bluest.

    Raises:
        ShapeError: If map and image sizes differ.
        OSError: If the path cannot be written.
    """
    return write_ppm(overlay_rgb(image, values, alpha), out_path)


def _data_uri(rgb: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(rgb).save(buffer, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buffer.getvalue()).decode("ascii")


def _img(rgb: np.ndarray, alt: str) -> str:
    return f'<img src="{_data_uri(rgb)}" alt="{html.escape(alt)}">'


_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 2em; }}
table {{ border-collapse: collapse; margin: 1em 0; }}
td, th {{ border: 1px solid #ccc; padding: 4px 8px; text-align: right; }}
img {{ width: 224px; image-rendering: pixelated; }}
</style>
</head>
<body>
{body}
</body>
</html>
"""


# ============================================================================
# Case report
# ============================================================================


@dataclass
class CaseReport:
    path: Path
    assets: list[Path] = field(default_factory=list)


def case_report(
    explanation: CaseExplanation, out_dir: str | Path, config: ExplainConfig | None = None
) -> CaseReport:
    """
    Write `<case>.html` and its PPM assets into out_dir.

    Rows: PAM over the case image (``pam``), the prototype's source patch
    (``patch``) and the source image with its own PAM and the patch outlined
    (``source``). The input and the predicted class's activation visualization are
    written as ``<case>_input.ppm`` and ``<case>_cav.ppm``.
    """
    config = config or ExplainConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    e = explanation
    case = e.case_id
    assets: list[Path] = []
    labels = [c.label for c in MarginClass]

    input_rgb = gray_rgb(e.image)
    cav_rgb = overlay_rgb(e.image, class_activation_visualization(e, e.predicted_class))
    assets.append(write_ppm(input_rgb, out / f"{case}_input.ppm"))
    assets.append(write_ppm(cav_rgb, out / f"{case}_cav.ppm"))

    rows: list[str] = []
    for match in e.matches[: config.top_n]:
        pid = match.prototype_id
        pam_rgb = overlay_rgb(e.image, match.pam, config.alpha)
        assets.append(write_ppm(pam_rgb, out / f"{case}_{pid}_pam.ppm"))
        cells = [
            f"<td>{pid}</td>",
            f"<td>{labels[match.prototype_class]}</td>",
            f"<td>{match.similarity:.4f}</td>",
            f"<td>{match.contribution:.4f}</td>",
            f"<td>{_img(pam_rgb, 'activation on case')}</td>",
        ]
        box = match.patch_box
        if match.source_image is not None and match.source_pam is not None and box is not None:
            top, left, bottom, right = box
            patch_rgb = gray_rgb(match.source_image[top:bottom, left:right])
            source_rgb = outline_patch(
                overlay_rgb(match.source_image, match.source_pam, config.alpha), box
            )
            assets.append(write_ppm(patch_rgb, out / f"{case}_{pid}_patch.ppm"))
            assets.append(write_ppm(source_rgb, out / f"{case}_{pid}_source.ppm"))
            cells.append(f"<td>{_img(patch_rgb, 'prototype patch')}</td>")
            cells.append(f"<td>{_img(source_rgb, 'source image')}</td>")
        else:
            cells.append('<td colspan="2">source image unavailable</td>')
        rows.append("<tr>" + "".join(cells) + "</tr>")

    contribution_rows = []
    for j in range(len(e.prototype_ids)):
        values = "".join(f"<td>{e.contributions[k, j]:.6f}</td>" for k in range(len(labels)))
        contribution_rows.append(
            f"<tr><td>{e.prototype_ids[j]}</td><td>{labels[int(e.prototype_classes[j])]}</td>"
            f"<td>{e.scores[j]:.6f}</td>{values}</tr>"
        )
    logit_cells = "".join(f"<td>{v:.6f}</td>" for v in e.contributions.sum(axis=1))
    contribution_rows.append(f'<tr><th colspan="3">margin logit</th>{logit_cells}</tr>')

    terms = e.malignancy_weights * e.margin_logits
    term_text = " + ".join(f"{t:.4f} ({label})" for label, t in zip(labels, terms, strict=True))
    probability_rows = "".join(
        f"<tr><td>{label}</td><td>{p:.4f}</td></tr>"
        for label, p in zip(labels, e.margin_probabilities, strict=True)
    )

    body = "\n".join(
        [
            f"<h1>Case {html.escape(case)}</h1>",
            f"<p>{_img(input_rgb, 'case image')} {_img(cav_rgb, 'class activation')}</p>",
            f"<h2>Predicted margin: {labels[e.predicted_class]}</h2>",
            f"<table><tr><th>class</th><th>probability</th></tr>{probability_rows}</table>",
            f"<h2>Closest prototypes (top {config.top_n})</h2>",
            "<table><tr><th>prototype</th><th>class</th><th>similarity</th>"
            "<th>contribution</th><th>activation</th><th>patch</th><th>source</th></tr>",
            *rows,
            "</table>",
            "<h2>Contributions W1[k, j] * s_j</h2>",
            "<table><tr><th>prototype</th><th>class</th><th>similarity</th>"
            + "".join(f"<th>{label}</th>" for label in labels)
            + "</tr>",
            *contribution_rows,
            "</table>",
            "<h2>Malignancy</h2>",
            f"<p>sigmoid({e.malignancy_scale} * ({term_text} "
            f"+ {e.malignancy_intercept:.4f})) = {e.malignancy_probability:.4f}</p>",
        ]
    )
    path = out / f"{case}.html"
    path.write_text(_PAGE.format(title=html.escape(f"Case {case}"), body=body), encoding="utf-8")
    logging.getLogger(config.logger_name).info(
        "wrote case report", extra={"case": case, "assets": len(assets)}
    )
    return CaseReport(path=path, assets=assets)


# ============================================================================
# Prototype gallery
# ============================================================================


@dataclass
class GalleryEntry:
    prototype_id: int
    prototype_class: int
    provenance: Provenance
    patch_box: tuple[int, int, int, int]
    cell_pixel: tuple[int, int]
    self_similarity: float
    peak_cell: tuple[int, int]


@dataclass
class Gallery:
    path: Path
    entries: list[GalleryEntry] = field(default_factory=list)


def prototype_gallery(
    net: ProtoNet,
    sources: Mapping[str, np.ndarray],
    out_dir: str | Path,
    config: ExplainConfig | None = None,
) -> Gallery:
    """
    Write `gallery.html`: one entry per prototype with its source image, outlined
    patch and self-activation map.

    Raises:
        ValueError: If a prototype has no provenance (never projected).
        DatasetError: If a provenance sample is missing from `sources`.
    """
    config = config or ExplainConfig()
    params = net.params
    size = net.config.image_size
    grid = net.config.grid_size
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = [c.label for c in MarginClass]

    entries: list[GalleryEntry] = []
    sections: list[str] = []
    for j, prov in enumerate(params.provenance):
        pid = params.prototype_ids[j]
        if prov is None:
            raise ValueError(f"prototype {pid} has no provenance; project before the gallery")
        if prov.sample_id not in sources:
            raise DatasetError(f"missing source image {prov.sample_id} for prototype {pid}")
        source = np.asarray(sources[prov.sample_id], dtype=np.float64)
        grids = net.predict(source).similarities.data[0]
        peak = np.unravel_index(int(np.argmax(grids[j])), grids[j].shape)
        box = receptive_field(prov.row, prov.col, net.config)
        entry = GalleryEntry(
            prototype_id=pid,
            prototype_class=int(params.prototype_classes[j]),
            provenance=prov,
            patch_box=box,
            cell_pixel=cell_to_pixel(prov.row, prov.col, grid, size),
            self_similarity=float(grids[j][prov.row, prov.col]),
            peak_cell=(int(peak[0]), int(peak[1])),
        )
        entries.append(entry)

        pam = compute_pam(grids, j, size, prov.sample_id).values
        source_rgb = outline_patch(gray_rgb(source), box)
        pam_rgb = outline_patch(overlay_rgb(source, pam, config.alpha), box)
        write_ppm(source_rgb, out / f"proto{pid}_source.ppm")
        write_ppm(pam_rgb, out / f"proto{pid}_selfpam.ppm")
        top, left, bottom, right = box
        sections.append(
            "\n".join(
                [
                    f'<section id="prototype-{pid}">',
                    f"<h2>Prototype {pid} ({labels[entry.prototype_class]})</h2>",
                    f"<p>source {html.escape(prov.sample_id)}, latent cell "
                    f"({prov.row}, {prov.col}), pixel {entry.cell_pixel}, patch rows "
                    f"{top}-{bottom - 1} cols {left}-{right - 1}, self-similarity "
                    f"{entry.self_similarity:.6f}</p>",
                    f"<p>{_img(source_rgb, 'source image')} {_img(pam_rgb, 'self activation')}</p>",
                    "</section>",
                ]
            )
        )

    path = out / "gallery.html"
    body = "<h1>Prototype gallery</h1>\n" + "\n".join(sections)
    path.write_text(_PAGE.format(title="Prototype gallery", body=body), encoding="utf-8")
    logging.getLogger(config.logger_name).info(
        "wrote prototype gallery", extra={"prototypes": len(entries)}
    )
    return Gallery(path=path, entries=entries)
