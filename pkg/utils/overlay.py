"""
Prediction overlay images.

Blends a label slice over the grayscale input slice, one colour per
tumor label.
"""

import os
from pathlib import Path

import numpy as np
from PIL import Image

from exceptions import IoFailure, ShapeMismatch
from preprocess import normalize_minmax

LABEL_COLOURS = {
    1: (255, 64, 64),  # necrotic / non-enhancing core
    2: (64, 200, 64),  # edema
    4: (255, 220, 0),  # enhancing
}
ALPHA = 0.45


def render_overlay(image: np.ndarray, labels: np.ndarray) -> Image.Image:
    """Return an RGB image of the labels blended over a 2D intensity slice.

    Raises:
        ShapeMismatch: If image and labels differ in shape.
    """
    image, labels = np.asarray(image), np.asarray(labels)
    if image.shape != labels.shape or image.ndim != 2:
        raise ShapeMismatch(f"image {image.shape} and labels {labels.shape} must be equal 2D shapes")
    gray = (normalize_minmax(image) * 255).round().astype(np.uint8)
    base = np.stack([gray] * 3, axis=-1).astype(np.float64)
    tint = base.copy()
    for label, colour in LABEL_COLOURS.items():
        tint[labels == label] = colour
    blended = np.where((labels > 0)[..., None], (1 - ALPHA) * base + ALPHA * tint, base)
    # volume (x, y) to image (row, col)
    return Image.fromarray(np.ascontiguousarray(blended.round().astype(np.uint8).transpose(1, 0, 2)))


def save_overlay(image: np.ndarray, labels: np.ndarray, path: "str | os.PathLike") -> Path:
    """Write the overlay of one slice as PNG."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        render_overlay(image, labels).save(path, format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write overlay {path}: {e}", str(path)) from e
    return path
