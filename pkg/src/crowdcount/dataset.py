"""On-disk dataset loading for the directory layout written by synthdata.

Layout: ROOT/<split>/images/<id>.png, ROOT/<split>/gt/<id>.txt, and a
sidecar ROOT/<split>/image_labels.txt with one label record per image.
Images are optional for statistics-only use; dims then come from the
head coordinates' bounding extent rounded up (annotations-only mode).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .annotations import (
    AnnotatedImage,
    AnnotationError,
    Split,
    parse_annotation_file,
)


def load_split(root, split: Split, with_images: bool = True):
    """Parse one split. Returns list of (pixels-or-None, AnnotatedImage)."""
    base = Path(root) / split.value
    labels_path = base / "image_labels.txt"
    if not labels_path.exists():
        return []
    records = {}
    for line in labels_path.read_text().splitlines():
        if line.strip():
            records[line.split()[0]] = line
    out = []
    for image_id in sorted(records):
        head_path = base / "gt" / f"{image_id}.txt"
        if not head_path.exists():
            raise AnnotationError(f"{image_id}: missing head file {head_path}")
        image_path = base / "images" / f"{image_id}.png"
        pixels = None
        if image_path.exists():
            from PIL import Image

            pixels = np.asarray(Image.open(image_path).convert("RGB"))
            dims = (pixels.shape[1], pixels.shape[0])
        else:
            dims = _dims_from_heads(head_path.read_text())
        annotation = parse_annotation_file(
            head_path.read_text(), records[image_id], dims, split=split
        )
        if not with_images:
            pixels = None
        out.append((pixels, annotation))
    return out


def load_dataset(root, with_images: bool = True):
    """All splits concatenated."""
    out = []
    for split in Split:
        out.extend(load_split(root, split, with_images=with_images))
    return out


def _dims_from_heads(head_text: str) -> tuple[int, int]:
    max_x = max_y = 0.0
    for line in head_text.splitlines():
        parts = line.split()
        if len(parts) >= 2:
            max_x = max(max_x, float(parts[0]))
            max_y = max(max_y, float(parts[1]))
    return (int(max_x) + 1, int(max_y) + 1)
