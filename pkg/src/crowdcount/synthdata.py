"""Deterministic synthetic crowd scenes for tests and overfit runs.

Heads are rendered as dark discs on a noisy light background; weather
variants apply a global tint / contrast reduction. Rendering is
deliberately simplistic: the test suite probes geometry and math, not
perception.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import (
    AnnotatedImage,
    HeadAnnotation,
    ImageLabels,
    Split,
    Weather,
    serialize_heads,
    serialize_label_record,
)

# A scene is overcrowded when heads would need more than this fraction of
# the pixel area at their mean radius.
MAX_FILL_FRACTION = 0.5


class OvercrowdedError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    dims: tuple[int, int] = (256, 256)  # (width, height)
    n_heads: int = 50
    head_radius_range: tuple[float, float] = (3.0, 8.0)
    weather: Weather = Weather.NORMAL
    placement: str = "uniform"  # "uniform" or "clustered"
    seed: int = 0

    def __post_init__(self):
        if self.n_heads < 0:
            raise ValueError("n_heads must be nonnegative")
        if self.placement not in ("uniform", "clustered"):
            raise ValueError(f"unknown placement {self.placement!r}")
        lo, hi = self.head_radius_range
        if not (0 < lo <= hi):
            raise ValueError("invalid head radius range")


def _place_centers(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    w, h = spec.dims
    margin = spec.head_radius_range[1]
    if spec.placement == "uniform":
        xs = rng.uniform(margin, w - margin, size=spec.n_heads)
        ys = rng.uniform(margin, h - margin, size=spec.n_heads)
        return np.stack([xs, ys], axis=1)
    n_clusters = max(1, spec.n_heads // 20)
    centers = rng.uniform([margin, margin], [w - margin, h - margin], size=(n_clusters, 2))
    assignment = rng.integers(0, n_clusters, size=spec.n_heads)
    spread = min(w, h) / 8.0
    pts = centers[assignment] + rng.normal(0.0, spread, size=(spec.n_heads, 2))
    return np.clip(pts, [margin, margin], [w - margin, h - margin])


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, AnnotatedImage]:
    """Render one scene. Returns (HxWx3 uint8 pixels, annotation)."""
    w, h = spec.dims
    mean_r = sum(spec.head_radius_range) / 2.0
    if spec.n_heads * math.pi * mean_r**2 > MAX_FILL_FRACTION * w * h:
        raise OvercrowdedError(
            f"{spec.n_heads} heads of mean radius {mean_r:.1f} exceed the "
            f"density cap for a {w}x{h} scene"
        )
    rng = np.random.default_rng(spec.seed)
    img = rng.normal(200.0, 10.0, size=(h, w, 3))

    heads = []
    if spec.n_heads:
        centers = _place_centers(spec, rng)
        radii = rng.uniform(*spec.head_radius_range, size=spec.n_heads)
        yy, xx = np.mgrid[0:h, 0:w]
        for (cx, cy), r in zip(centers, radii):
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            shade = rng.uniform(20.0, 80.0)
            img[mask] = shade
            heads.append(
                HeadAnnotation(x=float(cx), y=float(cy),
                               width=float(2 * r), height=float(2 * r))
            )

    if spec.weather == Weather.FOG_HAZE:
        img = 0.5 * img + 0.5 * 220.0  # washed out
    elif spec.weather == Weather.RAIN:
        img = img * 0.7  # darkened
        streaks = rng.random((h, w)) > 0.995
        img[streaks] = 230.0
    elif spec.weather == Weather.SNOW:
        flakes = rng.random((h, w)) > 0.99
        img[flakes] = 250.0

    pixels = np.clip(img, 0, 255).astype(np.uint8)
    annotation = AnnotatedImage(
        image_id=f"synth_{spec.seed:04d}",
        width=w,
        height=h,
        heads=tuple(heads),
        labels=ImageLabels(scene="synthetic", weather=spec.weather, distractor=False),
        split=Split.TRAIN,
    )
    return pixels, annotation


def write_scene(spec: SceneSpec, out_dir, split: Split = Split.TRAIN) -> AnnotatedImage:
    """Render a scene and write image + annotation files in the dataset layout.

    Layout under ``out_dir``: <split>/images/<id>.png, <split>/gt/<id>.txt,
    and one line appended to <split>/image_labels.txt.
    """
    from PIL import Image

    pixels, annotation = generate_scene(spec)
    annotation = AnnotatedImage(
        **{**annotation.__dict__, "split": split}
    )
    base = Path(out_dir) / split.value
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "gt").mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(base / "images" / f"{annotation.image_id}.png")
    (base / "gt" / f"{annotation.image_id}.txt").write_text(serialize_heads(annotation))
    with open(base / "image_labels.txt", "a") as f:
        f.write(serialize_label_record(annotation))
    return annotation
