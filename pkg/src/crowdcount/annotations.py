"""Annotation data model, on-disk parsing, and dataset statistics.

On-disk convention (numeric codes are an artifact convention, the upstream
labels are textual):

* head file: one head per line, ``x y width height occlusion blur`` with
  occlusion in {1=un-occluded, 2=partially-occluded, 3=fully-occluded} and
  blur in {0=no-blur, 1=blur}.
* label record: ``image-id total-count scene weather distractor`` with
  weather in {0=normal, 1=fog-haze, 2=rain, 3=snow} and distractor in {0,1}.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field


class Occlusion(enum.Enum):
    UN_OCCLUDED = 1
    PARTIALLY_OCCLUDED = 2
    FULLY_OCCLUDED = 3


class Blur(enum.Enum):
    NO_BLUR = 0
    BLUR = 1


class Weather(enum.Enum):
    NORMAL = 0
    FOG_HAZE = 1
    RAIN = 2
    SNOW = 3


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# Density-band bounds on integer head counts: low = [0, 50],
# medium = [51, 500], high = [501, inf).
LOW_MAX = 50
MEDIUM_MAX = 500

# Heads may sit up to this far outside the image before parsing fails;
# in-tolerance overshoot is clamped back into bounds.
BORDER_TOLERANCE_PX = 1.0


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation data."""


class ParseError(AnnotationError):
    """Grammar violation; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class HeadAnnotation:
    """One annotated head: point location plus approximate box and attributes."""

    x: float
    y: float
    width: float
    height: float
    occlusion: Occlusion = Occlusion.UN_OCCLUDED
    blur: Blur = Blur.NO_BLUR


@dataclass(frozen=True)
class ImageLabels:
    scene: str = "unlabeled"
    weather: Weather = Weather.NORMAL
    distractor: bool = False


@dataclass(frozen=True)
class AnnotatedImage:
    image_id: str
    width: int
    height: int
    heads: tuple[HeadAnnotation, ...] = ()
    labels: ImageLabels = field(default_factory=ImageLabels)
    split: Split = Split.TRAIN

    @property
    def count(self) -> int:
        return len(self.heads)

    def density_band(self) -> str:
        c = math.floor(self.count)
        if c <= LOW_MAX:
            return "low"
        if c <= MEDIUM_MAX:
            return "medium"
        return "high"


@dataclass
class DatasetStats:
    total_images: int
    total_annotations: int
    max_count: int
    avg_count: float
    per_split_images: dict[str, int]
    per_weather_images: dict[str, int]
    per_weather_annotations: dict[str, int]
    per_band_images: dict[str, int]

    def as_dict(self) -> dict:
        return {
            "total_images": self.total_images,
            "total_annotations": self.total_annotations,
            "max_count": self.max_count,
            "avg_count": self.avg_count,
            "per_split_images": dict(self.per_split_images),
            "per_weather_images": dict(self.per_weather_images),
            "per_weather_annotations": dict(self.per_weather_annotations),
            "per_band_images": dict(self.per_band_images),
        }


def _decode(stream) -> str:
    if isinstance(stream, bytes):
        return stream.decode("utf-8")
    if isinstance(stream, str):
        return stream
    data = stream.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return data


def _parse_head_line(line: str, line_no: int, dims: tuple[int, int]) -> HeadAnnotation:
    parts = line.split()
    if len(parts) != 6:
        raise ParseError(line_no, f"expected 6 fields, got {len(parts)}")
    try:
        x, y, w, h = (float(p) for p in parts[:4])
        occ_code, blur_code = int(parts[4]), int(parts[5])
    except ValueError as exc:
        raise ParseError(line_no, f"non-numeric field: {exc}") from None
    img_w, img_h = dims
    if not (-BORDER_TOLERANCE_PX <= x <= img_w + BORDER_TOLERANCE_PX):
        raise ParseError(line_no, f"x={x} outside image width {img_w}")
    if not (-BORDER_TOLERANCE_PX <= y <= img_h + BORDER_TOLERANCE_PX):
        raise ParseError(line_no, f"y={y} outside image height {img_h}")
    if w <= 0 or h <= 0:
        raise ParseError(line_no, f"non-positive box size {w}x{h}")
    try:
        occlusion = Occlusion(occ_code)
    except ValueError:
        raise ParseError(line_no, f"unknown occlusion code {occ_code}") from None
    try:
        blur = Blur(blur_code)
    except ValueError:
        raise ParseError(line_no, f"unknown blur code {blur_code}") from None
    # Border heads are legitimate annotations; clamp instead of rejecting.
    x = min(max(x, 0.0), float(img_w))
    y = min(max(y, 0.0), float(img_h))
    return HeadAnnotation(x=x, y=y, width=w, height=h, occlusion=occlusion, blur=blur)


def parse_annotation_file(
    head_file,
    label_record,
    image_dims: tuple[int, int],
    split: Split = Split.TRAIN,
) -> AnnotatedImage:
    """Parse a per-image head file plus its sidecar label record.

    ``image_dims`` is (width, height). Malformed lines raise ParseError with
    the offending line number; a label-record count that disagrees with the
    number of head lines is an error, not a warning.
    """
    heads = []
    for line_no, line in enumerate(_decode(head_file).splitlines(), start=1):
        if not line.strip():
            continue
        heads.append(_parse_head_line(line, line_no, image_dims))

    label_text = _decode(label_record).strip()
    parts = label_text.split()
    if len(parts) != 5:
        raise ParseError(1, f"label record: expected 5 fields, got {len(parts)}")
    image_id, count_s, scene, weather_s, distractor_s = parts
    try:
        declared_count = int(count_s)
        weather_code = int(weather_s)
        distractor_code = int(distractor_s)
    except ValueError as exc:
        raise ParseError(1, f"label record: non-numeric field: {exc}") from None
    try:
        weather = Weather(weather_code)
    except ValueError:
        raise ParseError(1, f"label record: unknown weather code {weather_code}") from None
    if distractor_code not in (0, 1):
        raise ParseError(1, f"label record: distractor must be 0/1, got {distractor_code}")
    if declared_count != len(heads):
        raise AnnotationError(
            f"{image_id}: label record declares {declared_count} heads, "
            f"head file has {len(heads)}"
        )
    return AnnotatedImage(
        image_id=image_id,
        width=image_dims[0],
        height=image_dims[1],
        heads=tuple(heads),
        labels=ImageLabels(scene=scene, weather=weather, distractor=bool(distractor_code)),
        split=split,
    )


def serialize_heads(image: AnnotatedImage) -> str:
    """Inverse of the head-file grammar; round-trips modulo trailing whitespace."""
    lines = []
    for h in image.heads:
        lines.append(
            f"{h.x:g} {h.y:g} {h.width:g} {h.height:g} "
            f"{h.occlusion.value} {h.blur.value}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def serialize_label_record(image: AnnotatedImage) -> str:
    lab = image.labels
    return (
        f"{image.image_id} {image.count} {lab.scene} "
        f"{lab.weather.value} {int(lab.distractor)}\n"
    )


def compute_stats(dataset: list[AnnotatedImage]) -> DatasetStats:
    """Tally split / weather / density-band statistics over a dataset."""
    if not dataset:
        raise AnnotationError("empty dataset")
    per_split = {s.value: 0 for s in Split}
    per_weather_img = {w.name.lower(): 0 for w in Weather}
    per_weather_ann = {w.name.lower(): 0 for w in Weather}
    per_band = {"low": 0, "medium": 0, "high": 0}
    total_ann = 0
    max_count = 0
    for img in dataset:
        per_split[img.split.value] += 1
        key = img.labels.weather.name.lower()
        per_weather_img[key] += 1
        per_weather_ann[key] += img.count
        per_band[img.density_band()] += 1
        total_ann += img.count
        max_count = max(max_count, img.count)
    return DatasetStats(
        total_images=len(dataset),
        total_annotations=total_ann,
        max_count=max_count,
        avg_count=total_ann / len(dataset),
        per_split_images=per_split,
        per_weather_images=per_weather_img,
        per_weather_annotations=per_weather_ann,
        per_band_images=per_band,
    )


def export_split(dataset: list[AnnotatedImage], split: Split) -> list[AnnotatedImage]:
    """Images of one split, in stable lexicographic image-id order."""
    if not isinstance(split, Split):
        split = Split(split)
    return sorted((im for im in dataset if im.split == split), key=lambda im: im.image_id)


def format_stats_table(stats: DatasetStats) -> str:
    """Human-readable rendering of DatasetStats."""
    buf = io.StringIO()
    buf.write(f"images        {stats.total_images}\n")
    buf.write(f"annotations   {stats.total_annotations}\n")
    buf.write(f"max count     {stats.max_count}\n")
    buf.write(f"avg count     {stats.avg_count:.2f}\n")
    buf.write("split         " + "  ".join(
        f"{k}={v}" for k, v in stats.per_split_images.items()) + "\n")
    buf.write("density band  " + "  ".join(
        f"{k}={v}" for k, v in stats.per_band_images.items()) + "\n")
    buf.write("weather imgs  " + "  ".join(
        f"{k}={v}" for k, v in stats.per_weather_images.items()) + "\n")
    buf.write("weather anns  " + "  ".join(
        f"{k}={v}" for k, v in stats.per_weather_annotations.items()) + "\n")
    return buf.getvalue()


def format_stats_kv(stats: DatasetStats) -> str:
    """Flat machine-readable key=value document."""
    lines = [
        f"total_images={stats.total_images}",
        f"total_annotations={stats.total_annotations}",
        f"max_count={stats.max_count}",
        f"avg_count={stats.avg_count:.6f}",
    ]
    for prefix, mapping in (
        ("split_images", stats.per_split_images),
        ("band_images", stats.per_band_images),
        ("weather_images", stats.per_weather_images),
        ("weather_annotations", stats.per_weather_annotations),
    ):
        for k, v in mapping.items():
            lines.append(f"{prefix}.{k}={v}")
    return "\n".join(lines) + "\n"
