"""Count error metrics and the sub-category evaluation protocol.

MAE is the mean absolute count error; MSE here is the root of the mean
squared count error (the convention of counting benchmarks). Images are
partitioned into density bands by ground-truth count: low = [0, 50],
medium = [51, 500], high = [501, inf); any image whose weather differs
from normal additionally lands in the overlapping "weather" category.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .annotations import LOW_MAX, MEDIUM_MAX, Weather

CATEGORIES = ("low", "medium", "high", "weather", "overall")


@dataclass(frozen=True)
class CategoryMetrics:
    mae: Optional[float]
    mse: Optional[float]
    n_images: int


@dataclass(frozen=True)
class EvalReport:
    categories: dict[str, CategoryMetrics]

    @property
    def overall(self) -> CategoryMetrics:
        return self.categories["overall"]

    def as_dict(self) -> dict:
        return {
            name: {"mae": m.mae, "mse": m.mse, "n_images": m.n_images}
            for name, m in self.categories.items()
        }


def mae_mse(gt_counts: Sequence[float], pred_counts: Sequence[float]) -> tuple[float, float]:
    if len(gt_counts) != len(pred_counts):
        raise ValueError(
            f"length mismatch: {len(gt_counts)} ground-truth vs {len(pred_counts)} predicted"
        )
    if not gt_counts:
        raise ValueError("empty input")
    errors = [abs(g - p) for g, p in zip(gt_counts, pred_counts)]
    n = len(errors)
    mae = sum(errors) / n
    mse = math.sqrt(sum(e * e for e in errors) / n)
    return mae, mse


def categorize(gt_count: float, weather: Weather) -> set[str]:
    """Category memberships of one image; fractional counts floor for banding."""
    if gt_count < 0:
        raise ValueError("negative ground-truth count")
    c = math.floor(gt_count)
    if c <= LOW_MAX:
        band = "low"
    elif c <= MEDIUM_MAX:
        band = "medium"
    else:
        band = "high"
    cats = {band, "overall"}
    if weather != Weather.NORMAL:
        cats.add("weather")
    return cats


def build_report(records: Sequence[tuple[float, float, Weather]]) -> EvalReport:
    """Per-category metrics from (gt-count, predicted-count, weather) records."""
    if not records:
        raise ValueError("empty input")
    buckets: dict[str, list[tuple[float, float]]] = {c: [] for c in CATEGORIES}
    for gt, pred, weather in records:
        for cat in categorize(gt, weather):
            buckets[cat].append((gt, pred))
    categories = {}
    for cat in CATEGORIES:
        pairs = buckets[cat]
        if pairs:
            mae, mse = mae_mse([g for g, _ in pairs], [p for _, p in pairs])
            categories[cat] = CategoryMetrics(mae=mae, mse=mse, n_images=len(pairs))
        else:
            categories[cat] = CategoryMetrics(mae=None, mse=None, n_images=0)
    return EvalReport(categories=categories)


def format_report_table(report: EvalReport) -> str:
    lines = [f"{'category':<10}{'n':>6}{'MAE':>12}{'MSE':>12}"]
    for cat in CATEGORIES:
        m = report.categories[cat]
        mae = f"{m.mae:.2f}" if m.mae is not None else "-"
        mse = f"{m.mse:.2f}" if m.mse is not None else "-"
        lines.append(f"{cat:<10}{m.n_images:>6}{mae:>12}{mse:>12}")
    return "\n".join(lines) + "\n"


def format_report_kv(report: EvalReport) -> str:
    lines = []
    for cat in CATEGORIES:
        m = report.categories[cat]
        lines.append(f"{cat}.n_images={m.n_images}")
        lines.append(f"{cat}.mae={'' if m.mae is None else f'{m.mae:.6f}'}")
        lines.append(f"{cat}.mse={'' if m.mse is None else f'{m.mse:.6f}'}")
    return "\n".join(lines) + "\n"
