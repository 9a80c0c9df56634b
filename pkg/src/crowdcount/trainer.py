"""Training loop and evaluation driver.

Data policy: every image is first rescaled so its minimum dimension is at
least ``resize_min`` and its maximum at most ``resize_max`` (max wins when
both cannot hold); training draws random fixed-size patches, inference
runs on the full resized image. Optimization is Adam at a fixed learning
rate with beta1 = 0.9; the checkpoint with the lowest validation MAE is
retained.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .annotations import AnnotatedImage, HeadAnnotation, Split
from .densitygen import pyramid_targets
from .losses import LossConfig, inverse_frequency_weights, total_loss
from .metrics import EvalReport, build_report
from .network import CrowdRefineNet

# Full-image inference beyond this many pixels falls back to overlapping tiles.
DEFAULT_PIXEL_BUDGET = 4096 * 4096
TILE_SIZE = 1024
TILE_OVERLAP = 64


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 256
    resize_min: int = 512
    resize_max: int = 2048
    learning_rate: float = 1e-5
    momentum_beta1: float = 0.9
    batch_size: int = 24
    max_steps: int = 1000
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_interval: int = 100
    crops_per_image: int = 4
    sigma: float = 4.0
    pixel_budget: int = DEFAULT_PIXEL_BUDGET

    def __post_init__(self):
        if self.crop_size % 32:
            raise ValueError("crop_size must be divisible by 32")
        if self.resize_min > self.resize_max:
            raise ValueError("resize_min must not exceed resize_max")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    model: CrowdRefineNet
    trace: list[dict]
    val_history: list[tuple[int, float]]
    best_val_mae: Optional[float]
    best_state: dict = field(repr=False, default_factory=dict)


def resize_policy(
    image_dims: tuple[int, int], resize_min: int = 512, resize_max: int = 2048
) -> tuple[tuple[int, int], float]:
    """Target dims and scale factor under the min/max-dimension policy.

    The minimum dimension is brought to ``resize_min`` unless doing so pushes
    the maximum past ``resize_max``, in which case the max constraint wins.
    """
    w, h = image_dims
    if w <= 0 or h <= 0:
        raise ValueError("image dims must be positive")
    lo, hi = min(w, h), max(w, h)
    factor = 1.0
    if lo < resize_min:
        factor = resize_min / lo
    if hi * factor > resize_max:
        factor = resize_max / hi
    if factor == 1.0:
        return (w, h), 1.0
    # floor with an epsilon so exact products are not knocked down a pixel
    new_w = int(w * factor + 1e-6)
    new_h = int(h * factor + 1e-6)
    return (new_w, new_h), factor


def resize_image_and_heads(
    pixels: np.ndarray,
    annotation: AnnotatedImage,
    resize_min: int = 512,
    resize_max: int = 2048,
) -> tuple[np.ndarray, AnnotatedImage]:
    """Apply the resize policy to pixels and scale annotations by the same factor."""
    (new_w, new_h), factor = resize_policy(
        (annotation.width, annotation.height), resize_min, resize_max
    )
    if factor == 1.0:
        return pixels, annotation
    from PIL import Image

    resized = np.asarray(
        Image.fromarray(pixels).resize((new_w, new_h), Image.BILINEAR)
    )
    heads = tuple(
        replace(
            h,
            x=min(h.x * factor, new_w),
            y=min(h.y * factor, new_h),
            width=h.width * factor,
            height=h.height * factor,
        )
        for h in annotation.heads
    )
    annotation = replace(annotation, width=new_w, height=new_h, heads=heads)
    return resized, annotation


def sample_patch(
    pixels: np.ndarray,
    heads: Sequence[HeadAnnotation],
    crop_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[HeadAnnotation]]:
    """Uniform-random square crop; heads whose centers fall inside are shifted."""
    h, w = pixels.shape[:2]
    if h < crop_size or w < crop_size:
        raise ValueError(f"image {w}x{h} smaller than crop size {crop_size}")
    left = int(rng.integers(0, w - crop_size + 1))
    top = int(rng.integers(0, h - crop_size + 1))
    patch = pixels[top : top + crop_size, left : left + crop_size]
    kept = [
        replace(hd, x=hd.x - left, y=hd.y - top)
        for hd in heads
        if left <= hd.x < left + crop_size and top <= hd.y < top + crop_size
    ]
    return patch, kept


def _to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = pixels.astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).to(dtype)


def _targets_tensor(batch_targets: list[dict], dtype=torch.float32) -> dict[int, torch.Tensor]:
    out = {}
    for level in (3, 4, 5, 6):
        maps = [t[level].values for t in batch_targets]
        out[level] = torch.from_numpy(np.stack(maps)).unsqueeze(1).to(dtype)
    return out


def train(
    model: CrowdRefineNet,
    train_data: Sequence[tuple[np.ndarray, AnnotatedImage]],
    val_data: Sequence[tuple[np.ndarray, AnnotatedImage]],
    tcfg: TrainConfig,
    lcfg: LossConfig,
) -> TrainResult:
    """Patch-sampling Adam training with periodic best-checkpoint selection."""
    if not train_data:
        raise ValueError("empty train split")
    rng = np.random.default_rng(tcfg.seed)
    torch.manual_seed(tcfg.seed)

    resized = [
        resize_image_and_heads(px, ann, tcfg.resize_min, tcfg.resize_max)
        for px, ann in train_data
    ]

    if model.class_conditioned and lcfg.class_weights is None:
        lcfg = copy.copy(lcfg)
        lcfg.class_weights = inverse_frequency_weights(
            [ann.labels.weather for _, ann in resized]
        )

    optimizer = torch.optim.Adam(
        model.parameters(), lr=tcfg.learning_rate, betas=(tcfg.momentum_beta1, 0.999)
    )

    trace: list[dict] = []
    val_history: list[tuple[int, float]] = []
    best_val_mae: Optional[float] = None
    best_state = copy.deepcopy(model.state_dict())

    # Round-robin over images, several crops each, reshuffled per pass.
    order: list[int] = []

    def next_image_index() -> int:
        nonlocal order
        if not order:
            idx = np.repeat(np.arange(len(resized)), tcfg.crops_per_image)
            rng.shuffle(idx)
            order = list(idx)
        return order.pop()

    model.train()
    for step in range(1, tcfg.max_steps + 1):
        images, targets, labels = [], [], []
        for _ in range(tcfg.batch_size):
            px, ann = resized[next_image_index()]
            patch, heads = sample_patch(px, ann.heads, tcfg.crop_size, rng)
            images.append(_to_tensor(patch))
            targets.append(
                pyramid_targets(heads, (tcfg.crop_size, tcfg.crop_size), tcfg.sigma)
            )
            labels.append(ann.labels.weather.value)
        batch = torch.stack(images)
        target_tensors = _targets_tensor(targets)
        weather = (
            torch.tensor(labels, dtype=torch.long) if model.class_conditioned else None
        )

        optimizer.zero_grad()
        pyramid = model(batch)
        loss, components = total_loss(pyramid, target_tensors, weather, lcfg)
        if not math.isfinite(components["L_f"]):
            raise DivergenceError(f"non-finite loss at step {step}: {components}")
        loss.backward()
        optimizer.step()
        trace.append({"step": step, **components})

        if tcfg.checkpoint_interval and step % tcfg.checkpoint_interval == 0 and val_data:
            report = evaluate(model, val_data, tcfg)
            val_mae = report.overall.mae
            val_history.append((step, val_mae))
            if best_val_mae is None or val_mae < best_val_mae:
                best_val_mae = val_mae
                best_state = copy.deepcopy(model.state_dict())
            model.train()

    if best_val_mae is not None:
        model.load_state_dict(best_state)
    else:
        best_state = copy.deepcopy(model.state_dict())
    model.eval()
    return TrainResult(
        model=model,
        trace=trace,
        val_history=val_history,
        best_val_mae=best_val_mae,
        best_state=best_state,
    )


def _pad_to_multiple(pixels: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = pixels.shape[:2]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return pixels
    return np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")


@torch.no_grad()
def predict_image_count(
    model: CrowdRefineNet, pixels: np.ndarray, pixel_budget: int = DEFAULT_PIXEL_BUDGET
) -> float:
    """Count for one (already resized) image, tiling when it exceeds the budget."""
    h, w = pixels.shape[:2]
    if h * w <= pixel_budget:
        return model.predict_count(_to_tensor(_pad_to_multiple(pixels)))
    # Overlapping tiles; counts are summed over a non-overlapping partition of
    # tile interiors so the count functional is preserved.
    total = 0.0
    step = TILE_SIZE - 2 * TILE_OVERLAP
    for top in range(0, h, step):
        for left in range(0, w, step):
            t0 = max(top - TILE_OVERLAP, 0)
            l0 = max(left - TILE_OVERLAP, 0)
            tile = pixels[t0 : top + step + TILE_OVERLAP, l0 : left + step + TILE_OVERLAP]
            tile = _pad_to_multiple(tile)
            pyramid = model(_to_tensor(tile).unsqueeze(0))
            y3 = pyramid.y3[0, 0]
            # Interior of this tile in y3 coordinates (y3 is 1/4 resolution).
            r0 = (top - t0) // 4
            c0 = (left - l0) // 4
            r1 = r0 + min(step, h - top) // 4 + (1 if min(step, h - top) % 4 else 0)
            c1 = c0 + min(step, w - left) // 4 + (1 if min(step, w - left) % 4 else 0)
            total += float(y3[r0:r1, c0:c1].sum().item())
    return total


def evaluate(
    model: CrowdRefineNet,
    data: Sequence[tuple[np.ndarray, AnnotatedImage]],
    tcfg: TrainConfig = TrainConfig(),
) -> EvalReport:
    """Full-image inference over a split; report per sub-category."""
    if not data:
        raise ValueError("empty evaluation split")
    was_training = model.training
    model.eval()
    records = []
    for px, ann in data:
        rpx, rann = resize_image_and_heads(px, ann, tcfg.resize_min, tcfg.resize_max)
        pred = predict_image_count(model, rpx, tcfg.pixel_budget)
        records.append((float(ann.count), pred, ann.labels.weather))
    if was_training:
        model.train()
    return build_report(records)


def format_trace(trace: list[dict]) -> str:
    """Line-oriented training log: ``step L_f L_d L_c L_w``."""
    lines = [
        f"{t['step']} {t['L_f']:.6f} {t['L_d']:.6f} {t['L_c']:.6f} {t['L_w']:.6f}"
        for t in trace
    ]
    return "\n".join(lines) + ("\n" if lines else "")
