"""Coarse-to-fine residual counting network with confidence-gated refinement.

The backbone emits feature taps at 1/4, 1/8 and 1/16 of the input
resolution; the deepest tap is max-pooled to 1/32 and regressed to the
coarse density map y6. Each finer level predicts a signed residual from
its tap, gates it elementwise by a confidence map in (0, 1), and adds the
bilinearly upsampled coarser prediction:

    y5 = r5 * cm5 + up(y6),  y4 = r4 * cm4 + up(y5),  y3 = r3 * cm3 + up(y4)

y3 (1/4 resolution) is the inference output; its sum is the count.

Optionally a weather-classification block conditions the confidence
estimation: one shared conv block on the level-5 reduced features emits a
4-channel pre-pool feature map (and, after average pooling, 4-class
logits); the features are resized and concatenated into every confidence
estimator's input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONE_KINDS = ("vgg16", "resnet101", "tiny")

# Feature widths at the (1/4, 1/8, 1/16) taps plus the coarse (1/32) stage.
_TAP_CHANNELS = {
    "vgg16": (256, 512, 512, 512),
    "resnet101": (256, 512, 1024, 2048),
    "tiny": (16, 32, 64, 64),
}

WEATHER_CLASSES = 4
_DR_WIDTH = 32  # dimensionality-reduction output channels
_CC_WIDTH = 4   # class-conditioning pre-pool feature channels


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "tiny"
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")

    @property
    def tap_channels(self) -> tuple[int, int, int, int]:
        return _TAP_CHANNELS[self.kind]


@dataclass
class PredictionPyramid:
    y6: torch.Tensor
    y5: torch.Tensor
    y4: torch.Tensor
    y3: torch.Tensor
    r5: Optional[torch.Tensor] = None
    r4: Optional[torch.Tensor] = None
    r3: Optional[torch.Tensor] = None
    cm5: Optional[torch.Tensor] = None
    cm4: Optional[torch.Tensor] = None
    cm3: Optional[torch.Tensor] = None
    cm6: Optional[torch.Tensor] = None  # None means the implicit all-ones gate
    weather_logits: Optional[torch.Tensor] = None

    def density(self, level: int) -> torch.Tensor:
        return {6: self.y6, 5: self.y5, 4: self.y4, 3: self.y3}[level]

    def confidence(self, level: int) -> Optional[torch.Tensor]:
        return {6: self.cm6, 5: self.cm5, 4: self.cm4, 3: self.cm3}[level]


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x, align_corners disabled: sums scale by exactly 4."""
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def _density_head(in_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, 32, 1),
        nn.ReLU(inplace=True),
        nn.Conv2d(32, 32, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(32, 1, 3, padding=1),
    )


class _UnitIntervalSqueeze(nn.Module):
    """Affine squeeze of sigmoid outputs into (eps, 1 - eps).

    Keeps the gate strictly inside (0, 1) even where float32 sigmoid
    saturates, so log(confidence) stays finite for any input. A hard
    clamp would do the same but with zero gradient past the bounds,
    which lets the log-confidence penalty pin a saturated gate in place
    permanently; the affine form keeps the sigmoid tail gradient alive.
    """

    EPS = 1e-6

    def forward(self, x):
        return self.EPS + (1.0 - 2.0 * self.EPS) * x


def _confidence_head(in_channels: int) -> nn.Sequential:
    # Sigmoid keeps the gate inside (0, 1); the squeeze guards saturation.
    return nn.Sequential(
        nn.Conv2d(in_channels, 32, 1),
        nn.ReLU(inplace=True),
        nn.Conv2d(32, 16, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(16, 16, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(16, 1, 1),
        nn.Sigmoid(),
        _UnitIntervalSqueeze(),
    )


class _VggBackbone(nn.Module):
    """VGG16 conv1-conv5 with four pools; taps after blocks 3, 4 and 5."""

    _PLAN = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))

    def __init__(self):
        super().__init__()
        blocks = []
        in_ch = 3
        for width, n_convs in self._PLAN:
            layers = []
            for _ in range(n_convs):
                layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(inplace=True)]
                in_ch = width
            blocks.append(nn.Sequential(*layers))
        self.block1, self.block2, self.block3, self.block4, self.block5 = blocks
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x):
        x = self.pool(self.block1(x))
        x = self.pool(self.block2(x))
        f3 = self.block3(x)            # 1/4, 256
        f4 = self.block4(self.pool(f3))  # 1/8, 512
        f5 = self.block5(self.pool(f4))  # 1/16, 512
        f6 = self.pool(f5)             # 1/32, 512
        return f3, f4, f5, f6


class _ResnetBackbone(nn.Module):
    """Torchvision ResNet-101 trunk; taps after layer1/2/3, coarse from layer4."""

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        from torchvision.models import resnet101

        net = resnet101(weights=None)
        if weights_path:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4

    def forward(self, x):
        x = self.stem(x)
        f3 = self.layer1(x)   # 1/4, 256
        f4 = self.layer2(f3)  # 1/8, 512
        f5 = self.layer3(f4)  # 1/16, 1024
        f6 = self.layer4(f5)  # 1/32, 2048
        return f3, f4, f5, f6


class _TinyBackbone(nn.Module):
    """4-stage 8/16/32/64-channel mini-CNN with the same tap scales, for fast tests."""

    def __init__(self):
        super().__init__()

        def stage(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2, 2),
            )

        self.stage1 = stage(3, 8)
        self.stage2 = stage(8, 16)
        self.stage3 = stage(16, 32)
        self.stage4 = stage(32, 64)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x):
        x = self.stage1(x)       # 1/2
        f3 = self.stage2(x)      # 1/4, 16
        f4 = self.stage3(f3)     # 1/8, 32
        f5 = self.stage4(f4)     # 1/16, 64
        f6 = self.pool(f5)       # 1/32, 64
        return f3, f4, f5, f6


def _make_backbone(config: BackboneConfig) -> nn.Module:
    if config.kind == "vgg16":
        net = _VggBackbone()
        if config.pretrained_weights:
            net.load_state_dict(torch.load(config.pretrained_weights, map_location="cpu"))
        return net
    if config.kind == "resnet101":
        return _ResnetBackbone(config.pretrained_weights)
    return _TinyBackbone()


REFINEMENT_MODES = ("gated", "plain", "none")


class CrowdRefineNet(nn.Module):
    """Full model: backbone, coarse head, and three gated refinement levels.

    ``refinement`` selects the ablation family: "gated" is the full model,
    "plain" adds residuals without confidence gating, and "none" only
    upsamples the coarse prediction.
    """

    def __init__(
        self,
        config: BackboneConfig = BackboneConfig(),
        class_conditioned: bool = False,
        ceb_at_coarsest: bool = False,
        refinement: str = "gated",
    ):
        super().__init__()
        if refinement not in REFINEMENT_MODES:
            raise ValueError(f"unknown refinement mode {refinement!r}")
        if refinement != "gated" and (class_conditioned or ceb_at_coarsest):
            raise ValueError("confidence options require gated refinement")
        self.config = config
        self.class_conditioned = class_conditioned
        self.ceb_at_coarsest = ceb_at_coarsest
        self.refinement = refinement
        c3, c4, c5, c6 = config.tap_channels
        self.backbone = _make_backbone(config)

        self.cb6 = _density_head(c6)
        if refinement != "none":
            self.cb5 = _density_head(c5)
            self.cb4 = _density_head(c4)
            self.cb3 = _density_head(c3)

        if refinement == "gated":
            self.dr5 = nn.Conv2d(c5, _DR_WIDTH, 1)
            self.dr4 = nn.Conv2d(c4, _DR_WIDTH, 1)
            self.dr3 = nn.Conv2d(c3, _DR_WIDTH, 1)

            ceb_in = _DR_WIDTH + 1 + (_CC_WIDTH if class_conditioned else 0)
            self.ceb5 = _confidence_head(ceb_in)
            self.ceb4 = _confidence_head(ceb_in)
            self.ceb3 = _confidence_head(ceb_in)
            if ceb_at_coarsest:
                self.dr6 = nn.Conv2d(c6, _DR_WIDTH, 1)
                self.ceb6 = _confidence_head(ceb_in)

        if class_conditioned:
            # One block shared across levels, fed by the level-5 reduced features.
            self.cc = nn.Sequential(
                nn.Conv2d(_DR_WIDTH, 32, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(32, _CC_WIDTH, 3, padding=1),
            )

        self._init_heads()

    def _init_heads(self):
        # Fan-in scaled init for everything added on top of the backbone; the
        # backbone keeps its own (possibly pretrained) initialization, except
        # the tiny one which has nothing to preserve.
        for name, module in self.named_modules():
            if name.startswith("backbone") and self.config.kind != "tiny":
                continue
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def _refine(self, y_coarse, feat, cb, dr, ceb, cc_feat):
        if self.refinement == "none":
            return upsample2x(y_coarse), None, None
        residual = cb(feat)
        if self.refinement == "plain":
            return residual + upsample2x(y_coarse), residual, None
        reduced = dr(feat)
        ceb_in = [reduced, residual]
        if cc_feat is not None:
            ceb_in.append(
                F.interpolate(cc_feat, size=feat.shape[-2:], mode="bilinear",
                              align_corners=False)
            )
        confidence = ceb(torch.cat(ceb_in, dim=1))
        y = residual * confidence + upsample2x(y_coarse)
        return y, residual, confidence

    def forward(self, images: torch.Tensor) -> PredictionPyramid:
        if images.shape[-1] % 32 or images.shape[-2] % 32:
            raise ValueError(
                f"input spatial dims must be divisible by 32, got {tuple(images.shape[-2:])}"
            )
        f3, f4, f5, f6 = self.backbone(images)
        y6 = self.cb6(f6)

        cc_feat = None
        weather_logits = None
        if self.class_conditioned:
            cc_feat = self.cc(self.dr5(f5))
            weather_logits = cc_feat.mean(dim=(-2, -1))

        cm6 = None
        if self.ceb_at_coarsest:
            ceb_in = [self.dr6(f6), y6]
            if cc_feat is not None:
                ceb_in.append(
                    F.interpolate(cc_feat, size=f6.shape[-2:], mode="bilinear",
                                  align_corners=False)
                )
            cm6 = self.ceb6(torch.cat(ceb_in, dim=1))

        m = lambda name: getattr(self, name, None)  # absent under ablation modes
        y5, r5, cm5 = self._refine(y6, f5, m("cb5"), m("dr5"), m("ceb5"), cc_feat)
        y4, r4, cm4 = self._refine(y5, f4, m("cb4"), m("dr4"), m("ceb4"), cc_feat)
        y3, r3, cm3 = self._refine(y4, f3, m("cb3"), m("dr3"), m("ceb3"), cc_feat)

        return PredictionPyramid(
            y6=y6, y5=y5, y4=y4, y3=y3,
            r5=r5, r4=r4, r3=r3,
            cm5=cm5, cm4=cm4, cm3=cm3,
            cm6=cm6, weather_logits=weather_logits,
        )

    @torch.no_grad()
    def predict_count(self, image: torch.Tensor) -> float:
        """Sum of the finest predicted density map for one image (CHW or NCHW)."""
        if image.dim() == 3:
            image = image.unsqueeze(0)
        pyramid = self.forward(image)
        return float(pyramid.y3.sum().item())


def build_model(
    config: BackboneConfig,
    class_conditioned: bool = False,
    ceb_at_coarsest: bool = False,
    refinement: str = "gated",
) -> CrowdRefineNet:
    return CrowdRefineNet(config, class_conditioned, ceb_at_coarsest, refinement)


CHECKPOINT_VERSION = "1"


def save_checkpoint(model: CrowdRefineNet, path, extra: Optional[dict] = None) -> None:
    """Keyed weight archive plus a manifest describing how to rebuild the model."""
    manifest = {
        "backbone": model.config.kind,
        "class_conditioned": model.class_conditioned,
        "ceb_at_coarsest": model.ceb_at_coarsest,
        "refinement": model.refinement,
        "version": CHECKPOINT_VERSION,
    }
    if extra:
        manifest.update(extra)
    torch.save({"manifest": manifest, "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> tuple[CrowdRefineNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    manifest = blob["manifest"]
    model = build_model(
        BackboneConfig(kind=manifest["backbone"]),
        class_conditioned=manifest["class_conditioned"],
        ceb_at_coarsest=manifest["ceb_at_coarsest"],
        refinement=manifest.get("refinement", "gated"),
    )
    model.load_state_dict(blob["state_dict"])
    return model, manifest


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
