"""Heads mapping backbone features to main logits and residual logits."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import SizeMismatchError
from .pyramid import upsample_bilinear

BASIC = "basic"
GUIDED = "guided"
PREDICTOR_KINDS = (BASIC, GUIDED)


@dataclass(frozen=True)
class PredictorSpec:
    kind: str
    in_channels: int
    num_classes: int
    guide_channels: int = 0
    hidden_channels: int | None = None

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.kind == GUIDED and self.guide_channels <= 0:
            raise ValueError("a guided predictor needs guide_channels > 0")


class MainPredictor(nn.Module):
    def __init__(self, in_channels, num_classes):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, num_classes, 1)

    def forward(self, feature):
        return self.conv(feature)


class BasicPredictor(nn.Module):
    """A single 1x1 convolution from residual features to residual logits."""

    def __init__(self, spec: PredictorSpec):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(spec.in_channels, spec.num_classes, 1)

    def forward(self, residual, guide=None):
        if residual.shape[-3] != self.spec.in_channels:
            raise ValueError(
                f"residual has {residual.shape[-3]} channels, predictor expects "
                f"{self.spec.in_channels}"
            )
        return self.conv(residual)


class GuidedPredictor(nn.Module):
    """Residual predictor conditioned on the coarser level's main feature.

    The guide is squeezed to ``hidden_channels`` (default: ``num_classes``) by
    a 1x1 convolution and activation, bilinearly upsampled 2x, concatenated
    with the residual feature and mapped to logits by a second 1x1
    convolution. Squeezing before upsampling keeps the cost at the coarse
    resolution.
    """

    def __init__(self, spec: PredictorSpec):
        super().__init__()
        self.spec = spec
        hidden = spec.hidden_channels or spec.num_classes
        self.guide = nn.Sequential(nn.Conv2d(spec.guide_channels, hidden, 1), nn.PReLU(hidden))
        self.head = nn.Conv2d(spec.in_channels + hidden, spec.num_classes, 1)

    def forward(self, residual, guide):
        if residual.shape[-3] != self.spec.in_channels:
            raise ValueError(
                f"residual has {residual.shape[-3]} channels, predictor expects "
                f"{self.spec.in_channels}"
            )
        h, w = residual.shape[-2:]
        gh, gw = guide.shape[-2:]
        if (h, w) != (2 * gh, 2 * gw):
            raise SizeMismatchError(
                f"guide must be half the residual size, got {gh}x{gw} vs {h}x{w}"
            )
        g = upsample_bilinear(self.guide(guide), (h, w))
        return self.head(torch.cat([residual, g], dim=-3))


def build_predictor(spec: PredictorSpec) -> nn.Module:
    return GuidedPredictor(spec) if spec.kind == GUIDED else BasicPredictor(spec)


def predict_main(head: MainPredictor, main_feature):
    return head(main_feature)


def predict_residual_basic(predictor: BasicPredictor, residual):
    return predictor(residual)


def predict_residual_guided(predictor: GuidedPredictor, residual, prev_main_feature):
    return predictor(residual, prev_main_feature)
