"""The assembled residual pyramid network and its checkpoint format.

Checkpoint layout (a ``torch.save`` archive, loadable with
``weights_only=True``)::

    {
      "format": "rpnet-checkpoint",
      "version": 1,
      "model": {num_classes, residual_mode, predictor, num_levels},
      "blocks": [BottleneckSpec as dict, ...],
      "state_dict": {"backbone.<section>.<block>.<layer>...": tensor,
                     "predictors.main...", "predictors.level2...", ...},
      "extra": {...}   # free-form metadata (training config, seed, ...)
    }
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneOutput, BottleneckSpec, enet_layout, specs_to_dicts
from .errors import DataError
from .predictors import BASIC, GUIDED, MainPredictor, PredictorSpec, build_predictor
from .pyramid import PyramidSpec, final_prediction, reconstruct_targets

CHECKPOINT_FORMAT = "rpnet-checkpoint"
CHECKPOINT_VERSION = 1

PREDICTOR_ALIASES = {"bp": BASIC, "gp": GUIDED, BASIC: BASIC, GUIDED: GUIDED}


@dataclass
class RPNetOutput:
    main: torch.Tensor
    residuals: list[torch.Tensor] = field(default_factory=list)
    features: BackboneOutput | None = None

    def targets(self) -> list[torch.Tensor]:
        return reconstruct_targets(self.main, self.residuals)


class RPNet(nn.Module):
    """Single-shot segmentation network.

    Args:
        num_classes: number of output classes.
        specs: backbone block list; defaults to :func:`enet_layout`.
        residual_mode: ``"sr"`` or ``"er"``.
        predictor: ``"basic"``/``"bp"`` or ``"guided"``/``"gp"``.
        num_levels: pyramid levels to predict. 1 is the plain encoder with
            bilinear interpolation; 2 adds the 1/4 residual; 3 adds the 1/2
            residual as well.
    """

    def __init__(
        self,
        num_classes,
        specs=None,
        residual_mode="sr",
        predictor="basic",
        num_levels=3,
        dropout=0.1,
        early_dropout=0.01,
    ):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if predictor not in PREDICTOR_ALIASES:
            raise ValueError(f"unknown predictor {predictor!r}")
        self.num_classes = num_classes
        self.predictor_kind = PREDICTOR_ALIASES[predictor]
        self.backbone = Backbone(
            specs if specs is not None else enet_layout(dropout, early_dropout), residual_mode
        )
        available = len(self.backbone.levels)
        if not 1 <= num_levels <= available:
            raise ValueError(f"num_levels must be in [1, {available}]")
        self.num_levels = num_levels

        self.predictors = nn.ModuleDict()
        self.predictors["main"] = MainPredictor(self.backbone.main_channels, num_classes)
        for level in range(2, num_levels + 1):
            spec = PredictorSpec(
                kind=self.predictor_kind,
                in_channels=self.backbone.level_channels(level),
                num_classes=num_classes,
                guide_channels=self.backbone.level_channels(level - 1),
            )
            self.predictors[f"level{level}"] = build_predictor(spec)

    @property
    def residual_mode(self) -> str:
        return self.backbone.residual_mode

    def config(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "residual_mode": self.residual_mode,
            "predictor": self.predictor_kind,
            "num_levels": self.num_levels,
        }

    def level_scale(self, level: int) -> Fraction:
        return Fraction(1, 2 ** (len(self.backbone.levels) + 1 - level))

    def pyramid_spec(self, size, max_level=None) -> PyramidSpec:
        top = self.num_levels if max_level is None else max_level
        return PyramidSpec(tuple(self.level_scale(l) for l in range(1, top + 1)), size)

    def residual_predictor(self, level: int) -> nn.Module:
        return self.predictors[f"level{level}"]

    def level_parameters(self, level: int):
        """Parameters owned by one pyramid level (backbone blocks + its head)."""
        yield from self.backbone.level_parameters(level)
        if level == 1:
            yield from self.predictors["main"].parameters()
        elif level <= self.num_levels:
            yield from self.residual_predictor(level).parameters()

    def forward(self, image, max_level=None) -> RPNetOutput:
        """Run the backbone and the heads of levels ``1..max_level``.

        Heads above ``max_level`` are not evaluated, so they take no part in
        the autograd graph.
        """
        max_level = self.num_levels if max_level is None else min(max_level, self.num_levels)
        feats = self.backbone(image)
        out = RPNetOutput(main=self.predictors["main"](feats.main_feature), features=feats)
        for level in range(2, max_level + 1):
            guide = feats.taps[level - 1].exit
            out.residuals.append(self.residual_predictor(level)(feats.residual(level), guide))
        return out

    @torch.no_grad()
    def predict(self, image, level=None) -> torch.Tensor:
        """Label map at the input resolution from the level-``level`` target."""
        out = self(image, max_level=level)
        return final_prediction(out.targets()[-1], image.shape[-2:])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(model: RPNet, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config(),
        "blocks": specs_to_dicts(model.backbone.specs),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, map_location="cpu") -> tuple[RPNet, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an rpnet checkpoint")
    specs = [BottleneckSpec(**d) for d in payload["blocks"]]
    model = RPNet(specs=specs, **payload["model"])
    model.load_state_dict(payload["state_dict"])
    return model, payload
