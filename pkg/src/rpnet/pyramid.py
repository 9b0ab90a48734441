"""Label and logit pyramids, and the additive reconstruction shared by
training and inference.

Conventions (used everywhere in the package):

* Labels are integer tensors shaped ``(H, W)`` or ``(N, H, W)``. Pixels equal
  to ``ignore_index`` are never interpolated.
* Logits are float tensors shaped ``(C, H, W)`` or ``(N, C, H, W)``.
* Nearest-neighbour resampling reads source pixel
  ``(floor(y / scale), floor(x / scale))`` for target pixel ``(y, x)``.
* Bilinear resampling aligns sample centres with pixel centres
  (``align_corners=False``); the edge pixels are clamped.
* Argmax ties resolve to the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import SizeMismatchError

DEFAULT_SCALES = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2))


@dataclass(frozen=True)
class PyramidSpec:
    """Scale structure of a pyramid.

    ``scales[i]`` is the scale of level ``i + 1``; level 1 is the coarsest
    (the main prediction) and scales strictly increase with the level index.
    """

    scales: tuple[Fraction, ...]
    base_size: tuple[int, int]

    def __post_init__(self):
        scales = tuple(Fraction(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "base_size", tuple(int(v) for v in self.base_size))
        if not scales:
            raise ValueError("a pyramid needs at least one level")
        if any(s <= 0 or s > 1 for s in scales):
            raise ValueError(f"scales must lie in (0, 1], got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must strictly increase with level, got {scales}")
        h, w = self.base_size
        for s in scales:
            if (h * s).denominator != 1 or (w * s).denominator != 1:
                raise SizeMismatchError(
                    f"scale {s} does not divide base size {h}x{w}"
                )

    @classmethod
    def default(cls, base_size) -> "PyramidSpec":
        """Levels at 1/8, 1/4 and 1/2 of ``base_size``."""
        return cls(DEFAULT_SCALES, base_size)

    @property
    def num_levels(self) -> int:
        return len(self.scales)

    @property
    def sizes(self) -> list[tuple[int, int]]:
        h, w = self.base_size
        return [(int(h * s), int(w * s)) for s in self.scales]


def nearest_indices(src: int, dst: int) -> torch.Tensor:
    """Source index read by each of ``dst`` target positions."""
    ratio = Fraction(src, dst)
    return torch.tensor([int(Fraction(i) * ratio) for i in range(dst)], dtype=torch.long)


def resize_nearest(x: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resampling of the last two dims to ``size``.

    Works for integer labels and float maps alike, up or down.
    """
    h, w = x.shape[-2:]
    rows = nearest_indices(h, size[0]).to(x.device)
    cols = nearest_indices(w, size[1]).to(x.device)
    return x.index_select(-2, rows).index_select(-1, cols)


def build_label_pyramid(label: torch.Tensor, spec: PyramidSpec) -> list[torch.Tensor]:
    """Nearest-neighbour subsampled labels, one per level of ``spec``."""
    if tuple(label.shape[-2:]) != spec.base_size:
        raise SizeMismatchError(
            f"label is {tuple(label.shape[-2:])}, pyramid expects {spec.base_size}"
        )
    return [resize_nearest(label, size) for size in spec.sizes]


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected a (C,H,W) or (N,C,H,W) tensor, got {tuple(x.shape)}")


def upsample_bilinear(logits: torch.Tensor, size) -> torch.Tensor:
    size = (int(size[0]), int(size[1]))
    h, w = logits.shape[-2:]
    if size[0] < h or size[1] < w:
        raise SizeMismatchError(f"cannot upsample {h}x{w} to smaller {size[0]}x{size[1]}")
    if (h, w) == size:
        return logits
    x, squeezed = _as_batch(logits)
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out[0] if squeezed else out


def reconstruct_targets(
    main: torch.Tensor,
    residuals: Sequence[torch.Tensor],
    spec: PyramidSpec | None = None,
) -> list[torch.Tensor]:
    """Top-down additive reconstruction of the target pyramid.

    ``target_1 = main`` and ``target_i = up(target_{i-1}) + residuals[i-2]``.
    The upsampling is differentiable, so gradients of a fine-level loss reach
    the coarser predictions.
    """
    if spec is not None:
        sizes = spec.sizes[: 1 + len(residuals)]
        got = [tuple(t.shape[-2:]) for t in (main, *residuals)]
        if got != sizes:
            raise SizeMismatchError(f"level sizes {got} do not match pyramid {sizes}")
    channels = main.shape[-3]
    targets = [main]
    for i, tres in enumerate(residuals, start=2):
        if tres.shape[-3] != channels:
            raise ValueError(
                f"residual at level {i} has {tres.shape[-3]} channels, main has {channels}"
            )
        targets.append(upsample_bilinear(targets[-1], tres.shape[-2:]) + tres)
    return targets


def one_hot(label: torch.Tensor, num_classes: int, ignore_index: int = 255) -> torch.Tensor:
    """Class indicator maps shaped like logits; ignore pixels are all-zero."""
    valid = label != ignore_index
    if bool(((label < 0) | (label >= num_classes))[valid].any()):
        raise ValueError("label contains indices outside [0, num_classes)")
    safe = torch.where(valid, label, torch.zeros_like(label))
    hot = F.one_hot(safe.long(), num_classes) * valid.unsqueeze(-1)
    return hot.movedim(-1, -3).to(torch.int64)


def label_residual_pyramid(
    labels: Sequence[torch.Tensor], num_classes: int, ignore_index: int = 255
) -> list[torch.Tensor]:
    """Signed one-hot residuals ``onehot(label_i) - up(onehot(label_{i-1}))``.

    Returned for levels 2..L. Diagnostic only; training never uses it.
    """
    hots = [one_hot(lab, num_classes, ignore_index) for lab in labels]
    return [
        fine - resize_nearest(coarse, fine.shape[-2:])
        for coarse, fine in zip(hots, hots[1:])
    ]


def final_prediction(target_top: torch.Tensor, full_size) -> torch.Tensor:
    """Upsample the finest reconstructed logits and take the per-pixel argmax."""
    logits = upsample_bilinear(target_top, full_size)
    return logits.argmax(dim=-3)
