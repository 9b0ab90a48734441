"""Loss construction, level-wise staging and the optimisation recipe.

Stage ``k`` of level-wise training minimises ``Loss_k = sum_{i<=k} loss_i``
where ``loss_i`` is the class-weighted cross-entropy between the level-``i``
reconstructed target and the nearest-neighbour scaled label. Joint modes
(EQ/LIN/POLY/NORM) train every level from scratch at once on a normalised
weighted sum.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torch.nn as nn

from .errors import DivergenceError
from .metrics import ConfusionMatrix, mean_iou
from .pyramid import build_label_pyramid, final_prediction, reconstruct_targets

log = logging.getLogger(__name__)

LEVEL_WISE = "level_wise"
JOINT_MODES = ("EQ", "LIN", "POLY", "NORM")
LOSS_MODES = (LEVEL_WISE, *JOINT_MODES)


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    lr_power: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 3
    class_weight_k: float = 1.12
    # iterations per stage; None derives it from the stage's epoch count
    max_iter: int | None = None
    stage_plan: list[tuple[int, int]] = field(default_factory=lambda: [(1, 10), (2, 10), (3, 10)])
    loss_mode: str = LEVEL_WISE
    freeze_previous: bool = False
    augment: bool = True
    seed: int = 0
    eval_batch_size: int = 8

    def __post_init__(self):
        self.stage_plan = [tuple(int(v) for v in s) for s in self.stage_plan]
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.lr_power <= 0:
            raise ValueError("lr_power must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        levels = [lvl for lvl, _ in self.stage_plan]
        if not levels or levels[0] != 1 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"stage_plan levels must strictly increase from 1, got {levels}")
        if any(epochs < 1 for _, epochs in self.stage_plan):
            raise ValueError("every stage needs at least one epoch")

    @property
    def top_level(self) -> int:
        return self.stage_plan[-1][0]

    def stages(self) -> list[tuple[int, int]]:
        """Effective stages: joint modes collapse the plan into one top-level stage."""
        if self.loss_mode == LEVEL_WISE:
            return list(self.stage_plan)
        return [(self.top_level, sum(e for _, e in self.stage_plan))]


# ---------------------------------------------------------------------------
# formulas


def class_weights(pixel_frequencies, k=1.12) -> torch.Tensor:
    """``1 / ln(P_c + k)`` per class."""
    p = torch.as_tensor(pixel_frequencies, dtype=torch.float64)
    if bool(((p < 0) | (p > 1)).any()):
        raise ValueError("pixel frequencies must lie in [0, 1]")
    if bool((p + k <= 1).any()):
        raise ValueError(f"P + k must exceed 1 for every class (k={k})")
    return 1.0 / torch.log(p + k)


def pixel_frequencies(labels, num_classes, ignore_index=255) -> torch.Tensor:
    counts = torch.zeros(num_classes, dtype=torch.float64)
    for lab in labels:
        lab = lab[lab != ignore_index]
        counts += torch.bincount(lab.flatten().long(), minlength=num_classes)[:num_classes].double()
    total = counts.sum()
    return counts / total if total > 0 else counts


def poly_lr(iteration, cfg: TrainConfig, max_iter=None) -> float:
    max_iter = cfg.max_iter if max_iter is None else max_iter
    if max_iter is None or max_iter <= 0:
        raise ValueError("poly_lr needs a positive max_iter")
    if iteration > max_iter:
        warnings.warn(f"iteration {iteration} past max_iter {max_iter}; learning rate clamped to 0")
        return 0.0
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return cfg.base_lr * (1.0 - iteration / max_iter) ** cfg.lr_power


def joint_weights(mode, num_levels) -> torch.Tensor:
    """Normalised per-level weights of the joint (single-training) modes."""
    i = torch.arange(1, num_levels + 1, dtype=torch.float64)
    if mode == "EQ":
        w = torch.ones_like(i)
    elif mode == "LIN":
        w = i
    elif mode == "POLY":
        w = i**2
    elif mode == "NORM":
        w = torch.exp(-0.5 * (i - num_levels) ** 2)
    else:
        raise ValueError(f"unknown joint mode {mode!r}")
    return w / w.sum()


# ---------------------------------------------------------------------------
# losses


def weighted_cross_entropy(logits, label, weight=None, ignore_index=255) -> torch.Tensor:
    """Class-weighted mean cross-entropy; an all-ignore batch gives 0."""
    valid = label != ignore_index
    if not bool(valid.any()):
        return logits.sum() * 0.0
    total = F.cross_entropy(logits, label, weight=weight, ignore_index=ignore_index, reduction="sum")
    if weight is None:
        return total / valid.sum()
    safe = torch.where(valid, label, torch.zeros_like(label))
    return total / weight[safe][valid].sum()


def level_losses(main, residuals, labels, weights=None, ignore_index=255) -> list[torch.Tensor]:
    """``loss_i`` for every level that has a prediction."""
    if len(labels) != 1 + len(residuals):
        raise ValueError(f"{len(labels)} label levels for {1 + len(residuals)} predicted levels")
    targets = reconstruct_targets(main, residuals)
    if weights is not None:
        weights = torch.as_tensor(weights, dtype=main.dtype, device=main.device)
    return [
        weighted_cross_entropy(t, lab, weights, ignore_index) for t, lab in zip(targets, labels)
    ]


def stage_loss(losses: Sequence[torch.Tensor], k: int, mode=LEVEL_WISE) -> torch.Tensor:
    if not 1 <= k <= len(losses):
        raise ValueError(f"stage {k} outside 1..{len(losses)}")
    if mode == LEVEL_WISE:
        return sum(losses[:k], losses[0].new_zeros(()))
    w = joint_weights(mode, len(losses)).to(losses[0])
    return sum((wi * li for wi, li in zip(w, losses)), losses[0].new_zeros(()))


# ---------------------------------------------------------------------------
# augmentation


def flip_pair(image, label):
    return image.flip(-1), label.flip(-1)


def shift_pair(image, label, dy, dx, ignore_index=255):
    """Move content down by ``dy`` and right by ``dx`` pixels.

    Uncovered image pixels replicate the nearest edge; uncovered label pixels
    become ``ignore_index``.
    """
    h, w = label.shape[-2:]
    rows = (torch.arange(h) - dy).clamp(0, h - 1)
    cols = (torch.arange(w) - dx).clamp(0, w - 1)
    image = image.index_select(-2, rows).index_select(-1, cols)
    shifted = label.index_select(-2, rows).index_select(-1, cols).clone()
    if dy:
        shifted[..., :dy, :] = ignore_index
    if dx:
        shifted[..., :, :dx] = ignore_index
    return image, shifted


def sample_augment(rng: np.random.Generator) -> tuple[bool, int, int]:
    flip = bool(rng.random() < 0.5)
    dy, dx = (int(v) for v in rng.integers(0, 3, size=2))
    return flip, dy, dx


def augment(image, label, seed, ignore_index=255):
    """Random horizontal flip plus a 0-2 pixel translation on both axes."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip, dy, dx = sample_augment(rng)
    if image.shape[-2:] != label.shape[-2:]:
        raise ValueError("image and label sizes differ")
    if flip:
        image, label = flip_pair(image, label)
    return shift_pair(image, label, dy, dx, ignore_index)


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def evaluate_levels(model, dataset, levels=None, num_classes=None, ignore_index=255, batch_size=8):
    """mIoU of every requested level's target, upsampled to the label size.

    Returns ``{level: IoUResult}``; level ``"final"`` is the top level.
    """
    num_classes = num_classes or model.num_classes
    levels = list(levels or range(1, model.num_levels + 1))
    index = {lvl: model.num_levels if lvl == "final" else int(lvl) for lvl in levels}
    if any(not 1 <= i <= model.num_levels for i in index.values()):
        raise ValueError(f"levels {levels} outside the model's 1..{model.num_levels}")
    if len(dataset) == 0:
        raise ValueError("no samples to evaluate")
    cms = {lvl: ConfusionMatrix(num_classes, ignore_index) for lvl in levels}
    needed = max(index.values())
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    try:
        for start in range(0, len(dataset), batch_size):
            items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            images = torch.stack([im for im, _ in items]).to(device)
            labels = torch.stack([lab for _, lab in items])
            targets = model(images, max_level=needed).targets()
            for lvl in levels:
                pred = final_prediction(targets[index[lvl] - 1], labels.shape[-2:]).cpu()
                cms[lvl].update(pred, labels)
    finally:
        model.train(was_training)
    return {lvl: mean_iou(cm) for lvl, cm in cms.items()}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list[dict]
    final_miou: dict

    def iteration_losses(self):
        return [r["loss"] for r in self.history if r["kind"] == "iter"]


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _set_trainable(model, level, freeze):
    for p in model.parameters():
        p.requires_grad_(True)
    if not freeze:
        return
    for lower in range(1, level):
        for p in model.level_parameters(lower):
            p.requires_grad_(False)


def train(
    model,
    train_set,
    cfg: TrainConfig,
    val_set=None,
    weights=None,
    ignore_index=255,
    log_path=None,
    on_record: Callable[[dict], None] | None = None,
    on_stage_end: Callable[[int, nn.Module], None] | None = None,
) -> TrainResult:
    """Adam with poly decay, staged top-down over the pyramid levels.

    The poly schedule restarts at the start of every stage. Parameters of
    earlier levels stay trainable unless ``cfg.freeze_previous`` is set.
    After every epoch the validation split (if given) is scored at each level
    trained so far.
    """
    if cfg.top_level > model.num_levels:
        raise ValueError(f"stage plan reaches level {cfg.top_level}, model has {model.num_levels}")
    if len(train_set) == 0:
        raise ValueError("no training samples")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    device = next(model.parameters()).device
    if weights is None:
        freqs = pixel_frequencies((train_set[i][1] for i in range(len(train_set))),
                                  model.num_classes, ignore_index)
        weights = class_weights(freqs, cfg.class_weight_k)
    weights = torch.as_tensor(weights, dtype=torch.float32, device=device)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    log_file = open(log_path, "w") if log_path else None

    def emit(record):
        history.append(record)
        if log_file:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        if on_record:
            on_record(record)

    iteration = 0
    final = {}
    try:
        n = len(train_set)
        iters_per_epoch = math.ceil(n / cfg.batch_size)
        for stage, epochs in cfg.stages():
            _set_trainable(model, stage, cfg.freeze_previous and cfg.loss_mode == LEVEL_WISE)
            max_iter = cfg.max_iter or epochs * iters_per_epoch
            stage_iter = 0
            model.train()
            for epoch in range(epochs):
                order = rng.permutation(n)
                for idx in _batches(order, cfg.batch_size):
                    if stage_iter >= max_iter:
                        break
                    lr = poly_lr(stage_iter, cfg, max_iter)
                    for group in optimizer.param_groups:
                        group["lr"] = lr
                    images, labels = [], []
                    for i in idx:
                        image, label = train_set[int(i)]
                        if cfg.augment:
                            image, label = augment(image, label, rng, ignore_index)
                        images.append(image)
                        labels.append(label)
                    images = torch.stack(images).to(device)
                    labels = torch.stack(labels).to(device)
                    spec = model.pyramid_spec(tuple(labels.shape[-2:]), stage)
                    out = model(images, max_level=stage)
                    losses = level_losses(
                        out.main, out.residuals, build_label_pyramid(labels, spec), weights, ignore_index
                    )
                    loss = stage_loss(losses, stage, cfg.loss_mode)
                    values = [float(v.detach()) for v in losses]
                    if not math.isfinite(float(loss.detach())):
                        raise DivergenceError(stage, iteration, values)
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    emit({"kind": "iter", "iteration": iteration, "stage": stage, "epoch": epoch,
                          "lr": lr, "loss": float(loss.detach()), "level_losses": values})
                    iteration += 1
                    stage_iter += 1
                if val_set is not None and len(val_set):
                    res = evaluate_levels(model, val_set, range(1, stage + 1), model.num_classes,
                                          ignore_index, cfg.eval_batch_size)
                    final = {lvl: r.mean for lvl, r in res.items()}
                    emit({"kind": "epoch", "iteration": iteration, "stage": stage, "epoch": epoch,
                          "miou": {str(k): v for k, v in final.items()}})
                    log.info("stage %d epoch %d mIoU %s", stage, epoch, final)
            if on_stage_end:
                on_stage_end(stage, model)
    finally:
        if log_file:
            log_file.close()
        for p in model.parameters():
            p.requires_grad_(True)
    return TrainResult(history, final)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["stage_plan"] = [list(s) for s in cfg.stage_plan]
    return d


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
