"""Multitask training: Huber quality loss + cross-entropy scene loss, Adam with
per-module learning rates, stepped LR decay, and early stopping on the median
validation SRCC across scenes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import SceneRegistry
from .data import AnnotatedImage, PatchConfig, SplitSpec, sample_patches
from .metrics import MetricUndefinedError, compute_scene_metrics, median_across_scenes
from .model import (
    ModelConfig, NumericError, SceneQualityModel, build_model, patch_to_tensor,
    save_checkpoint, load_checkpoint,
)

FACE_ATTRIBUTES = ("Exposure", "Details")

METRICS_LOG_HEADER = ["epoch", "train_loss", "huber", "ce", "val_median_srcc",
                      "lr_backbone", "lr_heads"]


@dataclass
class TrainConfig:
    max_epochs: int = 300
    lr_backbone: float = 1e-5
    lr_heads: float = 1e-4
    lr_rescale: float = 0.0   # 0: follow lr_heads; the per-scene (a, b) table
    decay_every: int = 10
    decay_factor: float = 0.05
    decay_mode: str = "complement"   # multiply by (1 - factor); "literal": by factor
    patience: int = 40
    huber_delta: float = 1.0
    loss_weight_quality: float = 1.0
    loss_weight_class: float = 0.5
    batch_size: int = 8
    seed: int = 0
    attribute: str = "Overall"
    val_fraction: float = 0.15
    teacher_force_class: bool = False  # feed ground-truth one-hot to the rescaler

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_heads <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_rescale == 0.0:
            self.lr_rescale = self.lr_heads
        if self.lr_rescale < 0:
            raise ValueError("learning rates must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.loss_weight_quality < 0 or self.loss_weight_class < 0:
            raise ValueError("loss weights must be non-negative")
        if self.decay_mode not in ("complement", "literal"):
            raise ValueError(f"unknown decay_mode {self.decay_mode}")


@dataclass
class TrainState:
    epoch: int = 0
    best_val_srcc: float = -math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0
    history: list = field(default_factory=list)  # (epoch, train_loss, val_srcc)


def huber_loss(pred, target, delta: float = 1.0):
    """Quadratic within +/-delta of the target, linear beyond."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if torch.is_tensor(pred) or torch.is_tensor(target):
        r = torch.as_tensor(pred) - torch.as_tensor(target)
        absr = r.abs()
        return torch.where(absr <= delta, 0.5 * r * r, delta * (absr - 0.5 * delta))
    r = pred - target
    if abs(r) <= delta:
        return 0.5 * r * r
    return delta * (abs(r) - 0.5 * delta)


def multitask_loss(quality_pred, quality_target, class_logits, class_target: int,
                   config: TrainConfig):
    """Weighted sum of quality and classification losses.

    Returns (total, huber_component, ce_component) as 0-d tensors.
    """
    logits = torch.as_tensor(class_logits)
    if not 0 <= class_target < logits.shape[-1]:
        raise IndexError(f"class target {class_target} out of range")
    h = huber_loss(torch.as_tensor(quality_pred, dtype=logits.dtype),
                   torch.as_tensor(quality_target, dtype=logits.dtype),
                   config.huber_delta)
    ce = F.cross_entropy(
        logits.reshape(1, -1), torch.tensor([class_target], device=logits.device)
    )
    total = config.loss_weight_quality * h + config.loss_weight_class * ce
    return total, h, ce


def lr_at_epoch(base_lr: float, epoch: int, config: TrainConfig) -> float:
    """Stepped decay: one multiplicative step every decay_every epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    steps = epoch // config.decay_every
    factor = config.decay_factor if config.decay_mode == "literal" else 1.0 - config.decay_factor
    return base_lr * factor ** steps


def early_stop_update(state: TrainState, val_srcc: float, patience: int):
    """Update best-so-far bookkeeping; returns (state, stop)."""
    if not math.isfinite(val_srcc):
        raise ValueError("val_srcc must be finite")
    if val_srcc > state.best_val_srcc:
        state.best_val_srcc = val_srcc
        state.best_epoch = state.epoch
        state.epochs_since_best = 0
    else:
        state.epochs_since_best += 1
    return state, state.epochs_since_best >= patience


def roi_for(record: AnnotatedImage, attribute: str):
    """Face-confined attributes crop inside the face region when one is present."""
    if attribute in FACE_ATTRIBUTES and record.face_region is not None:
        return record.face_region
    return None


def split_validation(records: Sequence[AnnotatedImage], fraction: float, seed: int):
    """Scene-stratified holdout of training images for early stopping."""
    rng = np.random.default_rng(seed)
    by_scene: dict[str, list[AnnotatedImage]] = {}
    for r in records:
        by_scene.setdefault(r.scene_id, []).append(r)
    train, val = [], []
    for scene in sorted(by_scene):
        recs = sorted(by_scene[scene], key=lambda r: r.image_path)
        n_val = max(1, int(round(fraction * len(recs)))) if len(recs) >= 4 else 0
        picks = set(rng.choice(len(recs), size=n_val, replace=False)) if n_val else set()
        for i, r in enumerate(recs):
            (val if i in picks else train).append(r)
    return train, val


def _load_image(root: Path, rec: AnnotatedImage) -> np.ndarray:
    p = Path(rec.image_path)
    if not p.is_absolute():
        p = root / p
    return np.asarray(Image.open(p).convert("RGB"))


def predict_images(
    model: SceneQualityModel,
    records: Sequence[AnnotatedImage],
    root: Path,
    attribute: str,
    patch_seed: int,
    image_cache: Optional[dict] = None,
):
    """Deterministic eval-mode predictions for a set of images.

    Returns a list of (record, pre_quality, final_score, prob_vector) in
    sorted image-path order.
    """
    model.eval()
    cfg = model.config
    patch_config = PatchConfig(cfg.input_size, cfg.patches_per_image, seed=patch_seed)
    out = []
    for rec in sorted(records, key=lambda r: r.image_path):
        img = image_cache[rec.image_path] if image_cache else _load_image(root, rec)
        patches = sample_patches(img, patch_config, roi=roi_for(rec, attribute),
                                 image_key=rec.image_path)
        batch = torch.stack([patch_to_tensor(p) for p in patches]).unsqueeze(0)
        with torch.no_grad():
            scores, logits, pre_q = model(batch)
            probs = F.softmax(logits, dim=1)
            final = model.aggregate(pre_q, probs)
        out.append((rec, float(pre_q[0]), float(final[0]), probs[0].numpy()))
    return out


def validation_median_srcc(predictions, attribute: str) -> float:
    """Median across scenes of per-scene SRCC; scenes with <2 usable images skipped."""
    by_scene: dict[str, list] = {}
    for rec, _pre, final, _probs in predictions:
        if attribute in rec.attribute_scores:
            by_scene.setdefault(rec.scene_id, []).append(
                (final, rec.attribute_scores[attribute])
            )
    srccs = []
    for scene, pairs in sorted(by_scene.items()):
        if len(pairs) < 2:
            continue
        preds = [p for p, _ in pairs]
        targets = [t for _, t in pairs]
        try:
            srcc, _, _, _ = compute_scene_metrics(preds, targets)
        except MetricUndefinedError:
            continue
        srccs.append(srcc)
    if not srccs:
        raise MetricUndefinedError("no scene had enough validation images")
    return median_across_scenes(srccs)


def run_training(
    records: Sequence[AnnotatedImage],
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir,
    data_root,
    resume_from=None,
):
    """Train on the split's training scenes; returns (checkpoint path, TrainState).

    Per epoch: shuffled images, random patches, multitask loss against the
    ground-truth scene and quality score, Adam step with per-module learning
    rates, then median validation SRCC and the early-stopping update. The best
    checkpoint is persisted along with a per-epoch metrics CSV.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_root = Path(data_root)
    attribute = train_config.attribute

    train_scene_order = []
    for r in records:
        if r.scene_id in split.train_scenes and r.scene_id not in train_scene_order:
            train_scene_order.append(r.scene_id)
    if not train_scene_order:
        raise ValueError("split has no training scenes present in the manifest")
    registry = SceneRegistry(tuple(train_scene_order))
    if model_config.num_scenes != registry.count:
        raise ValueError(
            f"model num_scenes={model_config.num_scenes} but split defines "
            f"{registry.count} training scenes"
        )

    usable = [r for r in records if r.scene_id in split.train_scenes
              and attribute in r.attribute_scores]
    if not usable:
        raise ValueError(f"no training images carry attribute {attribute!r}")
    train_recs, val_recs = split_validation(
        usable, train_config.val_fraction, train_config.seed
    )
    if not val_recs:
        raise ValueError("validation holdout is empty; need more images per scene")

    start_epoch = 0
    if resume_from is not None:
        model, ckpt_registry, start_epoch, _ = load_checkpoint(resume_from)
        if ckpt_registry.scene_ids != registry.scene_ids:
            raise ValueError("checkpoint registry does not match the split")
        start_epoch += 1
    else:
        model = build_model(model_config, seed=train_config.seed)
    model.train()

    cache = {r.image_path: _load_image(data_root, r) for r in usable}

    optimizer = torch.optim.Adam([
        {"params": list(model.backbone.parameters()), "lr": train_config.lr_backbone},
        {"params": list(model.classifier.parameters())
         + list(model.quality_head.parameters()), "lr": train_config.lr_heads},
        {"params": [model.scale_a, model.scale_b], "lr": train_config.lr_rescale},
    ], betas=(0.9, 0.999), eps=1e-8)

    state = TrainState()
    ckpt_path = out_dir / "checkpoint.pt"
    log_path = out_dir / "metrics.csv"
    log_rows = [METRICS_LOG_HEADER]

    scene_index = {s: i for i, s in enumerate(registry.scene_ids)}
    torch.manual_seed(train_config.seed)

    for epoch in range(start_epoch, train_config.max_epochs):
        state.epoch = epoch
        lr_b = lr_at_epoch(train_config.lr_backbone, epoch, train_config)
        lr_h = lr_at_epoch(train_config.lr_heads, epoch, train_config)
        optimizer.param_groups[0]["lr"] = lr_b
        optimizer.param_groups[1]["lr"] = lr_h
        optimizer.param_groups[2]["lr"] = lr_at_epoch(
            train_config.lr_rescale, epoch, train_config)

        epoch_rng = np.random.default_rng((train_config.seed, epoch))
        order = epoch_rng.permutation(len(train_recs))
        patch_config = PatchConfig(
            model_config.input_size, model_config.patches_per_image,
            seed=int(epoch_rng.integers(0, 2**31)),
        )

        model.train()
        sums = {"total": 0.0, "huber": 0.0, "ce": 0.0}
        n_images = 0
        for lo in range(0, len(order), train_config.batch_size):
            batch_recs = [train_recs[i] for i in order[lo:lo + train_config.batch_size]]
            tensors, targets, classes = [], [], []
            for rec in batch_recs:
                patches = sample_patches(
                    cache[rec.image_path], patch_config,
                    roi=roi_for(rec, attribute), image_key=rec.image_path,
                )
                tensors.append(torch.stack([patch_to_tensor(p) for p in patches]))
                targets.append(rec.attribute_scores[attribute])
                classes.append(scene_index[rec.scene_id])
            batch = torch.stack(tensors)
            target_t = torch.tensor(targets, dtype=torch.float32)
            class_t = torch.tensor(classes)

            _scores, logits, pre_q = model(batch)
            if train_config.teacher_force_class:
                weights = F.one_hot(class_t, model_config.num_scenes).float()
            else:
                weights = F.softmax(logits, dim=1)
            final = model.aggregate(pre_q, weights)

            h = huber_loss(final, target_t, train_config.huber_delta).mean()
            ce = F.cross_entropy(logits, class_t)
            loss = (train_config.loss_weight_quality * h
                    + train_config.loss_weight_class * ce)
            if not torch.isfinite(loss):
                _dump_state(out_dir, state, epoch, float(h), float(ce))
                raise NumericError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["total"] += loss.item() * len(batch_recs)
            sums["huber"] += h.item() * len(batch_recs)
            sums["ce"] += ce.item() * len(batch_recs)
            n_images += len(batch_recs)

        preds = predict_images(model, val_recs, data_root, attribute,
                               patch_seed=train_config.seed, image_cache=cache)
        val_srcc = validation_median_srcc(preds, attribute)
        state.history.append((epoch, sums["total"] / n_images, val_srcc))
        log_rows.append([
            epoch, f"{sums['total'] / n_images:.6f}", f"{sums['huber'] / n_images:.6f}",
            f"{sums['ce'] / n_images:.6f}", f"{val_srcc:.6f}",
            f"{lr_b:.8e}", f"{lr_h:.8e}",
        ])

        # ties refresh the checkpoint: with equal SRCC the later epoch has the
        # lower training loss, so its affine table is the better one to keep
        keep = val_srcc >= state.best_val_srcc
        state, stop = early_stop_update(state, val_srcc, train_config.patience)
        if keep:
            save_checkpoint(ckpt_path, model, registry, epoch=epoch,
                            extra={"val_median_srcc": val_srcc})
        if stop:
            break

    save_checkpoint(out_dir / "last.pt", model, registry, epoch=state.epoch,
                    extra={"val_median_srcc": state.history[-1][2]})
    with log_path.open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(log_rows)
    return ckpt_path, state


def _dump_state(out_dir: Path, state: TrainState, epoch: int, h: float, ce: float):
    (out_dir / "abort_state.json").write_text(json.dumps({
        "epoch": epoch, "huber": h, "ce": ce,
        "best_val_srcc": state.best_val_srcc, "history": state.history,
    }, indent=2))
