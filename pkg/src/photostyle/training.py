"""Fine-tuning loop with grouped learning rates and reproducible sampling.

All per-example randomness (crop offsets, flips) comes from hash-derived
generators keyed by (seed, record id, epoch), and the epoch shuffle from
(seed, "shuffle", epoch): nothing depends on iteration order or on how many
draws another record consumed. The only stateful generator is torch's global
one (dropout), which is seeded at the start of fit and snapshotted into every
checkpoint, so an interrupted run resumed from its last checkpoint replays
bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from photostyle.evaluation import mean_average_precision, per_class_ap
from photostyle.manifest import DatasetManifest, class_histogram, split_records, with_val_split
from photostyle.model import (
    StyleModel,
    cross_entropy,
    load_checkpoint,
    parameter_groups,
    save_checkpoint,
)
from photostyle.pipeline import batch_inputs, column_inputs, load_record_image, load_record_saliency
from photostyle.taxonomy import StyleTaxonomy
from photostyle.transforms import PatchSpec, center_patch, derive_rng, resize_short_side, warp_resize

logger = logging.getLogger(__name__)

CROP_MODES = ("random", "center", "warp")
SALIENCY_INPUT_MODES = ("aligned", "whole")

LOG_FIELDS = ("epoch", "step", "loss", "lr", "val_map", "wall_time")


class TrainingError(RuntimeError):
    """Unrecoverable condition inside the training loop."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 1e-3
    head_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    global_seed: int = 0
    class_weighting: bool = False
    freeze_backbone: bool = False
    patience: int | None = None
    resize_short: int = 256
    crop: str = "random"
    crop_size: int = 224
    hflip: bool = True
    saliency_input: str = "aligned"
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.crop not in CROP_MODES:
            raise ValueError(f"crop must be one of {CROP_MODES}, got '{self.crop}'")
        if self.saliency_input not in SALIENCY_INPUT_MODES:
            raise ValueError(
                f"saliency_input must be one of {SALIENCY_INPUT_MODES}, got '{self.saliency_input}'"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights N/(K*count), rescaled so the mean over
    classes that actually occur is 1. Absent classes get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("cannot derive class weights from an all-zero histogram")
    present = counts > 0
    if not present.all():
        logger.warning(
            "%d of %d classes have no training examples; their weight is 0",
            int((~present).sum()),
            counts.size,
        )
    weights = np.zeros_like(counts)
    weights[present] = total / (counts.size * counts[present])
    weights[present] /= weights[present].mean()
    return weights


def make_optimizer(model: StyleModel, config: TrainConfig) -> torch.optim.SGD:
    """SGD over two groups: pretrained backbone at base_lr, fresh layers at
    head_lr. freeze_backbone drops the backbone group entirely."""
    groups = parameter_groups(model)
    param_groups = []
    if groups["backbone"]:
        if config.freeze_backbone:
            for param in groups["backbone"]:
                param.requires_grad_(False)
        else:
            param_groups.append(
                {"params": groups["backbone"], "lr": config.base_lr, "name": "backbone"}
            )
    param_groups.append({"params": groups["new_layers"], "lr": config.head_lr, "name": "new_layers"})
    optimizer = torch.optim.SGD(
        param_groups, momentum=config.momentum, weight_decay=config.weight_decay
    )
    for group in optimizer.param_groups:
        group.setdefault("initial_lr", group["lr"])
    return optimizer


def apply_lr_schedule(optimizer: torch.optim.Optimizer, config: TrainConfig, epoch: int) -> float:
    """Step decay: multiply initial rates by decay_factor^(epoch // decay_every).
    Returns the scheduled rate of the fresh-layer group."""
    factor = config.lr_decay_factor ** (epoch // config.lr_decay_every)
    current = None
    for group in optimizer.param_groups:
        group["lr"] = group["initial_lr"] * factor
        if group.get("name") == "new_layers":
            current = group["lr"]
    return current if current is not None else optimizer.param_groups[-1]["lr"]


class ExampleLoader:
    """Loads and caches per-record images and saliency maps, and assembles
    column inputs for a given patch policy."""

    def __init__(
        self,
        config: TrainConfig,
        columns: tuple[str, ...],
        image_root: str | Path,
        saliency_root: str | Path | None = None,
        cache_items: int = 4096,
    ):
        self.config = config
        self.columns = tuple(columns)
        self.image_root = image_root
        self.saliency_root = saliency_root
        self.needs_saliency = "saliency" in self.columns
        self.whole_map = config.saliency_input == "whole"
        self._cache_items = cache_items
        self._images: dict[str, np.ndarray] = {}
        self._maps: dict[str, np.ndarray] = {}

    def _cached(self, cache: dict, key: str, make):
        if key not in cache:
            if len(cache) >= self._cache_items:
                cache.pop(next(iter(cache)))
            cache[key] = make()
        return cache[key]

    def image(self, record) -> np.ndarray:
        def make():
            img = load_record_image(record, self.image_root)
            if self.config.crop == "warp":
                return warp_resize(img, self.config.crop_size, self.config.crop_size)
            img = resize_short_side(img, max(self.config.resize_short, self.config.crop_size))
            return img

        return self._cached(self._images, record.id, make)

    def saliency(self, record) -> np.ndarray | None:
        if not self.needs_saliency:
            return None

        def make():
            image = None if self.saliency_root is not None else self.image(record)
            return load_record_saliency(record, self.saliency_root, image=image)

        return self._cached(self._maps, record.id, make)

    def train_spec(self, record, epoch: int) -> PatchSpec:
        img = self.image(record)
        height, width = img.shape[:2]
        size = self.config.crop_size
        rng = derive_rng(self.config.global_seed, record.id, epoch)
        flip = bool(self.config.hflip and rng.random() < 0.5)
        if self.config.crop == "random":
            top = int(rng.integers(0, height - size + 1))
            left = int(rng.integers(0, width - size + 1))
            return PatchSpec(top=top, left=left, size=size, flip=flip)
        if self.config.crop == "center":
            base = center_patch(height, width, size)
            return PatchSpec(base.top, base.left, base.size, flip)
        return PatchSpec(top=0, left=0, size=size, flip=flip)

    def eval_spec(self, record) -> PatchSpec:
        img = self.image(record)
        height, width = img.shape[:2]
        if self.config.crop == "warp":
            return PatchSpec(top=0, left=0, size=self.config.crop_size, flip=False)
        return center_patch(height, width, self.config.crop_size)

    def inputs(self, record, spec: PatchSpec) -> dict[str, torch.Tensor]:
        return column_inputs(
            self.image(record),
            self.saliency(record),
            spec,
            self.columns,
            whole_map=self.whole_map,
            out_size=self.config.crop_size,
        )


def train_epoch(
    model: StyleModel,
    optimizer: torch.optim.Optimizer,
    loader: ExampleLoader,
    records,
    taxonomy: StyleTaxonomy,
    config: TrainConfig,
    epoch: int,
    weights: torch.Tensor | None = None,
    step_offset: int = 0,
) -> dict:
    """One pass over the training records in a seeded shuffled order.
    Returns mean loss, accuracy, and the number of optimizer steps taken."""
    if not records:
        raise TrainingError("no training records")
    model.train()
    shuffle_rng = derive_rng(config.global_seed, "shuffle", epoch)
    order = shuffle_rng.permutation(len(records))
    total_loss = 0.0
    correct = 0
    steps = 0
    for start in range(0, len(order), config.batch_size):
        batch_idx = order[start : start + config.batch_size]
        batch = [records[i] for i in batch_idx]
        items = [loader.inputs(rec, loader.train_spec(rec, epoch)) for rec in batch]
        inputs = batch_inputs(items)
        labels = torch.tensor([taxonomy.index_of(rec.labels[0]) for rec in batch])
        optimizer.zero_grad()
        logits = model(inputs)
        loss = cross_entropy(logits, labels, class_weights=weights)
        if not math.isfinite(loss.item()):
            ids = ", ".join(rec.id for rec in batch)
            raise TrainingError(
                f"non-finite loss {loss.item()} at epoch {epoch}, "
                f"step {step_offset + steps} (records: {ids})"
            )
        loss.backward()
        optimizer.step()
        steps += 1
        total_loss += loss.item() * len(batch)
        correct += int((logits.argmax(dim=1) == labels).sum())
    count = len(order)
    return {"loss": total_loss / count, "accuracy": correct / count, "steps": steps}


def predict_single(model: StyleModel, loader: ExampleLoader, records, batch_size: int = 32) -> np.ndarray:
    """Deterministic one-patch probabilities (center crop, or the whole image
    in warp mode) for every record; used for the per-epoch validation score."""
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            items = [loader.inputs(rec, loader.eval_spec(rec)) for rec in batch]
            probs = model.predict_proba(batch_inputs(items))
            rows.append(probs.numpy())
    return np.concatenate(rows, axis=0)


def validation_map(model: StyleModel, loader: ExampleLoader, records, taxonomy: StyleTaxonomy) -> float | None:
    if not records:
        return None
    probs = predict_single(model, loader, records)
    truths = [tuple(taxonomy.index_of(label) for label in rec.labels) for rec in records]
    return mean_average_precision(per_class_ap(probs, truths, len(taxonomy)))


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_val_map: float | None = None
    best_path: Path | None = None
    last_path: Path | None = None
    epochs_run: int = 0


def fit(
    model: StyleModel,
    manifest: DatasetManifest,
    config: TrainConfig,
    image_root: str | Path,
    saliency_root: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: bool = False,
) -> FitResult:
    """Train until the epoch budget or the early-stopping patience runs out.

    Writes `last.pt` (full state, resumable) and `best.pt` (highest validation
    score) after every epoch when checkpoint_dir is given, plus one JSON log
    line per epoch when log_path is given. With resume=True, training picks up
    from last.pt and continues exactly as if it had never stopped.
    """
    taxonomy = manifest.taxonomy
    manifest = with_val_split(manifest, config.val_fraction)
    train_records = split_records(manifest, "train")
    val_records = split_records(manifest, "val")
    if not train_records:
        raise TrainingError("manifest has no train records")

    loader = ExampleLoader(config, model.config.columns, image_root, saliency_root)
    weights = None
    if config.class_weighting:
        histogram = class_histogram(manifest, "train")
        counts = [histogram[name] for name in taxonomy.classes]
        weights = torch.tensor(class_weights(counts), dtype=torch.float32)

    seed_everything(config.global_seed)
    optimizer = make_optimizer(model, config)

    start_epoch = 0
    global_step = 0
    best_map: float | None = None
    bad_epochs = 0
    result = FitResult()
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_path = checkpoint_dir / "last.pt" if checkpoint_dir else None
    best_path = checkpoint_dir / "best.pt" if checkpoint_dir else None

    if resume:
        if last_path is None or not last_path.exists():
            raise TrainingError(f"cannot resume: no checkpoint at {last_path}")
        loaded = load_checkpoint(last_path, taxonomy=taxonomy)
        state = loaded.train_state or {}
        model.load_state_dict(loaded.model.state_dict())
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"].to(torch.uint8))
        start_epoch = int(state["epoch"])
        global_step = loaded.step
        best_map = state.get("best_map")
        bad_epochs = int(state.get("bad_epochs", 0))
        result.history = list(state.get("history", []))
        logger.info("resumed from %s at epoch %d", last_path, start_epoch)

    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("a" if resume else "w", encoding="utf-8")

    started = time.monotonic()
    try:
        for epoch in range(start_epoch, config.epochs):
            lr_now = apply_lr_schedule(optimizer, config, epoch)
            stats = train_epoch(
                model, optimizer, loader, train_records, taxonomy, config, epoch,
                weights=weights, step_offset=global_step,
            )
            global_step += stats["steps"]
            val_map = validation_map(model, loader, val_records, taxonomy)
            entry = {
                "epoch": epoch,
                "step": global_step,
                "loss": stats["loss"],
                "lr": lr_now,
                "val_map": val_map,
                "wall_time": time.monotonic() - started,
            }
            result.history.append(entry)
            result.epochs_run = epoch + 1
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            logger.info(
                "epoch %d: loss %.4f, acc %.3f, val_map %s",
                epoch, stats["loss"], stats["accuracy"],
                "n/a" if val_map is None else f"{val_map:.4f}",
            )

            improved = val_map is not None and (best_map is None or val_map > best_map)
            if improved:
                best_map = val_map
                bad_epochs = 0
            elif val_map is not None:
                bad_epochs += 1

            if checkpoint_dir is not None:
                train_state = {
                    "epoch": epoch + 1,
                    "optimizer": optimizer.state_dict(),
                    "torch_rng": torch.get_rng_state(),
                    "best_map": best_map,
                    "bad_epochs": bad_epochs,
                    "history": result.history,
                }
                save_checkpoint(last_path, model, taxonomy, step=global_step, train_state=train_state)
                if improved or val_map is None:
                    save_checkpoint(best_path, model, taxonomy, step=global_step)

            if config.patience is not None and bad_epochs >= config.patience:
                logger.info("early stop after %d stale epochs", bad_epochs)
                break
    finally:
        if log_file is not None:
            log_file.close()

    result.best_val_map = best_map
    result.last_path = last_path
    result.best_path = best_path if (best_path and best_path.exists()) else last_path
    return result
