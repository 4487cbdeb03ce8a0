"""Test-protocol prediction and ranking metrics.

A test image is scored as the arithmetic mean of softmax outputs over 50
patches (a 5x5 offset grid, with and without mirroring). Two per-class
summaries are computed and reported side by side, since "precision" is
ambiguous for multi-label test sets: ranked-retrieval average precision
(headline MAP) and argmax top-1 precision (PCP). The confusion matrix needs a
single truth per record and reduces multi-label truth sets to the first
listed label - a documented simplification.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from photostyle.manifest import DatasetManifest, ImageRecord, split_records
from photostyle.model import StyleModel
from photostyle.pipeline import batch_inputs, column_inputs, load_record_image, load_record_saliency
from photostyle.taxonomy import StyleTaxonomy
from photostyle.transforms import (
    PatchSpec,
    center_patch,
    derive_rng,
    grid_patches,
    random_patches,
    resize_short_side,
    warp_resize,
)

PATCH_POLICIES = ("grid", "random", "center", "warp")

PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class PredictionRecord:
    """One test record's aggregated class probabilities and true labels."""

    id: str
    probabilities: tuple[float, ...]
    truths: tuple[int, ...]

    def __post_init__(self) -> None:
        total = sum(self.probabilities)
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(
                f"record '{self.id}': probabilities sum to {total!r}, expected 1 ± {PROB_SUM_TOL}"
            )
        if not self.truths:
            raise ValueError(f"record '{self.id}': empty truth set")
        for t in self.truths:
            if not 0 <= t < len(self.probabilities):
                raise ValueError(
                    f"record '{self.id}': truth index {t} out of range for "
                    f"{len(self.probabilities)} classes"
                )

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "probabilities": list(self.probabilities), "truths": list(self.truths)}
        )


@dataclass
class EvalConfig:
    patch_policy: str = "grid"
    patch_size: int = 224
    patch_count: int = 50
    resize_short: int = 256
    global_seed: int = 0
    saliency_input: str = "aligned"
    batch_size: int = 50
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.patch_policy not in PATCH_POLICIES:
            raise ValueError(
                f"patch_policy must be one of {PATCH_POLICIES}, got '{self.patch_policy}'"
            )
        if self.saliency_input not in ("aligned", "whole"):
            raise ValueError(f"saliency_input must be 'aligned' or 'whole', got '{self.saliency_input}'")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")


def patch_plan(
    height: int, width: int, policy: str, size: int, count: int, rng=None
) -> list[PatchSpec]:
    """The patch specs a policy extracts from an image of the given shape."""
    if policy == "grid":
        return grid_patches(height, width, size)
    if policy == "random":
        if rng is None:
            raise ValueError("random patch policy needs an rng")
        return random_patches(height, width, size, count, rng)
    if policy == "center":
        return [center_patch(height, width, size)]
    if policy == "warp":
        return [PatchSpec(top=0, left=0, size=size, flip=False)]
    raise ValueError(f"unknown patch policy '{policy}'")


def predict_image(
    model: StyleModel,
    image: np.ndarray,
    saliency_map: np.ndarray | None = None,
    patch_policy: str = "grid",
    *,
    patch_size: int = 224,
    patch_count: int = 50,
    resize_short: int = 256,
    rng=None,
    whole_map: bool = False,
    batch_size: int = 50,
) -> np.ndarray:
    """Mean softmax over the policy's patches. The image is resized so its
    short side covers at least one patch (warp policy squashes it outright)."""
    model.eval()
    if patch_policy == "warp":
        image = warp_resize(image, patch_size, patch_size)
    else:
        image = resize_short_side(image, max(resize_short, patch_size))
    height, width = image.shape[:2]
    specs = patch_plan(height, width, patch_policy, patch_size, patch_count, rng)
    columns = model.config.columns
    acc = None
    with torch.no_grad():
        for start in range(0, len(specs), batch_size):
            chunk = specs[start : start + batch_size]
            items = [
                column_inputs(image, saliency_map, spec, columns, whole_map=whole_map, out_size=patch_size)
                for spec in chunk
            ]
            probs = model.predict_proba(batch_inputs(items)).numpy()
            acc = probs.sum(axis=0) if acc is None else acc + probs.sum(axis=0)
    return acc / len(specs)


def average_precision(scores, positives) -> float:
    """Ranked-retrieval AP: mean over each positive's rank k of the precision
    among the top k. Ties keep their original input order."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.ndim != 1 or scores.shape != positives.shape:
        raise ValueError(f"scores {scores.shape} and positives {positives.shape} must be 1-D and equal")
    if scores.size == 0:
        raise ValueError("average precision of zero items is undefined")
    if not positives.any():
        raise ValueError("average precision needs at least one positive item")
    order = np.argsort(-scores, kind="stable")
    ranked = positives[order]
    hits = np.cumsum(ranked)
    ranks = np.nonzero(ranked)[0] + 1
    return float(np.mean(hits[ranks - 1] / ranks))


def per_class_ap(probabilities, truths, num_classes: int) -> list[float | None]:
    """AP per class, scoring every record by that class's probability column;
    a record is positive for each class in its truth set. Classes with no
    positives get None."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != num_classes:
        raise ValueError(f"expected (N, {num_classes}) probabilities, got {probs.shape}")
    truth_sets = [frozenset(t) for t in truths]
    if len(truth_sets) != probs.shape[0]:
        raise ValueError(f"{probs.shape[0]} probability rows but {len(truth_sets)} truth sets")
    out: list[float | None] = []
    for c in range(num_classes):
        positives = np.fromiter((c in t for t in truth_sets), dtype=bool, count=len(truth_sets))
        out.append(average_precision(probs[:, c], positives) if positives.any() else None)
    return out


def mean_average_precision(per_class: list[float | None]) -> float:
    """Unweighted mean over classes whose AP is defined."""
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise ValueError("no class has a defined average precision")
    return float(np.mean(defined))


def per_class_precision(predictions, truths, num_classes: int) -> list[float | None]:
    """Argmax top-1 precision per class: among records predicted as c, the
    fraction whose truth set contains c. None when c is never predicted."""
    predicted = np.zeros(num_classes, dtype=np.int64)
    correct = np.zeros(num_classes, dtype=np.int64)
    for pred, truth_set in zip(predictions, truths, strict=True):
        pred = int(pred)
        if not 0 <= pred < num_classes:
            raise ValueError(f"prediction {pred} out of range for {num_classes} classes")
        predicted[pred] += 1
        if pred in set(truth_set):
            correct[pred] += 1
    return [
        float(correct[c]) / float(predicted[c]) if predicted[c] else None
        for c in range(num_classes)
    ]


def confusion_matrix(predictions, truths, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized K×K matrix: entry (r, c) is the fraction of true-r
    records predicted as c. Takes a single truth per record. Returns
    (matrix, per-row support); zero-support rows stay all-zero."""
    preds = np.asarray(predictions, dtype=np.int64)
    trth = np.asarray(truths, dtype=np.int64)
    if preds.shape != trth.shape or preds.ndim != 1:
        raise ValueError("predictions and truths must be 1-D and the same length")
    for name, arr in (("prediction", preds), ("truth", trth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} index out of range for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.float64)
    np.add.at(counts, (trth, preds), 1.0)
    support = counts.sum(axis=1)
    matrix = np.zeros_like(counts)
    rows = support > 0
    matrix[rows] = counts[rows] / support[rows, None]
    return matrix, support.astype(np.int64)


@dataclass
class EvalReport:
    """Per-class and aggregate metrics plus the configuration that produced
    them. `ap`/`pcp` entries are None where undefined (no positives / never
    predicted); `support` counts first-label truths per class, so zero-support
    confusion rows are identifiable."""

    class_names: tuple[str, ...]
    ap: list[float | None]
    map: float | None
    pcp: list[float | None]
    mean_pcp: float | None
    confusion: list[list[float]]
    support: list[int]
    sample_count: int
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        k = len(self.class_names)
        for name, seq in (("ap", self.ap), ("pcp", self.pcp), ("support", self.support)):
            if len(seq) != k:
                raise ValueError(f"{name} has {len(seq)} entries for {k} classes")
        if len(self.confusion) != k or any(len(row) != k for row in self.confusion):
            raise ValueError(f"confusion matrix must be {k}x{k}")

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "ap": list(self.ap),
            "map": self.map,
            "pcp": list(self.pcp),
            "mean_pcp": self.mean_pcp,
            "confusion": [list(row) for row in self.confusion],
            "support": [int(s) for s in self.support],
            "sample_count": self.sample_count,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        return cls(
            class_names=tuple(payload["class_names"]),
            ap=list(payload["ap"]),
            map=payload["map"],
            pcp=list(payload["pcp"]),
            mean_pcp=payload["mean_pcp"],
            confusion=[list(row) for row in payload["confusion"]],
            support=[int(s) for s in payload["support"]],
            sample_count=int(payload["sample_count"]),
            config=dict(payload.get("config", {})),
        )


def report_from_predictions(
    predictions: list[PredictionRecord],
    class_names: tuple[str, ...],
    config: dict | None = None,
) -> EvalReport:
    """Recompute every metric from dumped predictions; no model needed."""
    if not predictions:
        raise ValueError("cannot build a report from zero predictions")
    k = len(class_names)
    probs = np.asarray([p.probabilities for p in predictions], dtype=np.float64)
    if probs.shape[1] != k:
        raise ValueError(f"predictions have {probs.shape[1]} classes, taxonomy has {k}")
    truths = [p.truths for p in predictions]
    aps = per_class_ap(probs, truths, k)
    argmax = probs.argmax(axis=1)
    pcp = per_class_precision(argmax, truths, k)
    defined_pcp = [v for v in pcp if v is not None]
    matrix, support = confusion_matrix(argmax, [t[0] for t in truths], k)
    return EvalReport(
        class_names=tuple(class_names),
        ap=aps,
        map=mean_average_precision(aps),
        pcp=pcp,
        mean_pcp=float(np.mean(defined_pcp)) if defined_pcp else None,
        confusion=[[float(v) for v in row] for row in matrix],
        support=[int(s) for s in support],
        sample_count=len(predictions),
        config=dict(config or {}),
    )


def predict_records(
    model: StyleModel,
    records: list[ImageRecord],
    taxonomy: StyleTaxonomy,
    config: EvalConfig,
    image_root: str | Path,
    saliency_root: str | Path | None = None,
) -> list[PredictionRecord]:
    """50-patch predictions for every record, reduced in id order. Record ids
    seed the random patch policy, so results never depend on worker count."""
    ordered = sorted(records, key=lambda r: r.id)
    needs_saliency = "saliency" in model.config.columns
    whole = config.saliency_input == "whole"
    model.eval()

    def one(record: ImageRecord) -> PredictionRecord:
        image = load_record_image(record, image_root)
        smap = None
        if needs_saliency:
            smap = load_record_saliency(record, saliency_root, image=image)
        rng = derive_rng(config.global_seed, record.id, "eval")
        probs = predict_image(
            model,
            image,
            smap,
            config.patch_policy,
            patch_size=config.patch_size,
            patch_count=config.patch_count,
            resize_short=config.resize_short,
            rng=rng,
            whole_map=whole,
            batch_size=config.batch_size,
        )
        truths = tuple(taxonomy.index_of(label) for label in record.labels)
        return PredictionRecord(record.id, tuple(float(p) for p in probs), truths)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            return list(pool.map(one, ordered))
    return [one(record) for record in ordered]


def evaluate(
    model: StyleModel,
    manifest: DatasetManifest,
    config: EvalConfig,
    image_root: str | Path,
    saliency_root: str | Path | None = None,
    split: str = "test",
    config_echo: dict | None = None,
) -> tuple[EvalReport, list[PredictionRecord]]:
    records = split_records(manifest, split)
    if not records:
        raise ValueError(f"manifest has no '{split}' records to evaluate")
    predictions = predict_records(
        model, records, manifest.taxonomy, config, image_root, saliency_root
    )
    report = report_from_predictions(predictions, manifest.taxonomy.classes, config_echo)
    return report, predictions


def save_predictions(path: str | Path, predictions: list[PredictionRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for pred in predictions:
            fh.write(pred.to_json() + "\n")


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                out.append(
                    PredictionRecord(
                        id=payload["id"],
                        probabilities=tuple(float(p) for p in payload["probabilities"]),
                        truths=tuple(int(t) for t in payload["truths"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad prediction record: {exc}") from exc
    return out
