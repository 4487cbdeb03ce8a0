from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from photostyle.manifest import DatasetManifest, ImageRecord, save_manifest
from photostyle.saliency import save_saliency, spectral_residual
from photostyle.taxonomy import StyleTaxonomy
from photostyle.transforms import save_image


@pytest.fixture()
def tiny_taxonomy() -> StyleTaxonomy:
    return StyleTaxonomy("tiny3", ("alpha", "beta", "gamma"))


def blob_image(
    height: int,
    width: int,
    top: int,
    left: int,
    size: int = 12,
    color=(1.0, 1.0, 1.0),
    base: float = 0.0,
) -> np.ndarray:
    """Uniform background with one solid rectangle; the workhorse synthetic image."""
    img = np.full((height, width, 3), base, dtype=np.float32)
    img[top : top + size, left : left + size] = np.asarray(color, dtype=np.float32)
    return img


# Per-class look for synthetic datasets: a blob color (appearance cue for RGB
# columns) and a home position (geometry cue for the saliency column).
CLASS_STYLES = (
    {"color": (1.0, 0.2, 0.2), "pos": (4, 4)},
    {"color": (0.2, 1.0, 0.2), "pos": (24, 40)},
    {"color": (0.2, 0.2, 1.0), "pos": (44, 78)},
)


def build_dataset(
    root: Path,
    taxonomy: StyleTaxonomy,
    train_per_class: int = 3,
    test_per_class: int = 1,
    height: int = 64,
    width: int = 96,
    with_saliency: bool = True,
    multi_label_test: bool = False,
) -> dict:
    """Write a complete on-disk fixture: images, saliency maps, manifest."""
    image_root = root / "images"
    image_root.mkdir(parents=True, exist_ok=True)
    saliency_root = None
    if with_saliency:
        saliency_root = root / "saliency"
        saliency_root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    records = []
    for ci, cname in enumerate(taxonomy.classes):
        style = CLASS_STYLES[ci % len(CLASS_STYLES)]
        for split, count in (("train", train_per_class), ("test", test_per_class)):
            for k in range(count):
                rid = f"{cname.lower()}-{split}-{k:02d}"
                jitter = rng.integers(0, 5, size=2)
                top = style["pos"][0] + int(jitter[0])
                left = style["pos"][1] + int(jitter[1])
                img = blob_image(height, width, top, left, color=style["color"], base=0.05)
                img = np.clip(
                    img + rng.normal(0.0, 0.01, img.shape).astype(np.float32), 0.0, 1.0
                )
                save_image(img, image_root / f"{rid}.png")
                if saliency_root is not None:
                    save_saliency(spectral_residual(img), saliency_root / f"{rid}.png")
                labels: tuple[str, ...] = (cname,)
                if multi_label_test and split == "test" and ci == 0:
                    labels = (cname, taxonomy.classes[1])
                records.append(ImageRecord(id=rid, source=f"{rid}.png", split=split, labels=labels))
    manifest = DatasetManifest(taxonomy, records)
    manifest_path = root / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    return {
        "manifest": manifest,
        "manifest_path": manifest_path,
        "image_root": image_root,
        "saliency_root": saliency_root,
        "taxonomy": taxonomy,
    }


@pytest.fixture()
def dataset(tmp_path, tiny_taxonomy) -> dict:
    return build_dataset(tmp_path, tiny_taxonomy)
