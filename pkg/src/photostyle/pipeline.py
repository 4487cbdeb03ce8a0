"""Bridging datasets and the network: per-record loading and column input
assembly. Every column sees the same patch geometry — the RGB patch crop, the
aligned saliency crop, and the flip flag all come from one PatchSpec, so the
columns stay spatially registered.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from photostyle.manifest import ImageRecord
from photostyle.saliency import SaliencyError, align_to_patch, find_saliency_path, load_saliency, spectral_residual
from photostyle.transforms import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    PatchSpec,
    apply_patch,
    hflip,
    load_image,
    normalize,
    warp_resize,
)
from photostyle.validate import resolve_image_path

MODEL_INPUT_SIZE = 224


def load_record_image(record: ImageRecord, image_root: str | Path) -> np.ndarray:
    path = resolve_image_path(record, image_root)
    if not path.exists():
        raise FileNotFoundError(f"record '{record.id}': image not found at {path}")
    return load_image(path)


def load_record_saliency(
    record: ImageRecord,
    saliency_root: str | Path | None,
    image: np.ndarray | None = None,
) -> np.ndarray:
    """Precomputed map for the record, or a spectral-residual map computed
    from `image` when no saliency root is configured."""
    if saliency_root is not None:
        path = find_saliency_path(saliency_root, record.id)
        if path is None:
            raise SaliencyError(f"record '{record.id}': no saliency map under {saliency_root}")
        return load_saliency(path)
    if image is None:
        raise SaliencyError(
            f"record '{record.id}': need either a saliency root or the image to derive a map"
        )
    return spectral_residual(image)


def _to_chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def column_inputs(
    image: np.ndarray,
    smap: np.ndarray | None,
    spec: PatchSpec,
    columns: tuple[str, ...],
    whole_map: bool = False,
    out_size: int = MODEL_INPUT_SIZE,
) -> dict[str, torch.Tensor]:
    """One record's tensors for every configured column, CHW, unbatched.

    `image` is the (possibly pre-resized) HWC float array the spec indexes
    into; `smap` is the full-image saliency map at any resolution. With
    whole_map=True the saliency column receives the entire map (flip only)
    instead of the patch-aligned crop.
    """
    height, width = image.shape[:2]
    spec.validate(height, width)
    out: dict[str, torch.Tensor] = {}
    for kind in columns:
        if kind == "rgb_patch":
            patch = apply_patch(image, spec)
            if patch.shape[0] != out_size:
                patch = warp_resize(patch, out_size, out_size)
            out[kind] = _to_chw(normalize(patch, IMAGENET_MEAN, IMAGENET_STD))
        elif kind == "rgb_warp":
            warped = warp_resize(image, out_size, out_size)
            if spec.flip:
                warped = hflip(warped)
            out[kind] = _to_chw(normalize(warped, IMAGENET_MEAN, IMAGENET_STD))
        elif kind == "saliency":
            if smap is None:
                raise SaliencyError("saliency column requested but no map supplied")
            aligned = align_to_patch(
                smap, spec, height, width, out_size=out_size, whole_map=whole_map
            )
            out[kind] = torch.from_numpy(aligned).unsqueeze(0)
        else:
            raise ValueError(f"unknown column kind '{kind}'")
    return out


def batch_inputs(items: list[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Stack a list of per-record column dicts into batched tensors."""
    if not items:
        raise ValueError("cannot batch an empty list")
    kinds = items[0].keys()
    return {kind: torch.stack([item[kind] for item in items]) for kind in kinds}
