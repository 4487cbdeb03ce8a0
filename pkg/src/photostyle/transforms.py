"""Image decoding and the geometric transforms behind training augmentation
and the deterministic 50-patch test protocol.

Images are float32 arrays in [0, 1]: (H, W, 3) for RGB, (H, W) for
single-channel maps. All functions are pure; randomness is threaded through
explicit numpy generators so parallel schedules cannot change results.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

TEST_PATCH_COUNT = 50
GRID_SIDE = 5

# Channel statistics conventionally used by ImageNet-pretrained backbones.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class TransformError(ValueError):
    """Invalid transform input (bad dimensions, out-of-bounds patch, ...)."""


@dataclass(frozen=True)
class PatchSpec:
    """A square crop rectangle plus horizontal-flip flag, in source pixels."""

    top: int
    left: int
    size: int
    flip: bool = False

    def validate(self, height: int, width: int) -> None:
        if self.size < 1:
            raise TransformError(f"patch size must be >= 1, got {self.size}")
        if self.top < 0 or self.left < 0:
            raise TransformError(f"patch offsets must be >= 0, got ({self.top}, {self.left})")
        if self.top + self.size > height or self.left + self.size > width:
            raise TransformError(
                f"patch ({self.top}, {self.left}, {self.size}) exceeds {height}x{width} source"
            )


def derive_rng(global_seed: int, *parts) -> np.random.Generator:
    """Generator seeded deterministically from (global_seed, *parts)."""
    key = ":".join([str(global_seed), *map(str, parts)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def decode_image(data: bytes) -> np.ndarray:
    """Decode raster bytes to an (H, W, 3) float32 grid in [0, 1].

    Grayscale sources are replicated to 3 channels; alpha is discarded.
    """
    try:
        with Image.open(io.BytesIO(data)) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except Exception as exc:
        raise TransformError(f"undecodable image bytes: {exc}") from exc
    return (arr.astype(np.float32) / 255.0).reshape(arr.shape[0], arr.shape[1], 3)


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def save_image(img: np.ndarray, path) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling and edge clamping.

    Value range is preserved but not clipped; use warp_resize for [0, 1] grids.
    """
    if out_h < 1 or out_w < 1:
        raise TransformError(f"output dims must be >= 1, got {out_h}x{out_w}")
    h, w = arr.shape[:2]
    if (out_h, out_w) == (h, w):
        return arr.astype(np.float32, copy=True)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float64)[:, None]
    wx = (xs - x0).astype(np.float64)[None, :]
    if arr.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    src = arr.astype(np.float64)
    top = src[y0[:, None], x0[None, :]] * (1.0 - wx) + src[y0[:, None], x1[None, :]] * wx
    bottom = src[y1[:, None], x0[None, :]] * (1.0 - wx) + src[y1[:, None], x1[None, :]] * wx
    return (top * (1.0 - wy) + bottom * wy).astype(np.float32)


def warp_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize to exact dims without preserving aspect ratio; output in [0, 1]."""
    return np.clip(bilinear_resize(img, out_h, out_w), 0.0, 1.0)


def resize_short_side(img: np.ndarray, target: int) -> np.ndarray:
    """Scale proportionally so the short side equals `target`."""
    h, w = img.shape[:2]
    if min(h, w) == target:
        return img.astype(np.float32, copy=True)
    scale = target / min(h, w)
    out_h = max(target, int(round(h * scale)))
    out_w = max(target, int(round(w * scale)))
    return warp_resize(img, out_h, out_w)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def apply_patch(img: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Exact pixel copy of the spec rectangle, mirrored when spec.flip."""
    h, w = img.shape[:2]
    spec.validate(h, w)
    patch = img[spec.top : spec.top + spec.size, spec.left : spec.left + spec.size]
    if spec.flip:
        patch = patch[:, ::-1]
    return np.ascontiguousarray(patch, dtype=np.float32)


def random_crop(
    img: np.ndarray, size: int, rng: np.random.Generator, flip_prob: float = 0.0
) -> tuple[np.ndarray, PatchSpec]:
    """Uniform random square crop (short sides below `size` are warped up first).

    The returned spec reproduces the crop via apply_patch on the
    (possibly resized) source.
    """
    if size < 1:
        raise TransformError(f"crop size must be >= 1, got {size}")
    if min(img.shape[:2]) < size:
        img = resize_short_side(img, size)
    h, w = img.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    flip = bool(rng.random() < flip_prob) if flip_prob > 0.0 else False
    spec = PatchSpec(top=top, left=left, size=size, flip=flip)
    return apply_patch(img, spec), spec


def center_patch(src_h: int, src_w: int, size: int) -> PatchSpec:
    if size > min(src_h, src_w):
        raise TransformError(f"patch size {size} exceeds {src_h}x{src_w} source")
    return PatchSpec(top=(src_h - size) // 2, left=(src_w - size) // 2, size=size)


def grid_patches(src_h: int, src_w: int, size: int, grid: int = GRID_SIDE) -> list[PatchSpec]:
    """Deterministic grid x {no-flip, flip} patch specs; 5x5 grid gives 50.

    Offsets are linearly spaced over the valid range, corners included.
    Pure geometry: independent of image content and identical across runs.
    """
    if size > min(src_h, src_w):
        raise TransformError(f"patch size {size} exceeds {src_h}x{src_w} source")
    tops = np.round(np.linspace(0, src_h - size, grid)).astype(int)
    lefts = np.round(np.linspace(0, src_w - size, grid)).astype(int)
    return [
        PatchSpec(top=int(t), left=int(l), size=size, flip=flip)
        for flip in (False, True)
        for t in tops
        for l in lefts
    ]


def random_patches(
    src_h: int, src_w: int, size: int, count: int, rng: np.random.Generator
) -> list[PatchSpec]:
    """`count` uniform random specs with random flips (test_patches: random)."""
    if size > min(src_h, src_w):
        raise TransformError(f"patch size {size} exceeds {src_h}x{src_w} source")
    specs = []
    for _ in range(count):
        top = int(rng.integers(0, src_h - size + 1))
        left = int(rng.integers(0, src_w - size + 1))
        specs.append(PatchSpec(top=top, left=left, size=size, flip=bool(rng.integers(0, 2))))
    return specs


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel (value - mean) / std; output is unbounded float32."""
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if np.any(std <= 0):
        raise TransformError(f"std must be positive, got {std}")
    return ((img - mean) / std).astype(np.float32)
