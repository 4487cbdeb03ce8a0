"""Saliency maps: spectral-residual generation, center prior, storage, and
patch alignment.

The saliency map is the appearance-invariant, position-carrying half of the
representation: a single-channel (H, W) float32 grid in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from photostyle.transforms import PatchSpec, bilinear_resize, warp_resize

# Classical spectral-residual constants: working size, residual box filter,
# and post-smoothing width.
WORKING_LONG_SIDE = 64
RESIDUAL_BOX_SIZE = 3
SMOOTH_SIGMA = 2.5

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SALIENCY_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# Amplitudes below this fraction of the spectral peak are floored before the
# log. Exact spectral nulls (common in synthetic images) would otherwise
# produce huge log valleys whose box-filter residual amplifies neighboring
# frequencies into periodic ghost peaks. A floor relative to the peak also
# makes the residual exactly invariant to global luminance scaling.
AMPLITUDE_FLOOR_FRAC = 1e-4


class SaliencyError(ValueError):
    """Invalid saliency input, file, or alignment request."""


def luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.astype(np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SaliencyError(f"expected (H, W, 3) image, got shape {img.shape}")
    w = np.asarray(LUMA_WEIGHTS, dtype=np.float32)
    return (img @ w).astype(np.float32)


def spectral_residual(
    img: np.ndarray,
    working_long_side: int = WORKING_LONG_SIDE,
    box_size: int = RESIDUAL_BOX_SIZE,
    smooth_sigma: float = SMOOTH_SIGMA,
) -> np.ndarray:
    """Spectral-residual saliency, min-max normalized to [0, 1].

    Pipeline: luminance -> rescale so the long side is `working_long_side` ->
    2-D FFT -> log-amplitude minus its box-filtered version -> recombine with
    the original phase -> inverse FFT -> squared magnitude -> Gaussian
    smoothing -> upscale to source dims -> min-max normalize. A constant
    input has a flat spectrum and zero residual; the map is defined as
    all-zeros there.
    """
    lum = luminance(img)
    h, w = lum.shape
    if h < 2 or w < 2:
        raise SaliencyError(f"input too small for saliency: {h}x{w}")
    if float(lum.max()) == float(lum.min()):
        return np.zeros((h, w), dtype=np.float32)

    scale = working_long_side / max(h, w)
    small_h = max(2, int(round(h * scale)))
    small_w = max(2, int(round(w * scale)))
    small = bilinear_resize(lum, small_h, small_w).astype(np.float64)

    spectrum = np.fft.fft2(small)
    amplitude = np.abs(spectrum)
    phase = np.angle(spectrum)
    log_amp = np.log(np.maximum(amplitude, amplitude.max() * AMPLITUDE_FLOOR_FRAC))
    residual = log_amp - ndimage.uniform_filter(log_amp, size=box_size, mode="reflect")
    recombined = np.exp(residual) * np.exp(1j * phase)
    sal = np.abs(np.fft.ifft2(recombined)) ** 2
    sal = ndimage.gaussian_filter(sal, sigma=smooth_sigma, mode="reflect")
    sal = bilinear_resize(sal, h, w).astype(np.float64)

    lo, hi = float(sal.min()), float(sal.max())
    if not np.isfinite([lo, hi]).all() or hi <= lo:
        return np.zeros((h, w), dtype=np.float32)
    return ((sal - lo) / (hi - lo)).astype(np.float32)


def center_prior(h: int, w: int, sigma_frac: float = 0.25) -> np.ndarray:
    """Isotropic Gaussian at the image center, analytic peak 1.

    sigma = sigma_frac * min(h, w); models the human tendency to fixate at
    the center of a photograph.
    """
    if sigma_frac <= 0:
        raise SaliencyError(f"sigma_frac must be positive, got {sigma_frac}")
    if h < 1 or w < 1:
        raise SaliencyError(f"invalid dims {h}x{w}")
    sigma = sigma_frac * min(h, w)
    dy = (np.arange(h, dtype=np.float64) - (h - 1) / 2.0)[:, None]
    dx = (np.arange(w, dtype=np.float64) - (w - 1) / 2.0)[None, :]
    return np.exp(-(dy**2 + dx**2) / (2.0 * sigma**2)).astype(np.float32)


def combine(sal: np.ndarray, prior: np.ndarray, weight: float) -> np.ndarray:
    """Pixelwise blend (1 - w) * sal + w * prior; stays within [0, 1]."""
    if sal.shape != prior.shape:
        raise SaliencyError(f"dim mismatch: {sal.shape} vs {prior.shape}")
    if not 0.0 <= weight <= 1.0:
        raise SaliencyError(f"weight must be in [0, 1], got {weight}")
    out = (1.0 - weight) * sal.astype(np.float64) + weight * prior.astype(np.float64)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def save_saliency(smap: np.ndarray, path: str | Path) -> None:
    """Store as single-channel 8-bit raster (values quantized to 0..255)."""
    if smap.ndim != 2 or min(smap.shape) < 1:
        raise SaliencyError(f"expected non-empty (H, W) map, got shape {smap.shape}")
    arr = np.round(np.clip(smap, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_saliency(path: str | Path) -> np.ndarray:
    """Load a single-channel 8-bit map; 0..255 maps to [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise SaliencyError(f"saliency map not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise SaliencyError(
                    f"{path}: expected single-channel 8-bit map, got mode '{im.mode}'"
                )
            arr = np.asarray(im, dtype=np.float32)
    except SaliencyError:
        raise
    except Exception as exc:
        raise SaliencyError(f"{path}: undecodable saliency map: {exc}") from exc
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise SaliencyError(f"{path}: invalid map dimensions {arr.shape}")
    return arr / 255.0


def find_saliency_path(root: str | Path, record_id: str) -> Path | None:
    """First existing <root>/<record-id>.<ext> under the standard extensions."""
    root = Path(root)
    for ext in SALIENCY_EXTENSIONS:
        candidate = root / f"{record_id}{ext}"
        if candidate.exists():
            return candidate
    return None


def align_to_patch(
    smap: np.ndarray,
    spec: PatchSpec,
    image_h: int,
    image_w: int,
    out_size: int = 224,
    whole_map: bool = False,
) -> np.ndarray:
    """Saliency input for one patch: the spec rectangle mapped proportionally
    into map coordinates, cropped, flipped per the spec, and warped to
    out_size x out_size. With whole_map=True the rectangle is ignored and the
    full map is warped (flip still applied).
    """
    if smap.ndim != 2:
        raise SaliencyError(f"expected (H, W) map, got shape {smap.shape}")
    map_h, map_w = smap.shape
    if whole_map:
        region = smap
    else:
        spec.validate(image_h, image_w)
        sy = map_h / image_h
        sx = map_w / image_w
        r0 = int(round(spec.top * sy))
        c0 = int(round(spec.left * sx))
        r1 = min(int(round((spec.top + spec.size) * sy)), map_h)
        c1 = min(int(round((spec.left + spec.size) * sx)), map_w)
        if r0 < 0 or c0 < 0 or r1 <= r0 or c1 <= c0:
            raise SaliencyError(
                f"patch ({spec.top}, {spec.left}, {spec.size}) maps to empty region "
                f"[{r0}:{r1}, {c0}:{c1}] of {map_h}x{map_w} map"
            )
        region = smap[r0:r1, c0:c1]
    if spec.flip:
        region = region[:, ::-1]
    return warp_resize(region, out_size, out_size)
