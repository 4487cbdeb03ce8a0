"""Pre-flight dataset validation: every image decodable, every saliency map
present and shaped consistently with its image.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from PIL import Image

from photostyle.fetch import cache_path, is_remote
from photostyle.manifest import DatasetManifest, ImageRecord
from photostyle.saliency import SaliencyError, find_saliency_path, load_saliency

# Relative aspect-ratio slack allowed between an image and its saliency map
# (maps are often stored downscaled).
ASPECT_TOLERANCE = 0.02


@dataclass(frozen=True)
class ValidationProblem:
    record_id: str
    kind: str
    detail: str

    def __str__(self) -> str:
        return f"{self.record_id}: {self.kind}: {self.detail}"


@dataclass
class ValidationReport:
    problems: list[ValidationProblem]
    checked: int

    @property
    def ok(self) -> bool:
        return not self.problems

    def summary(self) -> str:
        if self.ok:
            return f"OK: {self.checked} records, no problems"
        lines = [f"{len(self.problems)} problem(s) across {self.checked} records:"]
        lines.extend(f"  {p}" for p in self.problems)
        return "\n".join(lines)


def resolve_image_path(record: ImageRecord, image_root: str | Path) -> Path:
    """Local file for a record: absolute paths as-is, relative ones under
    image_root, remote sources at their cache location under image_root."""
    root = Path(image_root)
    if is_remote(record.source):
        return cache_path(record, root)
    src = Path(record.source)
    return src if src.is_absolute() else root / src


def _probe_image(path: Path) -> tuple[int, int]:
    """Fully decode to catch truncation; returns (height, width)."""
    with Image.open(path) as im:
        im.load()
        return im.height, im.width


def _check_record(
    record: ImageRecord,
    image_root: Path,
    saliency_root: Path | None,
) -> list[ValidationProblem]:
    problems = []
    image_path = resolve_image_path(record, image_root)
    dims = None
    if not image_path.exists():
        problems.append(ValidationProblem(record.id, "missing_image", str(image_path)))
    else:
        try:
            dims = _probe_image(image_path)
        except Exception as exc:
            problems.append(
                ValidationProblem(record.id, "undecodable_image", f"{image_path}: {exc}")
            )
    if saliency_root is None:
        return problems

    sal_path = find_saliency_path(saliency_root, record.id)
    if sal_path is None:
        problems.append(
            ValidationProblem(record.id, "missing_saliency", f"no map under {saliency_root}")
        )
        return problems
    try:
        smap = load_saliency(sal_path)
    except SaliencyError as exc:
        problems.append(ValidationProblem(record.id, "undecodable_saliency", str(exc)))
        return problems
    if dims is not None:
        img_aspect = dims[1] / dims[0]
        map_aspect = smap.shape[1] / smap.shape[0]
        if abs(map_aspect - img_aspect) > ASPECT_TOLERANCE * img_aspect:
            problems.append(
                ValidationProblem(
                    record.id,
                    "saliency_shape_mismatch",
                    f"map {smap.shape[0]}x{smap.shape[1]} vs image {dims[0]}x{dims[1]}",
                )
            )
    return problems


def validate_dataset(
    manifest: DatasetManifest,
    image_root: str | Path,
    saliency_root: str | Path | None = None,
    jobs: int = 1,
) -> ValidationReport:
    """Check every record; problems come back id-ordered regardless of jobs.

    The report is empty iff the dataset is trainable with the given roots.
    """
    image_root = Path(image_root)
    sal_root = Path(saliency_root) if saliency_root is not None else None
    if jobs > 1 and len(manifest.records) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_record = list(
                pool.map(lambda r: _check_record(r, image_root, sal_root), manifest.records)
            )
    else:
        per_record = [_check_record(r, image_root, sal_root) for r in manifest.records]
    problems = [p for plist in per_record for p in plist]
    problems.sort(key=lambda p: (p.record_id, p.kind))
    return ValidationReport(problems=problems, checked=len(manifest.records))
