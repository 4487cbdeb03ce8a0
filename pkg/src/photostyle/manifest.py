"""Dataset manifests: one JSON record per line, validated against a taxonomy."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from photostyle.taxonomy import StyleTaxonomy

SPLITS = ("train", "val", "test")

# Splits whose records must carry exactly one label.
SINGLE_LABEL_SPLITS = ("train", "val")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest content (carries a line number when known)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ImageRecord:
    """One corpus entry. `id` doubles as the saliency-map filename stem."""

    id: str
    source: str
    split: str
    labels: tuple[str, ...]
    width: int | None = None
    height: int | None = None

    def to_json(self) -> str:
        payload: dict = {
            "id": self.id,
            "source": self.source,
            "split": self.split,
            "labels": list(self.labels),
        }
        if self.width is not None:
            payload["width"] = self.width
        if self.height is not None:
            payload["height"] = self.height
        return json.dumps(payload, ensure_ascii=False)


@dataclass
class DatasetManifest:
    taxonomy: StyleTaxonomy
    records: list[ImageRecord]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate id '{rec.id}'")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)


def _validate_record(rec: ImageRecord, taxonomy: StyleTaxonomy, line: int | None) -> None:
    if not rec.id:
        raise ManifestError("record id must be non-empty", line)
    if not rec.source:
        raise ManifestError(f"record '{rec.id}' has an empty source", line)
    if rec.split not in SPLITS:
        raise ManifestError(
            f"record '{rec.id}' has invalid split '{rec.split}' (expected one of {SPLITS})", line
        )
    if not rec.labels:
        raise ManifestError(f"record '{rec.id}' has no labels", line)
    for label in rec.labels:
        if label not in taxonomy:
            raise ManifestError(
                f"unknown label '{label}' for taxonomy '{taxonomy.name}'", line
            )
    if rec.split in SINGLE_LABEL_SPLITS and len(rec.labels) != 1:
        raise ManifestError(
            f"{rec.split} record '{rec.id}' must carry exactly one label, got {len(rec.labels)}",
            line,
        )
    for field in ("width", "height"):
        value = getattr(rec, field)
        if value is not None and (not isinstance(value, int) or value < 1):
            raise ManifestError(f"record '{rec.id}' has invalid {field} {value!r}", line)


def _record_from_payload(payload: dict, line: int) -> ImageRecord:
    if not isinstance(payload, dict):
        raise ManifestError("record must be a JSON object", line)
    missing = [k for k in ("id", "source", "split", "labels") if k not in payload]
    if missing:
        raise ManifestError(f"record is missing fields {missing}", line)
    unknown = set(payload) - {"id", "source", "split", "labels", "width", "height"}
    if unknown:
        raise ManifestError(f"record has unknown fields {sorted(unknown)}", line)
    labels = payload["labels"]
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise ManifestError("labels must be a list of strings", line)
    return ImageRecord(
        id=str(payload["id"]),
        source=str(payload["source"]),
        split=str(payload["split"]),
        labels=tuple(labels),
        width=payload.get("width"),
        height=payload.get("height"),
    )


def parse_manifest(text: str, taxonomy: StyleTaxonomy) -> DatasetManifest:
    """Parse a line-delimited JSON manifest, validating every record."""
    records: list[ImageRecord] = []
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed record: {exc.msg}", line_no) from None
        rec = _record_from_payload(payload, line_no)
        _validate_record(rec, taxonomy, line_no)
        if rec.id in seen:
            raise ManifestError(f"duplicate id '{rec.id}'", line_no)
        seen.add(rec.id)
        records.append(rec)
    return DatasetManifest(taxonomy=taxonomy, records=records)


def serialize_manifest(manifest: DatasetManifest) -> str:
    return "".join(rec.to_json() + "\n" for rec in manifest.records)


def load_manifest(path: str | Path, taxonomy: StyleTaxonomy) -> DatasetManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), taxonomy)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(serialize_manifest(manifest), encoding="utf-8")


def split_records(manifest: DatasetManifest, split: str) -> list[ImageRecord]:
    """Records of one split, original order preserved."""
    if split not in SPLITS:
        raise ManifestError(f"invalid split '{split}' (expected one of {SPLITS})")
    return [rec for rec in manifest.records if rec.split == split]


def class_histogram(manifest: DatasetManifest, split: str) -> dict[str, int]:
    """Label counts over one split; multi-label records count once per label."""
    counts = {name: 0 for name in manifest.taxonomy.classes}
    for rec in split_records(manifest, split):
        for label in rec.labels:
            counts[label] += 1
    return counts


def _id_fraction(record_id: str) -> float:
    """Deterministic hash of a record id into [0, 1)."""
    digest = hashlib.sha256(record_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def with_val_split(manifest: DatasetManifest, fraction: float = 0.1) -> DatasetManifest:
    """Carve a validation split out of the train pool by hash of record id.

    No-op when the manifest already carries explicit val records. The
    assignment depends only on record ids, so it is stable across runs
    and across manifest edits elsewhere.
    """
    if not 0.0 <= fraction < 1.0:
        raise ManifestError(f"val fraction must be in [0, 1), got {fraction}")
    if fraction == 0.0 or any(rec.split == "val" for rec in manifest.records):
        return manifest
    records = []
    for rec in manifest.records:
        if rec.split == "train" and _id_fraction(rec.id) < fraction:
            records.append(
                ImageRecord(rec.id, rec.source, "val", rec.labels, rec.width, rec.height)
            )
        else:
            records.append(rec)
    return DatasetManifest(taxonomy=manifest.taxonomy, records=records)
