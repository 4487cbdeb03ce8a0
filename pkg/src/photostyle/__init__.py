"""Geometry-sensitive photographic style classification.

A two-column classifier for photographic style attributes: a parameter-free,
position-cognizant saliency column fused with a conventional RGB backbone,
plus the dataset, training, and evaluation machinery around it.
"""

__version__ = "0.1.0"

from photostyle.taxonomy import StyleTaxonomy, ava14, load_taxonomy
from photostyle.manifest import (
    DatasetManifest,
    ImageRecord,
    class_histogram,
    parse_manifest,
    serialize_manifest,
    split_records,
)

__all__ = [
    "StyleTaxonomy",
    "ava14",
    "load_taxonomy",
    "DatasetManifest",
    "ImageRecord",
    "parse_manifest",
    "serialize_manifest",
    "split_records",
    "class_histogram",
    "__version__",
]
