"""Style taxonomies: ordered, immutable class lists for the supported corpora."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path


class TaxonomyError(ValueError):
    """Invalid taxonomy definition or unknown class name."""


# Class counts pinned for the two standard corpora; other names are free-form.
KNOWN_SIZES = {"ava14": 14, "flickr20": 20}


@dataclass(frozen=True)
class StyleTaxonomy:
    """Ordered list of style class names with stable index lookup."""

    name: str
    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise TaxonomyError("taxonomy name must be non-empty")
        classes = tuple(self.classes)
        object.__setattr__(self, "classes", classes)
        if not classes:
            raise TaxonomyError(f"taxonomy '{self.name}' has no classes")
        if any(not c for c in classes):
            raise TaxonomyError(f"taxonomy '{self.name}' contains an empty class name")
        if len(set(classes)) != len(classes):
            raise TaxonomyError(f"taxonomy '{self.name}' contains duplicate class names")
        expected = KNOWN_SIZES.get(self.name)
        if expected is not None and len(classes) != expected:
            raise TaxonomyError(
                f"taxonomy '{self.name}' must have {expected} classes, got {len(classes)}"
            )
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(classes)})

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, class_name: str) -> bool:
        return class_name in self._index  # type: ignore[attr-defined]

    def index_of(self, class_name: str) -> int:
        try:
            return self._index[class_name]  # type: ignore[attr-defined]
        except KeyError:
            raise TaxonomyError(
                f"unknown class '{class_name}' for taxonomy '{self.name}'"
            ) from None

    def to_dict(self) -> dict:
        return {"name": self.name, "classes": list(self.classes)}

    @classmethod
    def from_dict(cls, payload: dict) -> "StyleTaxonomy":
        return cls(name=payload["name"], classes=tuple(payload["classes"]))


def parse_taxonomy(text: str, name: str) -> StyleTaxonomy:
    """Parse a taxonomy file body: one class per line, '#' comments, blanks skipped."""
    classes = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            classes.append(line)
    return StyleTaxonomy(name=name, classes=tuple(classes))


def load_taxonomy(path: str | Path, name: str | None = None) -> StyleTaxonomy:
    path = Path(path)
    return parse_taxonomy(path.read_text(encoding="utf-8"), name or path.stem)


def ava14() -> StyleTaxonomy:
    """The built-in 14-class AVA Style taxonomy."""
    text = resources.files("photostyle.data").joinpath("ava14.txt").read_text("utf-8")
    return parse_taxonomy(text, "ava14")
