"""Coarse and fine label sets and the coarse-to-fine expansion map.

A :class:`LabelMap` expands every coarse label into a non-empty set of
fine-grained descendants.  The expansion must partition the fine label
set so that each fine label has exactly one coarse parent.

File format::

    {"coarse": ["text", ...], "fine": ["paragraph", ...],
     "expansion": {"text": ["paragraph", "lead", ...], ...}}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

from .core import Layout, LayoutError, UnknownLabel

DEFAULT_COARSE_LABELS = (
    "text",
    "title",
    "image",
    "table",
    "formula",
    "caption",
    "footnote",
    "list",
    "page_header",
    "page_footer",
)


class InvalidLabelMap(LayoutError, ValueError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__(f"invalid label map: {report.summary()}")


@dataclass(frozen=True)
class Taxonomy:
    name: str
    labels: tuple[str, ...]
    granularity: str = "coarse"

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if self.granularity not in ("coarse", "fine"):
            raise ValueError(f"granularity must be coarse or fine, got {self.granularity!r}")
        if not labels:
            raise ValueError("taxonomy has no labels")
        for label in labels:
            if not label or label != label.strip().lower():
                raise ValueError(f"label {label!r} is empty or not lowercase-normalized")
        if len(set(labels)) != len(labels):
            raise ValueError(f"taxonomy {self.name!r} has duplicate labels")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: object) -> bool:
        return label in self._index  # type: ignore[attr-defined]

    def index(self, label: str) -> int:
        try:
            return self._index[label]  # type: ignore[attr-defined]
        except KeyError:
            raise UnknownLabel(label) from None

    def to_dict(self) -> dict:
        return {"name": self.name, "granularity": self.granularity, "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Taxonomy":
        return cls(d.get("name", "custom"), tuple(d["labels"]), d.get("granularity", "coarse"))


def default_coarse_taxonomy() -> Taxonomy:
    return Taxonomy("coarse", DEFAULT_COARSE_LABELS, "coarse")


def load_taxonomy(path: Union[str, Path]) -> Taxonomy:
    """Read a taxonomy file; a label-map file yields its fine taxonomy."""
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    if "expansion" in d:
        return label_map_from_dict(d).fine
    return Taxonomy.from_dict(d)


@dataclass
class ValidationReport:
    overlaps: list[str] = field(default_factory=list)
    uncovered: list[str] = field(default_factory=list)
    empty: list[str] = field(default_factory=list)
    unknown_coarse: list[str] = field(default_factory=list)
    unknown_fine: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not (
            self.overlaps or self.uncovered or self.empty
            or self.unknown_coarse or self.unknown_fine
        )

    def summary(self) -> str:
        parts = [
            f"{name}={getattr(self, name)}"
            for name in ("overlaps", "uncovered", "empty", "unknown_coarse", "unknown_fine")
            if getattr(self, name)
        ]
        return "; ".join(parts) or "ok"


@dataclass(frozen=True)
class LabelMap:
    coarse: Taxonomy
    fine: Taxonomy
    expansion: Mapping[str, frozenset[str]]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "expansion",
            {k: frozenset(v) for k, v in self.expansion.items()},
        )
        report = validate_map(self)
        if not report.valid:
            raise InvalidLabelMap(report)
        parent = {f: c for c, fs in self.expansion.items() for f in fs}
        object.__setattr__(self, "_parent", parent)

    @classmethod
    def unchecked(cls, coarse: Taxonomy, fine: Taxonomy,
                  expansion: Mapping[str, Iterable[str]]) -> "LabelMap":
        """Construct without validation, for inspecting broken maps."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "coarse", coarse)
        object.__setattr__(obj, "fine", fine)
        object.__setattr__(obj, "expansion", {k: frozenset(v) for k, v in expansion.items()})
        return obj

    def to_dict(self) -> dict:
        return {
            "coarse": list(self.coarse.labels),
            "fine": list(self.fine.labels),
            "expansion": {
                c: sorted(self.expansion.get(c, ()), key=self.fine.labels.index)
                for c in self.coarse.labels
            },
        }


def identity_map(taxonomy: Taxonomy) -> LabelMap:
    fine = Taxonomy(taxonomy.name, taxonomy.labels, "fine")
    return LabelMap(taxonomy, fine, {lab: {lab} for lab in taxonomy.labels})


def label_map_from_dict(d: Mapping) -> LabelMap:
    coarse = Taxonomy(d.get("coarse_name", "coarse"), tuple(d["coarse"]), "coarse")
    fine = Taxonomy(d.get("fine_name", "fine"), tuple(d["fine"]), "fine")
    return LabelMap(coarse, fine, d["expansion"])


def load_label_map(path: Union[str, Path]) -> LabelMap:
    """Load and validate a label-map file; raises :class:`InvalidLabelMap`."""
    with open(path, encoding="utf-8") as f:
        return label_map_from_dict(json.load(f))


def validate_map(label_map: LabelMap) -> ValidationReport:
    """Check that the expansion partitions the fine label set.

    Never raises; every problem is listed in the returned report.
    """
    report = ValidationReport()
    owner: dict[str, str] = {}
    for coarse_label, fines in label_map.expansion.items():
        if coarse_label not in label_map.coarse:
            report.unknown_coarse.append(coarse_label)
        for f in sorted(fines):
            if f not in label_map.fine and f not in report.unknown_fine:
                report.unknown_fine.append(f)
            if f in owner:
                if f not in report.overlaps:
                    report.overlaps.append(f)
            else:
                owner[f] = coarse_label
    for c in label_map.coarse.labels:
        if not label_map.expansion.get(c):
            report.empty.append(c)
    for f in label_map.fine.labels:
        if f not in owner:
            report.uncovered.append(f)
    return report


def coarsen(fine_label: str, label_map: LabelMap) -> str:
    """Return the unique coarse parent of ``fine_label``."""
    try:
        return label_map._parent[fine_label]  # type: ignore[attr-defined]
    except KeyError:
        raise UnknownLabel(fine_label) from None


def project_layout(layout: Layout, label_map: LabelMap) -> Layout:
    """Relabel every element with its coarse parent; geometry is untouched."""
    elements = []
    for i, e in enumerate(layout.elements):
        try:
            parent = coarsen(e.category, label_map)
        except UnknownLabel:
            raise UnknownLabel(e.category, i) from None
        elements.append(type(e)(parent, e.bbox))
    return layout.replace_elements(elements)
