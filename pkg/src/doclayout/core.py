"""Layout data model, normalization and coordinate quantization.

Every other module works on the immutable types defined here.  Boxes are
stored as normalized floats (origin top-left, ``x``/``w`` horizontal,
``y``/``h`` vertical); the 1000-bin quantized view is derived on demand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

DOC_TYPES = ("textbook", "newspaper", "magazine", "exam", "academic", "slide")
NUM_BINS = 1000
MAX_Q = NUM_BINS - 1
EPS = 1e-6
DEFAULT_MAX_ELEMENTS = 256


class LayoutError(Exception):
    """Base class for all package errors."""


class DomainError(LayoutError, ValueError):
    """A value lies outside the domain of an operation."""


class EmptyLayout(LayoutError):
    """No elements survived filtering or decoding."""


class UnknownLabel(LayoutError, KeyError):
    """A category label is not part of the active taxonomy."""

    def __init__(self, label: str, index: Optional[int] = None):
        self.label = label
        self.index = index
        where = f" at element {index}" if index is not None else ""
        super().__init__(f"unknown label {label!r}{where}")

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return self.args[0]


class ConditionMismatch(LayoutError, ValueError):
    """A condition list is inconsistent with its header or task kind."""


def quantize(v: float) -> int:
    """Map a normalized coordinate in [0, 1] to its bin in [0, 999]."""
    if not (0.0 <= v <= 1.0):
        raise DomainError(f"cannot quantize {v!r}: outside [0, 1]")
    return min(int(math.floor(v * NUM_BINS)), MAX_Q)


def dequantize(q: int) -> float:
    """Return the center of bin ``q``."""
    if not (0 <= q <= MAX_Q) or int(q) != q:
        raise DomainError(f"cannot dequantize {q!r}: outside [0, {MAX_Q}]")
    return (int(q) + 0.5) / NUM_BINS


def _dequantize_span(q0: int, q1: int) -> tuple[float, float]:
    """Start and extent for a (position, size) bin pair, clipped to the page."""
    start, extent = dequantize(q0), dequantize(q1)
    if start + extent > 1.0:
        start = q0 / NUM_BINS
        extent = min(extent, (NUM_BINS - q0) / NUM_BINS)
    return start, extent


@dataclass(frozen=True)
class QBBox:
    qx: int
    qy: int
    qw: int
    qh: int

    def __post_init__(self) -> None:
        for name in ("qx", "qy", "qw", "qh"):
            v = getattr(self, name)
            if not (0 <= v <= MAX_Q):
                raise DomainError(f"{name}={v} outside [0, {MAX_Q}]")
        if self.qw < 1 or self.qh < 1:
            raise DomainError("quantized box has zero extent")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.qx, self.qy, self.qw, self.qh)

    def to_bbox(self) -> "BBox":
        return BBox.from_quantized(self.qx, self.qy, self.qw, self.qh)


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        x, y, w, h = self.x, self.y, self.w, self.h
        if not all(math.isfinite(v) for v in (x, y, w, h)):
            raise DomainError(f"non-finite box {self.as_tuple()}")
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise DomainError(f"box origin outside page: {self.as_tuple()}")
        if w <= 0.0 or h <= 0.0:
            raise DomainError(f"box has zero extent: {self.as_tuple()}")
        if x + w > 1.0 + EPS or y + h > 1.0 + EPS:
            raise DomainError(f"box exceeds page: {self.as_tuple()}")

    @classmethod
    def from_quantized(cls, qx: int, qy: int, qw: int, qh: int) -> "BBox":
        """Dequantize four bins, keeping the box on the page.

        Bin centers of an edge-touching box overshoot the page by half a bin
        each.  Such a box starts at the lower edge of its x (y) bin instead,
        which re-quantizes to the same bins whenever ``qx + qw <= 1000``;
        otherwise the extent is trimmed.
        """
        x, w = _dequantize_span(qx, qw)
        y, h = _dequantize_span(qy, qh)
        return cls(x, y, w, h)

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def quantized(self) -> QBBox:
        # a box with positive extent always occupies at least one bin
        return QBBox(
            quantize(self.x),
            quantize(self.y),
            max(1, quantize(min(self.w, 1.0))),
            max(1, quantize(min(self.h, 1.0))),
        )


@dataclass(frozen=True)
class Element:
    category: str
    bbox: BBox

    @property
    def qbbox(self) -> QBBox:
        return self.bbox.quantized()


@dataclass(frozen=True)
class Layout:
    """A page: doc type, source canvas size and elements in reading order."""

    doc_type: str
    canvas_w: int
    canvas_h: int
    elements: tuple[Element, ...]
    id: str = ""
    max_elements: int = field(default=DEFAULT_MAX_ELEMENTS, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.doc_type not in DOC_TYPES:
            raise DomainError(f"unknown doc_type {self.doc_type!r}")
        if self.canvas_w <= 0 or self.canvas_h <= 0:
            raise DomainError("canvas dimensions must be positive")
        if not isinstance(self.elements, tuple):
            object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise EmptyLayout(f"layout {self.id!r} has no elements")
        if len(self.elements) > self.max_elements:
            raise DomainError(
                f"layout {self.id!r} has {len(self.elements)} elements "
                f"(max {self.max_elements})"
            )

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(e.category for e in self.elements)

    def replace_elements(self, elements: Iterable[Element]) -> "Layout":
        return Layout(
            self.doc_type, self.canvas_w, self.canvas_h, tuple(elements),
            self.id, self.max_elements,
        )


@dataclass(frozen=True)
class PartialElement:
    """One condition tuple: any of category, (w, h), (x, y) may be absent.

    Geometry is held in quantized bins because conditions are always
    presented to a generator in token form.
    """

    category: Optional[str] = None
    x: Optional[int] = None
    y: Optional[int] = None
    w: Optional[int] = None
    h: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.x is None) != (self.y is None):
            raise ConditionMismatch("x and y must be given together")
        if (self.w is None) != (self.h is None):
            raise ConditionMismatch("w and h must be given together")
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if v is not None and not (0 <= v <= MAX_Q):
                raise DomainError(f"condition {name}={v} outside [0, {MAX_Q}]")

    @property
    def pattern(self) -> tuple[bool, bool, bool]:
        """Presence of (category, size, position)."""
        return (self.category is not None, self.w is not None, self.x is not None)

    @property
    def is_complete(self) -> bool:
        return all(self.pattern)

    @classmethod
    def from_element(cls, element: Element) -> "PartialElement":
        q = element.qbbox
        return cls(element.category, q.qx, q.qy, q.qw, q.qh)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for name in ("category", "x", "y", "w", "h"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PartialElement":
        return cls(**{k: d[k] for k in ("category", "x", "y", "w", "h") if k in d})


def clip_pixel_box(
    box: Sequence[float], canvas_w: float, canvas_h: float
) -> tuple[float, float, float, float]:
    """Clip an absolute (x, y, w, h) box to the canvas; extent may become 0."""
    x, y, w, h = (float(v) for v in box)
    x0, x1 = min(max(x, 0.0), canvas_w), min(max(x + w, 0.0), canvas_w)
    y0, y1 = min(max(y, 0.0), canvas_h), min(max(y + h, 0.0), canvas_h)
    return (x0, y0, max(x1 - x0, 0.0), max(y1 - y0, 0.0))


def normalize_box(
    box: Sequence[float], canvas_w: float, canvas_h: float
) -> Optional[BBox]:
    """Clip and normalize a pixel box; ``None`` if it has zero extent.

    Extents below one quantization bin count as zero: such boxes have no
    token representation.
    """
    x, y, w, h = clip_pixel_box(box, canvas_w, canvas_h)
    nx, ny, nw, nh = x / canvas_w, y / canvas_h, w / canvas_w, h / canvas_h
    if nw <= 0 or nh <= 0 or quantize(min(nw, 1.0)) < 1 or quantize(min(nh, 1.0)) < 1:
        return None
    return BBox(nx, ny, nw, nh)


def normalize_layout(
    doc_type: str,
    canvas_w: int,
    canvas_h: int,
    boxes: Iterable[tuple[str, Sequence[float]]],
    id: str = "",
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> tuple[Layout, int]:
    """Build a normalized layout from absolute pixel boxes.

    Args:
        doc_type: One of :data:`DOC_TYPES`.
        canvas_w: Canvas width in source pixels.
        canvas_h: Canvas height in source pixels.
        boxes: ``(category, (x, y, w, h))`` pairs in reading order.
        id: Opaque layout identifier.
        max_elements: Upper bound on the element count.

    Returns:
        The layout and the number of zero-extent boxes that were dropped.

    Raises:
        EmptyLayout: if every box was dropped.
    """
    if canvas_w <= 0 or canvas_h <= 0:
        raise DomainError("canvas dimensions must be positive")
    elements = []
    dropped = 0
    for category, box in boxes:
        bbox = normalize_box(box, canvas_w, canvas_h)
        if bbox is None:
            dropped += 1
            continue
        elements.append(Element(category, bbox))
    if not elements:
        raise EmptyLayout(f"layout {id!r} has no elements after dropping {dropped}")
    return Layout(doc_type, canvas_w, canvas_h, tuple(elements), id, max_elements), dropped


def layout_to_dict(layout: Layout) -> dict[str, Any]:
    """Normalized-coordinate JSON form used for task targets and generator output."""
    return {
        "id": layout.id,
        "doc_type": layout.doc_type,
        "width": layout.canvas_w,
        "height": layout.canvas_h,
        "coords": "normalized",
        "elements": [
            {"category": e.category, "bbox": list(e.bbox.as_tuple())}
            for e in layout.elements
        ],
    }


def layout_from_dict(d: dict[str, Any], max_elements: int = DEFAULT_MAX_ELEMENTS) -> Layout:
    """Inverse of :func:`layout_to_dict`.

    Records without ``"coords": "normalized"`` are read as absolute-pixel
    corpus records and normalized on the fly.
    """
    if d.get("coords") == "normalized":
        elements = tuple(
            Element(str(e["category"]), BBox(*(float(v) for v in e["bbox"])))
            for e in d["elements"]
        )
        return Layout(
            d["doc_type"], int(d["width"]), int(d["height"]), elements,
            str(d.get("id", "")), max_elements,
        )
    items = sorted(
        enumerate(d["elements"]), key=lambda p: (p[1].get("order", p[0]), p[0])
    )
    layout, _ = normalize_layout(
        d["doc_type"], int(d["width"]), int(d["height"]),
        ((str(e["category"]), e["bbox"]) for _, e in items),
        str(d.get("id", "")), max_elements,
    )
    return layout
