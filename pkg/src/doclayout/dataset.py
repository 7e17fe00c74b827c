"""Streaming ingestion, deduplication and corpus statistics.

Records are JSON lines::

    {"id": "p1", "doc_type": "newspaper", "width": 1000, "height": 1400,
     "elements": [{"category": "text", "bbox": [x, y, w, h], "order": 0}, ...]}

with boxes in absolute pixels.  Malformed lines never stop a run; they are
reported as :class:`Rejection` entries with a reason code.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Optional, Union

import numpy as np

from .core import (
    DEFAULT_MAX_ELEMENTS,
    DOC_TYPES,
    Layout,
    Element,
    clip_pixel_box,
    normalize_box,
)
from .metrics import extract_features, feature_names
from .taxonomy import LabelMap, Taxonomy, coarsen
from .core import UnknownLabel

log = logging.getLogger(__name__)

MALFORMED = "malformed"
BAD_GEOMETRY = "bad-geometry"
UNKNOWN_CATEGORY = "unknown-category"
DUPLICATE = "duplicate"
ELEMENT_COUNT = "element-count"
EMPTY = "empty"
REASONS = (MALFORMED, BAD_GEOMETRY, UNKNOWN_CATEGORY, DUPLICATE, ELEMENT_COUNT, EMPTY)

AREA_BINS = 20
ASPECT_BINS_PER_OCTAVE = 2
ASPECT_OCTAVES = 8  # log2 aspect ratio clipped to [-8, 8)


class RecordRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}")


@dataclass(frozen=True)
class RawElement:
    category: str
    bbox: tuple[float, float, float, float]
    order: int


@dataclass(frozen=True)
class LayoutRecord:
    id: str
    doc_type: str
    width: int
    height: int
    elements: tuple[RawElement, ...]
    source: str = ""
    _layout: Optional[Layout] = field(default=None, compare=False, repr=False)

    def to_layout(self, max_elements: int = DEFAULT_MAX_ELEMENTS) -> Layout:
        if self._layout is not None and len(self._layout) <= max_elements:
            return self._layout
        elements = []
        for e in self.elements:
            bbox = normalize_box(e.bbox, self.width, self.height)
            if bbox is not None:
                elements.append(Element(e.category, bbox))
        layout = Layout(self.doc_type, self.width, self.height, tuple(elements), self.id, max_elements)
        object.__setattr__(self, "_layout", layout)
        return layout

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "doc_type": self.doc_type,
            "width": self.width,
            "height": self.height,
            "elements": [
                {"category": e.category, "bbox": list(e.bbox), "order": e.order}
                for e in self.elements
            ],
        }
        if self.source:
            d["source"] = self.source
        return d


@dataclass(frozen=True)
class Rejection:
    path: str
    line: int
    id: Optional[str]
    reason: str
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "line": self.line, "id": self.id,
                "reason": self.reason, "detail": self.detail}


@dataclass
class FilterConfig:
    min_elements: int = 1
    max_elements: int = DEFAULT_MAX_ELEMENTS
    categories: Optional[frozenset[str]] = None
    label_map: Optional[LabelMap] = None
    dedup: bool = True
    doc_types: tuple[str, ...] = DOC_TYPES


def _number(v: Any, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RecordRejected(MALFORMED, f"{what} is not a number")
    if not math.isfinite(v):
        raise RecordRejected(BAD_GEOMETRY, f"{what} is not finite")
    return float(v)


def parse_record(obj: Any, config: Optional[FilterConfig] = None) -> LayoutRecord:
    """Validate and clean one decoded JSON object.

    Elements are sorted into reading order, clipped to the canvas and
    relabelled through ``config.label_map`` if one is set; boxes with zero
    (sub-bin) extent are dropped.
    """
    config = config or FilterConfig()
    if not isinstance(obj, dict):
        raise RecordRejected(MALFORMED, "record is not an object")
    for key in ("id", "doc_type", "width", "height", "elements"):
        if key not in obj:
            raise RecordRejected(MALFORMED, f"missing key {key!r}")
    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise RecordRejected(MALFORMED, "id must be a non-empty string")
    doc_type = obj["doc_type"]
    if doc_type not in config.doc_types:
        raise RecordRejected(MALFORMED, f"doc_type {doc_type!r} not accepted")
    width, height = _number(obj["width"], "width"), _number(obj["height"], "height")
    if width <= 0 or height <= 0 or width != int(width) or height != int(height):
        raise RecordRejected(BAD_GEOMETRY, "canvas size must be positive integers")
    width, height = int(width), int(height)
    raw = obj["elements"]
    if not isinstance(raw, list):
        raise RecordRejected(MALFORMED, "elements is not a list")

    parsed = []
    for i, e in enumerate(raw):
        if not isinstance(e, dict) or "category" not in e or "bbox" not in e:
            raise RecordRejected(MALFORMED, f"element {i} lacks category or bbox")
        bbox = e["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise RecordRejected(MALFORMED, f"element {i} bbox is not [x, y, w, h]")
        box = tuple(_number(v, f"element {i} bbox") for v in bbox)
        if box[2] < 0 or box[3] < 0:
            raise RecordRejected(BAD_GEOMETRY, f"element {i} has negative extent")
        order = e.get("order", i)
        if isinstance(order, bool) or not isinstance(order, int):
            raise RecordRejected(MALFORMED, f"element {i} order is not an integer")
        category = e["category"]
        if not isinstance(category, str):
            raise RecordRejected(MALFORMED, f"element {i} category is not a string")
        if config.label_map is not None:
            try:
                category = coarsen(category, config.label_map)
            except UnknownLabel:
                raise RecordRejected(UNKNOWN_CATEGORY, f"element {i}: {category!r}") from None
        elif config.categories is not None and category not in config.categories:
            raise RecordRejected(UNKNOWN_CATEGORY, f"element {i}: {category!r}")
        parsed.append((order, category, box))
    if sorted(p[0] for p in parsed) != list(range(len(parsed))):
        raise RecordRejected(MALFORMED, "element orders are not a permutation of 0..N-1")
    parsed.sort(key=lambda p: p[0])

    kept, normalized = [], []
    for _, category, box in parsed:
        bbox = normalize_box(box, width, height)
        if bbox is None:
            continue
        kept.append(RawElement(category, clip_pixel_box(box, width, height), len(kept)))
        normalized.append(Element(category, bbox))
    if not kept:
        raise RecordRejected(EMPTY, f"{len(parsed)} elements, none with positive extent")
    if not (config.min_elements <= len(kept) <= config.max_elements):
        raise RecordRejected(
            ELEMENT_COUNT,
            f"{len(kept)} elements outside [{config.min_elements}, {config.max_elements}]",
        )
    layout = Layout(doc_type, width, height, tuple(normalized), rid, max(len(kept), DEFAULT_MAX_ELEMENTS))
    return LayoutRecord(rid, doc_type, width, height, tuple(kept), str(obj.get("source", "")), layout)


def dedup_key(record: Union[LayoutRecord, Layout]) -> int:
    """64-bit hash of doc type and quantized element tuples in reading order."""
    layout = record.to_layout() if isinstance(record, LayoutRecord) else record
    h = hashlib.blake2b(digest_size=8)
    h.update(layout.doc_type.encode("utf-8"))
    for e in layout.elements:
        h.update(b"\x00" + e.category.encode("utf-8") + b"\x00")
        h.update(struct.pack("<4H", *e.qbbox.as_tuple()))
    return int.from_bytes(h.digest(), "little")


def read_jsonl(path: Union[str, Path]) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                yield lineno, line


def ingest(
    paths: Iterable[Union[str, Path]],
    config: Optional[FilterConfig] = None,
    rejections: Optional[list[Rejection]] = None,
) -> Iterator[LayoutRecord]:
    """Stream cleaned records from JSONL files.

    Rejected lines are appended to ``rejections`` (when given) and logged
    at debug level.  Memory use is constant apart from the set of seen ids
    and dedup keys.
    """
    config = config or FilterConfig()
    seen_ids: set[str] = set()
    seen_keys: set[int] = set()

    def reject(path, lineno, rid, reason, detail):
        log.debug("reject %s:%d %s (%s)", path, lineno, reason, detail)
        if rejections is not None:
            rejections.append(Rejection(str(path), lineno, rid, reason, detail))

    for path in paths:
        for lineno, line in read_jsonl(path):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                reject(path, lineno, None, MALFORMED, f"invalid JSON: {exc.msg}")
                continue
            rid = obj.get("id") if isinstance(obj, dict) else None
            try:
                record = parse_record(obj, config)
            except RecordRejected as exc:
                reject(path, lineno, rid, exc.reason, exc.detail)
                continue
            if record.id in seen_ids:
                reject(path, lineno, rid, DUPLICATE, "id seen before")
                continue
            seen_ids.add(record.id)
            if config.dedup:
                key = dedup_key(record)
                if key in seen_keys:
                    reject(path, lineno, rid, DUPLICATE, f"layout matches an earlier record ({key:016x})")
                    continue
                seen_keys.add(key)
            yield record


def write_jsonl(records: Iterable[Any], out: IO[str]) -> int:
    n = 0
    for r in records:
        d = r.to_dict() if hasattr(r, "to_dict") else r
        out.write(json.dumps(d, ensure_ascii=False) + "\n")
        n += 1
    return n


# statistics


def union_area(boxes: np.ndarray) -> float:
    """Exact area of the union of ``(N, 4)`` xywh boxes (coordinate compression)."""
    xs = np.unique(np.concatenate([boxes[:, 0], boxes[:, 0] + boxes[:, 2]]))
    ys = np.unique(np.concatenate([boxes[:, 1], boxes[:, 1] + boxes[:, 3]]))
    cx = (xs[:-1] + xs[1:]) / 2
    cy = (ys[:-1] + ys[1:]) / 2
    x, y, w, h = boxes.T
    in_x = ((cx > x[:, None]) & (cx < (x + w)[:, None])).astype(np.float64)
    in_y = ((cy > y[:, None]) & (cy < (y + h)[:, None])).astype(np.float64)
    covered = (in_y.T @ in_x) > 0  # cell (row, col) lies inside some box
    cell = np.diff(ys)[:, None] * np.diff(xs)[None, :]
    return float(cell[covered].sum())


def area_bin(ratio: float) -> int:
    return min(max(int(ratio * AREA_BINS), 0), AREA_BINS - 1)


def aspect_bin(ratio: float) -> int:
    idx = math.floor((math.log2(ratio) + ASPECT_OCTAVES) * ASPECT_BINS_PER_OCTAVE)
    return min(max(idx, 0), 2 * ASPECT_OCTAVES * ASPECT_BINS_PER_OCTAVE - 1)


@dataclass
class CorpusStats:
    """Exact-count corpus statistics; merging shards is plain addition."""

    pages: int = 0
    elements: int = 0
    doc_types: Counter = field(default_factory=Counter)
    element_counts: Counter = field(default_factory=Counter)
    area_ratio: Counter = field(default_factory=Counter)
    aspect_ratio: Counter = field(default_factory=Counter)
    category_by_doc: Counter = field(default_factory=Counter)
    cooccurrence: Counter = field(default_factory=Counter)

    def add(self, layout: Layout) -> None:
        boxes = np.array([e.bbox.as_tuple() for e in layout.elements], dtype=np.float64)
        self.pages += 1
        self.elements += len(layout)
        self.doc_types[layout.doc_type] += 1
        self.element_counts[len(layout)] += 1
        self.area_ratio[area_bin(union_area(boxes))] += 1
        for e, (_, _, w, h) in zip(layout.elements, boxes):
            self.aspect_ratio[aspect_bin((w * layout.canvas_w) / (h * layout.canvas_h))] += 1
            self.category_by_doc[(layout.doc_type, e.category)] += 1
        present = sorted(set(layout.categories))
        for i, a in enumerate(present):
            for b in present[i:]:
                self.cooccurrence[(a, b)] += 1

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        out = CorpusStats()
        for s in (self, other):
            out.pages += s.pages
            out.elements += s.elements
            for name in ("doc_types", "element_counts", "area_ratio", "aspect_ratio",
                         "category_by_doc", "cooccurrence"):
                getattr(out, name).update(getattr(s, name))
        return out

    __add__ = merge

    def to_dict(self) -> dict[str, Any]:
        def area_label(i: int) -> str:
            return f"[{i / AREA_BINS:.2f},{(i + 1) / AREA_BINS:.2f})"

        def aspect_label(i: int) -> str:
            lo = i / ASPECT_BINS_PER_OCTAVE - ASPECT_OCTAVES
            return f"log2[{lo:+.1f},{lo + 1 / ASPECT_BINS_PER_OCTAVE:+.1f})"

        matrix: dict[str, dict[str, int]] = {}
        for (doc, cat), n in sorted(self.category_by_doc.items()):
            matrix.setdefault(doc, {})[cat] = n
        cooc: dict[str, dict[str, int]] = {}
        for (a, b), n in sorted(self.cooccurrence.items()):
            cooc.setdefault(a, {})[b] = n
            if a != b:
                cooc.setdefault(b, {})[a] = n
        return {
            "pages": self.pages,
            "elements": self.elements,
            "doc_types": dict(sorted(self.doc_types.items())),
            "element_counts": {str(k): v for k, v in sorted(self.element_counts.items())},
            "area_ratio": {area_label(k): v for k, v in sorted(self.area_ratio.items())},
            "aspect_ratio": {aspect_label(k): v for k, v in sorted(self.aspect_ratio.items())},
            "category_by_doc_type": matrix,
            "cooccurrence": {a: dict(sorted(row.items())) for a, row in sorted(cooc.items())},
        }


def _as_layout(r: Union[LayoutRecord, Layout]) -> Layout:
    return r.to_layout() if isinstance(r, LayoutRecord) else r


def compute_stats(records: Iterable[Union[LayoutRecord, Layout]]) -> CorpusStats:
    stats = CorpusStats()
    for r in records:
        stats.add(_as_layout(r))
    return stats


FEATURE_PREFIX = ("id", "doc_type", "n_elements", "mean_area", "mean_cx", "mean_cy")


def feature_columns(taxonomy: Taxonomy) -> list[str]:
    return list(FEATURE_PREFIX) + [f"f_{n}" for n in feature_names(taxonomy)]


def feature_row(layout: Layout, taxonomy: Taxonomy) -> list:
    boxes = [e.bbox for e in layout.elements]
    n = len(boxes)
    row = [
        layout.id, layout.doc_type, n,
        sum(b.area for b in boxes) / n,
        sum(b.cx for b in boxes) / n,
        sum(b.cy for b in boxes) / n,
    ]
    return row + [float(v) for v in extract_features(layout, taxonomy)]


def export_features(
    records: Iterable[Union[LayoutRecord, Layout]], out: Union[str, Path, IO[str]], taxonomy: Taxonomy
) -> int:
    """Write one CSV row of hand-crafted features per page; returns the row count."""
    own = isinstance(out, (str, Path))
    f = open(out, "w", newline="", encoding="utf-8") if own else out
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(feature_columns(taxonomy))
        n = 0
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in feature_row(_as_layout(r), taxonomy)])
            n += 1
        return n
    finally:
        if own:
            f.close()


# synthetic corpora for tests and demos

_DOC_CANVAS = {
    "textbook": (1240, 1754), "newspaper": (2480, 3508), "magazine": (1654, 2339),
    "exam": (1240, 1754), "academic": (1275, 1650), "slide": (1920, 1080),
}


def synthesize_record(rng: np.random.Generator, idx: int, labels: tuple[str, ...],
                      max_elements: int = 24) -> dict[str, Any]:
    """A random column-style page in the on-disk record schema."""
    doc_type = DOC_TYPES[int(rng.integers(len(DOC_TYPES)))]
    width, height = _DOC_CANVAS[doc_type]
    ncols = int(rng.integers(1, 4))
    n = int(rng.integers(1, max_elements + 1))
    margin = 0.05
    col_w = (1 - 2 * margin) / ncols
    elements = []
    per_col = [n // ncols + (1 if c < n % ncols else 0) for c in range(ncols)]
    order = 0
    for c, k in enumerate(per_col):
        if k == 0:
            continue
        y = margin
        slot = (1 - 2 * margin) / k
        for _ in range(k):
            h = slot * float(rng.uniform(0.4, 0.95))
            w = col_w * float(rng.uniform(0.6, 0.95))
            x = margin + c * col_w
            box = [round(x * width, 1), round(y * height, 1), round(w * width, 1), round(h * height, 1)]
            cat = labels[int(rng.integers(len(labels)))]
            elements.append({"category": cat, "bbox": box, "order": order})
            order += 1
            y += slot
    return {"id": f"syn-{idx:08d}", "doc_type": doc_type, "width": width, "height": height,
            "elements": elements}


def synthesize_corpus(n: int, seed: int, labels: tuple[str, ...],
                      max_elements: int = 24) -> Iterator[dict[str, Any]]:
    rng = np.random.default_rng(seed)
    for i in range(n):
        yield synthesize_record(rng, i, labels, max_elements)
