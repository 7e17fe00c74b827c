"""Layout quality metrics: Alignment, Overlap, maximum IoU and Fréchet distance.

Alignment and Overlap follow the LayoutGAN++ conventions.  mIoU matches
generated elements to reference elements of the same category with an
optimal assignment.  The Fréchet distance is computed over a fixed,
hand-crafted per-layout feature vector (see :func:`extract_features`), so
its absolute values are not comparable to image-feature FID scores.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Optional, Sequence

import numpy as np

from .core import DomainError, Layout, LayoutError
from .taxonomy import Taxonomy

ALIGNMENT_SCALE = 100.0
GRID_SIZE = 32
FRECHET_EPS = 1e-6
NUM_BASE_FEATURES = 14


def _boxes(layout: Layout) -> np.ndarray:
    return np.array([e.bbox.as_tuple() for e in layout.elements], dtype=np.float64)


def _anchors(boxes: np.ndarray) -> np.ndarray:
    x, y, w, h = boxes.T
    return np.stack([x, x + w / 2, x + w, y, y + h / 2, y + h], axis=1)


def alignment_distances(layout: Layout) -> np.ndarray:
    """Per element, the smallest gap between one of its six anchor lines
    (left, center, right, top, middle, bottom) and the same anchor of any
    other element."""
    n = len(layout)
    if n < 2:
        return np.zeros(n)
    a = _anchors(_boxes(layout))
    diff = np.abs(a[:, None, :] - a[None, :, :])  # (i, j, anchor)
    idx = np.arange(n)
    diff[idx, idx, :] = np.inf
    return diff.min(axis=(1, 2))


def alignment_score(layout: Layout) -> float:
    n = len(layout)
    if n < 2:
        return 0.0
    d = np.minimum(alignment_distances(layout), 1.0 - 1e-9)
    return float(ALIGNMENT_SCALE * np.mean(-np.log1p(-d)))


def _intersections(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(
        a[:, None, 0], b[None, :, 0]
    )
    iy = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(
        a[:, None, 1], b[None, :, 1]
    )
    return np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)


def overlap_score(layout: Layout) -> float:
    """Mean over elements of the summed fraction of their area covered by others."""
    boxes = _boxes(layout)
    area = boxes[:, 2] * boxes[:, 3]
    if (area <= 0).any():
        raise DomainError("overlap is undefined for zero-area elements")
    inter = _intersections(boxes, boxes)
    np.fill_diagonal(inter, 0.0)
    return float(np.mean(inter.sum(axis=1) / area))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter = _intersections(a, b)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# assignment


def hungarian(costs, sense: str = "max") -> tuple[list[tuple[int, int]], float]:
    """Optimal assignment on an ``n x m`` matrix.

    Shortest augmenting path formulation with row/column potentials,
    O(n^2 m).  Returns ``min(n, m)`` ``(row, col)`` pairs sorted by row and
    the total weight of the matched entries.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise DomainError("cost matrix must be two-dimensional")
    if not np.isfinite(c).all():
        raise DomainError("cost matrix has NaN or infinite entries")
    if sense not in ("max", "min"):
        raise ValueError(f"sense must be max or min, got {sense!r}")
    n, m = c.shape
    if n == 0 or m == 0:
        return [], 0.0
    transposed = n > m
    work = c.T if transposed else c
    if sense == "max":
        work = -work
    rows_to_cols = _assign_min(work)
    pairs = [(j, i) if transposed else (i, j) for i, j in enumerate(rows_to_cols)]
    pairs.sort()
    return pairs, assignment_value(c, pairs)


def assignment_value(c: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    total = 0.0
    for i, j in sorted(pairs):
        total += float(c[i, j])
    return total


def _assign_min(a: np.ndarray) -> list[int]:
    n, m = a.shape  # n <= m
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) matched to column j
    way = [0] * (m + 1)
    rows = a.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    result = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            result[p[j] - 1] = j - 1
    return result


def brute_force_assignment(costs, sense: str = "max") -> float:
    """Exhaustive optimum over all injective row-to-column maps (small inputs only)."""
    c = np.asarray(costs, dtype=np.float64)
    n, m = c.shape
    pick = max if sense == "max" else min
    if n <= m:
        candidates = ([(i, j) for i, j in enumerate(cols)] for cols in permutations(range(m), n))
    else:
        candidates = ([(i, j) for j, i in enumerate(rows)] for rows in permutations(range(n), m))
    return pick(assignment_value(c, pairs) for pairs in candidates)


# mIoU


def layout_miou(gen: Layout, ref: Layout) -> float:
    """Category-gated optimal IoU matching, normalized by the larger element count."""
    w = iou_matrix(_boxes(gen), _boxes(ref))
    same = np.array(gen.categories, dtype=object)[:, None] == np.array(ref.categories, dtype=object)[None, :]
    w = np.where(same, w, 0.0)
    _, value = hungarian(w, "max")
    return min(1.0, value / max(len(gen), len(ref)))


def miou_matrix(gen_set: Sequence[Layout], ref_set: Sequence[Layout]) -> np.ndarray:
    return np.array([[layout_miou(g, r) for r in ref_set] for g in gen_set], dtype=np.float64)


def set_miou(gen_set: Sequence[Layout], ref_set: Sequence[Layout]) -> float:
    if not gen_set or not ref_set:
        raise DomainError("set_miou needs non-empty sets")
    _, value = hungarian(miou_matrix(gen_set, ref_set), "max")
    return min(1.0, value / max(len(gen_set), len(ref_set)))


# features and Fréchet distance


def grid_coverage(layout: Layout, grid: int = GRID_SIZE) -> float:
    """Fraction of ``grid x grid`` cells whose center lies inside some element."""
    centers = (np.arange(grid) + 0.5) / grid
    covered = np.zeros((grid, grid), dtype=bool)
    for x, y, w, h in _boxes(layout):
        cols = (centers >= x) & (centers < x + w)
        rows = (centers >= y) & (centers < y + h)
        covered |= rows[:, None] & cols[None, :]
    return float(covered.mean())


def feature_names(taxonomy: Taxonomy) -> list[str]:
    base = ["log_count"]
    base += [f"mean_{k}" for k in "xywh"] + [f"std_{k}" for k in "xywh"]
    base += ["mean_area", "std_area", "grid_coverage", "overlap", "alignment"]
    return base + [f"freq_{lab}" for lab in taxonomy.labels]


def extract_features(layout: Layout, taxonomy: Taxonomy) -> np.ndarray:
    """Fixed-length description of one layout; length ``14 + len(taxonomy)``."""
    boxes = _boxes(layout)
    area = boxes[:, 2] * boxes[:, 3]
    hist = np.zeros(len(taxonomy))
    for cat in layout.categories:
        hist[taxonomy.index(cat)] += 1
    hist /= len(layout)
    base = [math.log1p(len(layout))]
    base += list(boxes.mean(axis=0)) + list(boxes.std(axis=0))
    base += [area.mean(), area.std(), grid_coverage(layout), overlap_score(layout),
             alignment_score(layout) / ALIGNMENT_SCALE]
    return np.concatenate([np.array(base, dtype=np.float64), hist])


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(sa: np.ndarray, sb: np.ndarray) -> float:
    root = _psd_sqrt(sa)
    m = root @ sb @ root
    m = (m + m.T) / 2
    vals = np.linalg.eigvalsh(m)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(feats_a, feats_b) -> float:
    """Squared Fréchet distance between Gaussian fits of two feature sets.

    ``Tr((Sa Sb)^1/2)`` is evaluated as the trace of the square root of the
    symmetric matrix ``Sa^1/2 Sb Sa^1/2``.  ``eps * I`` is added to both
    covariances only when that eigendecomposition fails or is non-finite.
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DomainError("Fréchet distance needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sa = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    sb = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    try:
        tr = _trace_sqrt_product(sa, sb)
        if not math.isfinite(tr):
            raise np.linalg.LinAlgError("non-finite trace")
    except np.linalg.LinAlgError:
        offset = FRECHET_EPS * np.eye(sa.shape[0])
        sa, sb = sa + offset, sb + offset
        tr = _trace_sqrt_product(sa, sb)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr)
    return max(value, 0.0)


# reports


@dataclass
class MetricReport:
    fid: Optional[float]
    alignment: float
    overlap: float
    miou: Optional[float]
    n_gen: int
    n_ref: int
    ref_alignment: Optional[float] = None
    ref_overlap: Optional[float] = None
    per_layout: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    KEYS = ("fid", "alignment", "overlap", "miou", "n_gen", "n_ref",
            "ref_alignment", "ref_overlap", "errors", "per_layout")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def csv_row(self, header: bool = True) -> str:
        cols = ("fid", "alignment", "overlap", "miou", "n_gen", "n_ref")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(cols)
        w.writerow(["" if getattr(self, c) is None else repr(getattr(self, c)) for c in cols])
        return buf.getvalue()


ALL_METRICS = ("fid", "miou", "alignment", "overlap")


def reference_report(ref_set: Sequence[Layout]) -> MetricReport:
    """Alignment and Overlap of the reference set alone (a "test data" row)."""
    if not ref_set:
        raise DomainError("empty reference set")
    ali = [alignment_score(l) for l in ref_set]
    ove = [overlap_score(l) for l in ref_set]
    return MetricReport(
        fid=None, alignment=float(np.mean(ali)), overlap=float(np.mean(ove)), miou=None,
        n_gen=0, n_ref=len(ref_set), ref_alignment=float(np.mean(ali)),
        ref_overlap=float(np.mean(ove)),
        per_layout={"alignment": ali, "overlap": ove},
    )


def evaluate(
    gen_set: Sequence[Layout],
    ref_set: Sequence[Layout],
    taxonomy: Taxonomy,
    metrics: Sequence[str] = ALL_METRICS,
) -> MetricReport:
    """Score a generated set against a reference set.

    Failures of individual metrics (e.g. Fréchet distance on a single
    sample) are recorded in ``errors`` and leave that field ``None``.
    """
    if not gen_set or not ref_set:
        raise DomainError("evaluate needs non-empty generated and reference sets")
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    ali = [alignment_score(l) for l in gen_set]
    ove = [overlap_score(l) for l in gen_set]
    ref = reference_report(ref_set)
    report = MetricReport(
        fid=None, alignment=float(np.mean(ali)), overlap=float(np.mean(ove)), miou=None,
        n_gen=len(gen_set), n_ref=len(ref_set),
        ref_alignment=ref.alignment, ref_overlap=ref.overlap,
        per_layout={"alignment": ali, "overlap": ove},
    )
    if "miou" in metrics:
        report.miou = set_miou(gen_set, ref_set)
    if "fid" in metrics:
        try:
            fa = [extract_features(l, taxonomy) for l in gen_set]
            fb = [extract_features(l, taxonomy) for l in ref_set]
            report.fid = frechet_distance(fa, fb)
        except LayoutError as exc:
            report.errors["fid"] = str(exc)
    return report
