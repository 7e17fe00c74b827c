"""Conditioning regimes: turn a ground-truth layout into (condition, target).

Five regimes factor generation into category (C), size (S) and position (P):

* ``ucond``       -- no condition, only the page header
* ``c_to_sp``     -- categories given, predict size and position
* ``cs_to_p``     -- categories and sizes given, predict position
* ``completion``  -- a reading-order prefix of 0-20% of the elements is given
* ``refinement``  -- every box is given after Gaussian perturbation

All randomness comes from an explicit ``numpy.random.Generator``; every
instance records the draws it consumed in ``seed_trace`` so the condition
can be re-derived from the target.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .core import (
    BBox,
    ConditionMismatch,
    Element,
    Layout,
    PartialElement,
    layout_from_dict,
    layout_to_dict,
)
from .serialization import PromptHeader, check_condition

COMPLETION_MAX_FRACTION = 0.2
REFINEMENT_SIGMA = 0.1  # variance 1e-2
MIN_EXTENT = 0.001
_SLACK = 1e-9


class TaskKind(str, enum.Enum):
    UCOND = "ucond"
    C_TO_SP = "c_to_sp"
    CS_TO_P = "cs_to_p"
    COMPLETION = "completion"
    REFINEMENT = "refinement"


TASK_ORDER = tuple(TaskKind)
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 3.0, 3.0)

ConditionList = tuple[PartialElement, ...]


@dataclass(frozen=True)
class TaskInstance:
    kind: TaskKind
    header: PromptHeader
    condition: ConditionList
    target: Layout
    seed_trace: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "condition", tuple(self.condition))
        if self.header.bbox_count != len(self.target):
            raise ConditionMismatch("header bbox_count differs from target size")
        check_condition(self.header, self.condition)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "header": self.header.to_dict(),
            "condition": [c.to_dict() for c in self.condition],
            "target": layout_to_dict(self.target),
            "seed_trace": dict(self.seed_trace),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskInstance":
        return cls(
            TaskKind(d["kind"]),
            PromptHeader.from_dict(d["header"]),
            tuple(PartialElement.from_dict(c) for c in d["condition"]),
            layout_from_dict(d["target"]),
            d.get("seed_trace", {}),
        )


def make_header(layout: Layout, valid_categories: Optional[Sequence[str]] = None) -> PromptHeader:
    """Header for ``layout``; categories default to those present, in first-seen order."""
    if valid_categories is None:
        valid_categories = tuple(dict.fromkeys(layout.categories))
    return PromptHeader(
        layout.doc_type, layout.canvas_w, layout.canvas_h, len(layout), tuple(valid_categories)
    )


def make_ucond(layout: Layout, valid_categories: Optional[Sequence[str]] = None) -> TaskInstance:
    return TaskInstance(TaskKind.UCOND, make_header(layout, valid_categories), (), layout)


def make_c_to_sp(layout: Layout, valid_categories: Optional[Sequence[str]] = None) -> TaskInstance:
    condition = tuple(PartialElement(e.category) for e in layout.elements)
    return TaskInstance(TaskKind.C_TO_SP, make_header(layout, valid_categories), condition, layout)


def _size_tuple(e: Element) -> PartialElement:
    q = e.qbbox
    return PartialElement(e.category, w=q.qw, h=q.qh)


def make_cs_to_p(layout: Layout, valid_categories: Optional[Sequence[str]] = None) -> TaskInstance:
    condition = tuple(_size_tuple(e) for e in layout.elements)
    return TaskInstance(TaskKind.CS_TO_P, make_header(layout, valid_categories), condition, layout)


def retained_count(fraction: float, n: int) -> int:
    """``round(fraction * n)`` with halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


def make_completion(
    layout: Layout,
    rng: np.random.Generator,
    valid_categories: Optional[Sequence[str]] = None,
    *,
    random_subset: bool = False,
) -> TaskInstance:
    """Retain ``k = round(f * N)`` elements with ``f ~ U[0, 0.2]``.

    By default the retained elements are the reading-order prefix.  With
    ``random_subset`` they are a uniformly drawn subset, kept in reading
    order.
    """
    n = len(layout)
    f = float(rng.uniform(0.0, COMPLETION_MAX_FRACTION))
    k = retained_count(f, n)
    if random_subset:
        indices = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    else:
        indices = list(range(k))
    trace = {"fraction": f, "k": k, "indices": indices}
    condition = tuple(PartialElement.from_element(layout.elements[i]) for i in indices)
    return TaskInstance(
        TaskKind.COMPLETION, make_header(layout, valid_categories), condition, layout, trace
    )


def perturb_boxes(
    boxes: np.ndarray, noise: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Add ``noise`` to ``(N, 4)`` xywh boxes; return (raw, clamped).

    Clamping keeps w, h in [0.001, 1] and the box on the page.
    """
    raw = boxes + noise
    out = raw.copy()
    out[:, 2:] = np.clip(out[:, 2:], MIN_EXTENT, 1.0)
    # slack keeps float round-off in x + w from shifting an unperturbed x
    out[:, 0] = np.clip(out[:, 0], 0.0, 1.0 - out[:, 2] + _SLACK)
    out[:, 1] = np.clip(out[:, 1], 0.0, 1.0 - out[:, 3] + _SLACK)
    return raw, out


def _refinement_condition(layout: Layout, noise: np.ndarray) -> ConditionList:
    boxes = np.array([e.bbox.as_tuple() for e in layout.elements], dtype=np.float64)
    _, clamped = perturb_boxes(boxes, noise)
    condition = []
    for e, (x, y, w, h) in zip(layout.elements, clamped):
        q = BBox(float(x), float(y), float(w), float(h)).quantized()
        condition.append(PartialElement(e.category, q.qx, q.qy, q.qw, q.qh))
    return tuple(condition)


def make_refinement(
    layout: Layout,
    rng: np.random.Generator,
    sigma: float = REFINEMENT_SIGMA,
    valid_categories: Optional[Sequence[str]] = None,
) -> TaskInstance:
    """Perturb x, y, w, h with i.i.d. N(0, sigma^2) noise, then clamp and quantize."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    noise = rng.normal(0.0, sigma, size=(len(layout), 4)) if sigma > 0 else np.zeros((len(layout), 4))
    trace = {"sigma": sigma, "noise": noise.tolist()}
    return TaskInstance(
        TaskKind.REFINEMENT,
        make_header(layout, valid_categories),
        _refinement_condition(layout, noise),
        layout,
        trace,
    )


def make_task(
    kind: Union[TaskKind, str],
    layout: Layout,
    rng: Optional[np.random.Generator] = None,
    *,
    sigma: float = REFINEMENT_SIGMA,
    valid_categories: Optional[Sequence[str]] = None,
    random_subset: bool = False,
) -> TaskInstance:
    kind = TaskKind(kind)
    if kind in (TaskKind.COMPLETION, TaskKind.REFINEMENT) and rng is None:
        raise ValueError(f"{kind.value} needs a seeded rng")
    if kind is TaskKind.UCOND:
        return make_ucond(layout, valid_categories)
    if kind is TaskKind.C_TO_SP:
        return make_c_to_sp(layout, valid_categories)
    if kind is TaskKind.CS_TO_P:
        return make_cs_to_p(layout, valid_categories)
    if kind is TaskKind.COMPLETION:
        return make_completion(layout, rng, valid_categories, random_subset=random_subset)
    return make_refinement(layout, rng, sigma, valid_categories)


def rederive_condition(instance: TaskInstance) -> ConditionList:
    """Apply the kind's masking rule to the target using the recorded draws."""
    layout, kind, trace = instance.target, instance.kind, instance.seed_trace
    if kind is TaskKind.UCOND:
        return ()
    if kind is TaskKind.C_TO_SP:
        return tuple(PartialElement(e.category) for e in layout.elements)
    if kind is TaskKind.CS_TO_P:
        return tuple(_size_tuple(e) for e in layout.elements)
    if kind is TaskKind.COMPLETION:
        return tuple(PartialElement.from_element(layout.elements[i]) for i in trace["indices"])
    return _refinement_condition(layout, np.asarray(trace["noise"], dtype=np.float64).reshape(-1, 4))


def normalize_weights(weights: Union[Sequence[float], Mapping[str, float], None]) -> np.ndarray:
    if weights is None:
        w = np.array(DEFAULT_WEIGHTS, dtype=np.float64)
    elif isinstance(weights, Mapping):
        w = np.array([float(weights.get(k.value, 0.0)) for k in TASK_ORDER])
    else:
        w = np.array([float(v) for v in weights])
    if w.shape != (len(TASK_ORDER),):
        raise ValueError(f"need {len(TASK_ORDER)} task weights, got {len(w)}")
    if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
        raise ValueError(f"task weights must be non-negative with a positive sum: {w}")
    return w / w.sum()


def _kind_from_uniform(u: Union[float, np.ndarray], cdf: np.ndarray):
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def sample_kinds(
    n: int, weights: Union[Sequence[float], Mapping[str, float], None], rng: np.random.Generator
) -> list[TaskKind]:
    """Draw ``n`` task kinds i.i.d.; same mapping from uniforms as :func:`make_mixture`."""
    cdf = np.cumsum(normalize_weights(weights))
    idx = _kind_from_uniform(rng.random(n), cdf)
    return [TASK_ORDER[i] for i in idx]


def make_mixture(
    layouts: Iterable[Layout],
    weights: Union[Sequence[float], Mapping[str, float], None] = None,
    rng: Optional[np.random.Generator] = None,
    *,
    sigma: float = REFINEMENT_SIGMA,
    valid_categories: Optional[Sequence[str]] = None,
    random_subset: bool = False,
) -> Iterator[TaskInstance]:
    """Yield one instance per input layout with kinds drawn by weight.

    Each instance gets its own child seed drawn from ``rng`` and recorded in
    ``seed_trace["seed"]``, so any single instance can be rebuilt alone.
    """
    if rng is None:
        raise ValueError("make_mixture needs a seeded rng")
    cdf = np.cumsum(normalize_weights(weights))
    for layout in layouts:
        kind = TASK_ORDER[int(_kind_from_uniform(rng.random(), cdf))]
        seed = int(rng.integers(0, 2**63 - 1))
        inst = make_task(
            kind, layout, np.random.default_rng(seed),
            sigma=sigma, valid_categories=valid_categories, random_subset=random_subset,
        )
        trace = dict(inst.seed_trace)
        trace["seed"] = seed
        yield TaskInstance(inst.kind, inst.header, inst.condition, inst.target, trace)


def noisy_layout(instance: TaskInstance) -> Layout:
    """The layout described by a complete-tuple condition (refinement input)."""
    elements = []
    for c in instance.condition:
        if not c.is_complete:
            raise ConditionMismatch("noisy layout needs complete condition tuples")
        elements.append(Element(c.category, BBox.from_quantized(c.x, c.y, c.w, c.h)))
    return instance.target.replace_elements(elements)
