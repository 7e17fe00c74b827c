from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from doclayout.core import DOC_TYPES, BBox, Element, Layout
from doclayout.serialization import Vocabulary
from doclayout.taxonomy import default_coarse_taxonomy

TAXONOMY = default_coarse_taxonomy()
LABELS = TAXONOMY.labels


@pytest.fixture(scope="session")
def taxonomy():
    return TAXONOMY


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary(TAXONOMY)


def layout_of(*elements, doc_type="academic", canvas=(1000, 1000), id=""):
    """``layout_of(("text", (x, y, w, h)), ...)`` with normalized boxes."""
    return Layout(doc_type, canvas[0], canvas[1],
                  tuple(Element(c, BBox(*b)) for c, b in elements), id)


def random_layout(rng: np.random.Generator, n: int, idx: int = 0) -> Layout:
    els = []
    for _ in range(n):
        w, h = rng.uniform(0.02, 0.5, 2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        els.append(Element(LABELS[int(rng.integers(len(LABELS)))], BBox(x, y, w, h)))
    return Layout(DOC_TYPES[int(rng.integers(len(DOC_TYPES)))], 1000, 1400, tuple(els), f"p{idx}")


@st.composite
def bboxes(draw):
    w = draw(st.floats(0.001, 1.0))
    h = draw(st.floats(0.001, 1.0))
    x = draw(st.floats(0.0, 1.0 - w))
    y = draw(st.floats(0.0, 1.0 - h))
    return BBox(x, y, w, h)


@st.composite
def layouts(draw, min_size=1, max_size=12):
    n = draw(st.integers(min_size, max_size))
    els = tuple(Element(draw(st.sampled_from(LABELS)), draw(bboxes())) for _ in range(n))
    return Layout(draw(st.sampled_from(DOC_TYPES)), 1000, 1000, els)


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
